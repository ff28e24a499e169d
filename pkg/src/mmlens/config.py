"""Run configuration: one JSON file that drives every CLI subcommand.

Unknown keys are rejected so that typos fail loudly. The top-level
``rng_seed`` is copied into every sub-config that carries a seed, which makes
one number govern the whole pipeline.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .ecg import PipelineConfig
from .minmax import ExpansionConfig
from .training import TrainConfig
from .viz import OverlaySpec


class ConfigError(ValueError):
    pass


@dataclass
class Paths:
    out_dir: str = "run"
    data_dir: str = ""  # raw recordings (non-synthetic mode)
    manifest: str = ""  # id,label rows
    model: str = ""  # default: <out_dir>/model.txt
    expr: str = ""  # default: <out_dir>/expr.txt


@dataclass
class Architecture:
    conv_filters: tuple = (8, 16, 16, 16)
    kernel_widths: tuple = (6, 6, 4, 4)
    fc_widths: tuple = (5, 8, 8)

    def __post_init__(self):
        self.conv_filters = tuple(int(v) for v in self.conv_filters)
        self.kernel_widths = tuple(int(v) for v in self.kernel_widths)
        self.fc_widths = tuple(int(v) for v in self.fc_widths)
        if len(self.conv_filters) != len(self.kernel_widths):
            raise ConfigError("conv_filters and kernel_widths differ in length")


@dataclass
class SynthConfig:
    n: int = 2000
    # "rich" (every morphology in the library, equal weights), a Normal fraction
    # for the two-morphology set, or a {name: weight} mapping
    morphology_mix: object = "rich"
    inversion_fraction: float = 0.3
    noise: float = 0.02
    beats_per_record: int = 4
    separation: float = 1.0
    jitter: float = 0.1


@dataclass
class RunConfig:
    paths: Paths = field(default_factory=Paths)
    architecture: Architecture = field(default_factory=Architecture)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    expansion: ExpansionConfig = field(default_factory=ExpansionConfig)
    overlay: OverlaySpec = field(default_factory=OverlaySpec)
    synthetic: bool = False
    partition_split: str = "train"  # which split the concepts are computed on
    coverage_threshold: float = 1.0  # verify: minimum exact fraction on train and test
    random_checks: int = 10_000  # verify: random embeddings inside the grid bounds
    pattern_range: tuple = (10, 100)  # expand warns outside this range ...
    pattern_limit: int = 1000  # ... and fails above this
    render_depth: int = 2  # partition-tree levels drawn in the hierarchy figure
    rng_seed: int = 0

    def __post_init__(self):
        self.pattern_range = tuple(int(v) for v in self.pattern_range)
        if self.partition_split not in ("train", "test"):
            raise ConfigError("partition_split must be 'train' or 'test'")
        if not 0 <= self.coverage_threshold <= 1:
            raise ConfigError("coverage_threshold must be in [0, 1]")
        if self.render_depth < 0:
            raise ConfigError("render_depth must be >= 0")
        self.set_seed(self.rng_seed)

    def set_seed(self, seed: int) -> None:
        if seed < 0:
            raise ConfigError("rng_seed must be >= 0")
        self.rng_seed = int(seed)
        self.train.rng_seed = self.rng_seed
        self.overlay.rng_seed = self.rng_seed

    # -- paths

    @property
    def out(self) -> Path:
        return Path(self.paths.out_dir)

    def file(self, name: str) -> Path:
        return self.out / name

    @property
    def model_path(self) -> Path:
        return Path(self.paths.model) if self.paths.model else self.file("model.txt")

    @property
    def expr_path(self) -> Path:
        return Path(self.paths.expr) if self.paths.expr else self.file("expr.txt")

    # -- serialization

    def to_dict(self) -> dict:
        d = asdict(self)
        return json.loads(json.dumps(d))  # tuples -> lists

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        kwargs = {}
        known = {f.name: f for f in fields(cls)}
        for key, value in d.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            sub = _SECTIONS.get(key)
            kwargs[key] = _build(sub, value, key) if sub else value
        try:
            return cls(**kwargs)
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from None

    @classmethod
    def loads(cls, text: str) -> "RunConfig":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from None

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        return cls.loads(text)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())


_SECTIONS = {
    "paths": Paths,
    "architecture": Architecture,
    "pipeline": PipelineConfig,
    "synth": SynthConfig,
    "train": TrainConfig,
    "expansion": ExpansionConfig,
    "overlay": OverlaySpec,
}


def _build(cls, value, name):
    if not isinstance(value, dict):
        raise ConfigError(f"section {name!r} must be an object")
    names = {f.name for f in fields(cls)}
    extra = sorted(set(value) - names)
    if extra:
        raise ConfigError(f"unknown key(s) in {name!r}: {', '.join(extra)}")
    try:
        return cls(**value)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{name}: {e}") from None
