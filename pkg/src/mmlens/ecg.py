"""ECG recordings to R-peak aligned, peak-normalized templates.

Also holds a parametric beat synthesizer so the whole pipeline can run
without the PhysioNet download.
"""

from __future__ import annotations

import csv
import io
import logging
import warnings
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

LABELS = ("N", "O", "A", "~")
KEEP = {"N": 1, "O": 0}


class RecordingLoadError(ValueError):
    def __init__(self, errors: list[str]):
        super().__init__("; ".join(errors))
        self.errors = errors


@dataclass
class PipelineConfig:
    sampling_rate: float = 300.0
    pre_seconds: float = 0.25
    post_seconds: float = 0.47
    refractory_seconds: float = 0.2
    detrend_seconds: float = 0.6
    threshold_k: float = 4.0  # MAD multiplier
    threshold_frac: float = 0.4  # fraction of (max - median) the peak must clear
    polarity_correction: bool = False
    train_fraction: float = 0.8

    def pre(self, fs=None) -> int:
        return int(round(self.pre_seconds * (fs or self.sampling_rate)))

    def post(self, fs=None) -> int:
        return int(round(self.post_seconds * (fs or self.sampling_rate)))

    @property
    def window(self) -> int:
        return self.pre() + self.post()


@dataclass
class RawRecording:
    id: str
    samples: np.ndarray
    sampling_rate: float
    label: str

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sampling_rate


@dataclass
class Template:
    source_id: str
    samples: np.ndarray
    label: int  # 1 = Normal (N), 0 = Other (O)
    r_index: int
    beat: int = 0

    @property
    def id(self) -> str:
        return f"{self.source_id}#{self.beat}"


@dataclass
class LabeledDataset:
    templates: list = field(default_factory=list)
    split: str = "all"
    rng_seed: int = 0

    def __len__(self):
        return len(self.templates)

    @property
    def X(self) -> np.ndarray:
        if not self.templates:
            return np.zeros((0, 0))
        return np.stack([t.samples for t in self.templates])

    @property
    def y(self) -> np.ndarray:
        return np.array([t.label for t in self.templates], dtype=np.int64)

    @property
    def groups(self) -> list[str]:
        return [t.source_id for t in self.templates]

    @property
    def ids(self) -> list[str]:
        return [t.id for t in self.templates]


# ---------------------------------------------------------------------------
# loading


def read_manifest(path) -> list[tuple[str, str]]:
    rows = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or not row[0].strip():
                continue
            if row[0].strip().lower() == "id":
                continue
            rows.append((row[0].strip(), row[1].strip() if len(row) > 1 else ""))
    return rows


def _read_signal(base: Path):
    """Samples and an optional sampling rate from the first matching file."""
    rate = None
    sidecar = base.with_suffix(".fs")
    if sidecar.exists():
        rate = float(sidecar.read_text().split()[0])
    for ext in (".txt", ".csv"):
        p = base.with_suffix(ext)
        if p.exists():
            return np.loadtxt(p, dtype=np.float64, ndmin=1), rate
    for ext in (".bin", ".dat"):
        p = base.with_suffix(ext)
        if p.exists():
            return np.fromfile(p, dtype="<i2").astype(np.float64), rate
    p = base.with_suffix(".mat")
    if p.exists():
        from scipy.io import loadmat

        return np.asarray(loadmat(p)["val"], dtype=np.float64).ravel(), rate
    raise FileNotFoundError(f"no signal file for {base.name} (.txt/.csv/.bin/.dat/.mat)")


def load_recordings(data_dir, manifest, default_rate: float = 300.0) -> list[RawRecording]:
    """One RawRecording per manifest row; all row problems are reported together."""
    data_dir = Path(data_dir)
    rows = read_manifest(manifest) if not isinstance(manifest, list) else manifest
    recs, errors = [], []
    for i, (rid, label) in enumerate(rows, start=1):
        if label not in LABELS:
            errors.append(f"row {i} ({rid}): unknown label {label!r}")
            continue
        try:
            samples, rate = _read_signal(data_dir / rid)
        except (OSError, ValueError, KeyError) as e:
            errors.append(f"row {i} ({rid}): {e}")
            continue
        if not np.all(np.isfinite(samples)):
            errors.append(f"row {i} ({rid}): non-finite samples")
            continue
        recs.append(RawRecording(rid, samples, rate or default_rate, label))
    if errors:
        raise RecordingLoadError(errors)
    log.info("loaded %d recordings, labels %s", len(recs), dict(Counter(r.label for r in recs)))
    return recs


def filter_labels(recordings: list[RawRecording]) -> list[RawRecording]:
    """Keep Normal (N) and Other (O) recordings; drop AF (A) and noisy (~)."""
    kept = [r for r in recordings if r.label in KEEP]
    if recordings and not kept:
        warnings.warn("no N or O recordings left after filtering")
    return kept


# ---------------------------------------------------------------------------
# filtering, peaks, templates


def detrend(x, fs: float, seconds: float) -> np.ndarray:
    """Subtract a centered moving average (baseline wander removal)."""
    x = np.asarray(x, dtype=np.float64)
    w = max(1, int(round(seconds * fs)))
    if w >= len(x):
        return x - x.mean()
    kernel = np.ones(w) / w
    pad = w // 2
    padded = np.pad(x, (pad, w - 1 - pad), mode="edge")
    return x - np.convolve(padded, kernel, mode="valid")


def prepare_signal(rec: RawRecording, cfg: PipelineConfig) -> np.ndarray:
    """Detrended signal, sign-flipped when polarity correction is on and the beats point down."""
    s = detrend(rec.samples, rec.sampling_rate, cfg.detrend_seconds)
    if cfg.polarity_correction and len(s):
        lo, hi = np.percentile(s, [0.5, 99.5])
        if -lo > hi:
            s = -s
    return s


def detect_r_peaks(rec: RawRecording, cfg: PipelineConfig | None = None) -> np.ndarray:
    """Positive-going peaks above an adaptive threshold, at least one refractory gap apart.

    The threshold is ``median + max(k * 1.4826 * MAD, frac * (max - median))``.
    Only upward peaks count: without polarity correction an inverted beat is
    caught on its (now upward) Q or S deflection rather than on the R wave.
    """
    cfg = cfg or PipelineConfig()
    if rec.sampling_rate <= 0:
        raise ValueError("sampling_rate must be > 0")
    s = prepare_signal(rec, cfg)
    if len(s) < 3:
        return np.zeros(0, dtype=np.int64)
    med = np.median(s)
    mad = np.median(np.abs(s - med))
    top = s.max()
    if not top > med:
        warnings.warn(f"{rec.id}: no peaks found")
        return np.zeros(0, dtype=np.int64)
    thr = med + max(cfg.threshold_k * 1.4826 * mad, cfg.threshold_frac * (top - med))
    i = np.arange(1, len(s) - 1)
    cand = i[(s[i] >= s[i - 1]) & (s[i] > s[i + 1]) & (s[i] > thr)]
    gap = int(round(cfg.refractory_seconds * rec.sampling_rate))
    taken: list[int] = []
    for c in cand[np.argsort(-s[cand], kind="stable")]:
        if all(abs(c - t) >= gap for t in taken):
            taken.append(int(c))
    if not taken:
        warnings.warn(f"{rec.id}: no peaks found")
    return np.array(sorted(taken), dtype=np.int64)


def extract_templates(rec: RawRecording, peaks, cfg: PipelineConfig | None = None) -> list[Template]:
    """Fixed windows around each peak of the filtered signal; windows past either end are dropped."""
    cfg = cfg or PipelineConfig()
    s = prepare_signal(rec, cfg)
    pre, post = cfg.pre(rec.sampling_rate), cfg.post(rec.sampling_rate)
    label = KEEP.get(rec.label, -1)
    out = []
    for k, p in enumerate(np.asarray(peaks, dtype=np.int64)):
        if p - pre < 0 or p + post > len(s):
            continue
        out.append(Template(rec.id, s[p - pre:p + post].copy(), label, pre, beat=k))
    if len(peaks) and not out:
        warnings.warn(f"{rec.id}: every window crosses the recording bounds")
    return out


def normalize_peak(t: Template) -> Template:
    m = np.max(np.abs(t.samples))
    if not m > 0:
        raise ValueError(f"template {t.id} is all zeros")
    return Template(t.source_id, t.samples / m, t.label, t.r_index, t.beat)


def process_recordings(recordings, cfg: PipelineConfig | None = None):
    """Filter labels, detect peaks, cut and normalize templates. Returns (dataset, report)."""
    cfg = cfg or PipelineConfig()
    kept = filter_labels(recordings)
    templates, dropped, empty = [], 0, []
    for rec in sorted(kept, key=lambda r: r.id):
        peaks = detect_r_peaks(rec, cfg)
        ts = extract_templates(rec, peaks, cfg)
        dropped += len(peaks) - len(ts)
        for t in ts:
            if np.max(np.abs(t.samples)) > 0:
                templates.append(normalize_peak(t))
        if not ts:
            empty.append(rec.id)
    report = {
        "recordings_in": len(recordings),
        "recordings_kept": len(kept),
        "labels_in": dict(sorted(Counter(r.label for r in recordings).items())),
        "templates": len(templates),
        "dropped_windows": dropped,
        "recordings_without_templates": len(empty),
    }
    return LabeledDataset(templates), report


def split_train_test(dataset: LabeledDataset, seed: int = 0, train_fraction: float = 0.8):
    """Random template-level split (patient/recording identity is ignored)."""
    n = len(dataset)
    if n == 0:
        raise ValueError("empty dataset")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(train_fraction * n))
    train = [dataset.templates[i] for i in np.sort(perm[:n_train])]
    test = [dataset.templates[i] for i in np.sort(perm[n_train:])]
    return LabeledDataset(train, "train", seed), LabeledDataset(test, "test", seed)


# ---------------------------------------------------------------------------
# template files


def dumps_templates(dataset: LabeledDataset) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    width = len(dataset.templates[0].samples) if dataset.templates else 0
    w.writerow(["id", "label"] + [f"s{i}" for i in range(width)])
    for t in dataset.templates:
        w.writerow([t.id, t.label] + [repr(float(v)) for v in t.samples])
    return buf.getvalue()


def save_templates(dataset: LabeledDataset, path) -> None:
    Path(path).write_text(dumps_templates(dataset))


def load_templates(path, r_index: int | None = None, split: str = "all") -> LabeledDataset:
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:2] != ["id", "label"]:
            raise ValueError(f"{path}: not a template file")
        for lineno, row in enumerate(reader, start=2):
            tid = row[0]
            source, _, beat = tid.rpartition("#")
            try:
                samples = np.array([float(v) for v in row[2:]], dtype=np.float64)
                label = int(row[1])
            except ValueError as e:
                raise ValueError(f"{path}:{lineno}: {e}") from None
            if len(samples) != len(header) - 2:
                raise ValueError(f"{path}:{lineno}: expected {len(header) - 2} samples")
            ri = r_index if r_index is not None else PipelineConfig().pre()
            out.append(Template(source or tid, samples, label, ri, int(beat) if beat.isdigit() else 0))
    return LabeledDataset(out, split)


# ---------------------------------------------------------------------------
# synthetic beats

# (amplitude, center seconds, width seconds) per wave, relative to the R peak
NORMAL_WAVES = {
    "P": (0.12, -0.16, 0.022), "Q": (-0.10, -0.035, 0.010), "R": (1.00, 0.0, 0.011),
    "S": (-0.22, 0.035, 0.011), "T": (0.32, 0.26, 0.045), "U": (0.05, 0.40, 0.030),
}
OTHER_WAVES = {
    "P": (0.05, -0.17, 0.030), "Q": (-0.32, -0.040, 0.012), "R": (0.85, 0.0, 0.016),
    "S": (-0.48, 0.050, 0.022), "T": (0.10, 0.28, 0.060), "U": (0.0, 0.40, 0.030),
}


def synth_beat(t, waves, rng=None, jitter: float = 0.1) -> np.ndarray:
    """Sum of Gaussian bumps at times ``t`` (seconds from the R peak)."""
    out = np.zeros_like(t, dtype=np.float64)
    for amp, center, width in waves.values():
        if rng is not None:
            amp *= 1 + jitter * rng.standard_normal()
            center += 0.05 * jitter * rng.standard_normal()
            width *= 1 + jitter * rng.standard_normal()
        out += amp * np.exp(-0.5 * ((t - center) / width) ** 2)
    return out


def _variant(base, **changes):
    out = dict(base)
    out.update(changes)
    return out


# name -> (label, waves). Label 1 = Normal, 0 = Other.
MORPHOLOGIES = {
    "normal": (1, NORMAL_WAVES),
    "normal_tall_t": (1, _variant(NORMAL_WAVES, T=(0.50, 0.25, 0.040))),
    "normal_broad_p": (1, _variant(NORMAL_WAVES, P=(0.18, -0.17, 0.030), R=(0.90, 0.0, 0.012))),
    "other": (0, OTHER_WAVES),
    "deep_q": (0, _variant(NORMAL_WAVES, Q=(-0.38, -0.035, 0.012), U=(0.0, 0.40, 0.030))),
    "st_depression": (0, _variant(NORMAL_WAVES, S=(-0.45, 0.055, 0.025), T=(0.08, 0.28, 0.060))),
    "inverted_t": (0, _variant(NORMAL_WAVES, T=(-0.28, 0.26, 0.050))),
    "wide_qrs": (0, _variant(NORMAL_WAVES, R=(0.95, 0.0, 0.030), S=(-0.30, 0.060, 0.030))),
}

RICH_MIX = {name: 1.0 for name in MORPHOLOGIES}


def blend_waves(separation: float) -> dict:
    """Other-class waves moved ``separation`` of the way from Normal (1.0 = OTHER_WAVES)."""
    return {k: tuple(n + separation * (o - n) for n, o in zip(NORMAL_WAVES[k], OTHER_WAVES[k]))
            for k in NORMAL_WAVES}


def synth_generate(n: int, morphology_mix=0.5, seed: int = 0, inversion_fraction: float = 0.0,
                   noise: float = 0.02, beats_per_record: int = 4, separation: float = 1.0,
                   jitter: float = 0.1, cfg: PipelineConfig | None = None) -> LabeledDataset:
    """Labeled templates from parametric beat morphologies.

    ``morphology_mix`` is either the fraction of Normal beats in a two-morphology
    set (Normal vs Other, with ``separation`` scaling how far apart they sit) or
    a mapping from MORPHOLOGIES names to relative weights. Each synthetic
    recording draws one morphology and contributes ``beats_per_record``
    jittered beats. Inverted beats are aligned the way the peak detector would
    align them: on the largest upward deflection near the R wave unless
    ``cfg.polarity_correction`` is set.
    """
    if n <= 0:
        raise ValueError("n must be > 0")
    cfg = cfg or PipelineConfig()
    rng = np.random.default_rng(seed)
    if isinstance(morphology_mix, dict):
        names = sorted(morphology_mix)
        weights = np.array([morphology_mix[k] for k in names], dtype=np.float64)
        choices = [MORPHOLOGIES[k] for k in names]
    else:
        names = ["normal", "other"]
        weights = np.array([morphology_mix, 1 - morphology_mix])
        choices = [(1, NORMAL_WAVES), (0, blend_waves(separation))]
    weights = weights / weights.sum()
    fs = cfg.sampling_rate
    pre, post = cfg.pre(), cfg.post()
    margin = int(round(0.1 * fs))
    t = (np.arange(-pre - margin, post + margin)) / fs
    templates = []
    n_records = -(-n // beats_per_record)
    made = 0
    for r in range(n_records):
        label, waves = choices[int(rng.choice(len(choices), p=weights))]
        inverted = rng.random() < inversion_fraction
        rid = f"synth{r:05d}"
        for k in range(min(beats_per_record, n - made)):
            x = synth_beat(t, waves, rng, jitter) + noise * rng.standard_normal(len(t))
            if inverted and not cfg.polarity_correction:
                x = -x
            center = pre + margin
            near = slice(center - margin, center + margin + 1)
            shift = int(np.argmax(x[near])) - margin
            start = margin + shift
            seg = x[start:start + pre + post]
            templates.append(normalize_peak(Template(rid, seg, int(label), pre, beat=k)))
            made += 1
    return LabeledDataset(templates, "all", seed)


def synth_recording(duration: float = 30.0, label: str = "N", seed: int = 0, fs: float = 300.0,
                    heart_rate: float = 70.0, inverted: bool = False, noise: float = 0.02,
                    wander: float = 0.1) -> tuple[RawRecording, np.ndarray]:
    """A raw recording of repeated beats plus the true R-peak sample indices."""
    rng = np.random.default_rng(seed)
    n = int(round(duration * fs))
    x = np.zeros(n)
    rr = 60.0 / heart_rate
    times = np.arange(0.5, duration - 0.2, rr) + 0.02 * rng.standard_normal(len(np.arange(0.5, duration - 0.2, rr)))
    peaks = np.round(times * fs).astype(np.int64)
    waves = NORMAL_WAVES if label == "N" else OTHER_WAVES
    tt = np.arange(n) / fs
    for p in peaks:
        lo, hi = max(0, p - int(0.5 * fs)), min(n, p + int(0.6 * fs))
        x[lo:hi] += synth_beat(tt[lo:hi] - p / fs, waves, rng, jitter=0.03)
    x += noise * rng.standard_normal(n) + wander * np.sin(2 * np.pi * 0.3 * tt)
    if inverted:
        x = -x
    return RawRecording(f"rec{seed:05d}", x, fs, label), peaks
