import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mmlens.config import RunConfig
from mmlens.network import AffineLayer, ReluNetwork, default_architecture

settings.register_profile("mmlens", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("mmlens")


def affine_net(specs, input_length, embedding_index=0, expansion_depth=None):
    """ReluNetwork from [(W, b), ...]; ReLU after every layer except the last."""
    layers = []
    for i, (W, b) in enumerate(specs):
        layers.append(AffineLayer(np.asarray(W, dtype=np.float64), np.asarray(b, dtype=np.float64),
                                  relu=i < len(specs) - 1))
    if expansion_depth is None:
        expansion_depth = max(1, len(layers) - 1 - embedding_index)
    return ReluNetwork(layers, input_length, embedding_index, expansion_depth)


def random_tail(rng, widths, bias_scale=0.5):
    """Random FC tail ``widths = [n_in, h1, ..., 1]`` with nonzero biases."""
    specs = []
    for a, b in zip(widths[:-1], widths[1:]):
        specs.append((rng.standard_normal((b, a)), bias_scale * rng.standard_normal(b)))
    return affine_net(specs, widths[0])


@pytest.fixture
def small_conv_net():
    """Every layer type, small enough for exhaustive gradient checks."""
    return default_architecture(input_length=40, seed=3, conv_filters=(2, 3), kernel_widths=(6, 4),
                                fc_widths=(5, 4, 3), expansion_depth=2)


def tiny_config(out_dir) -> RunConfig:
    """A fast end-to-end config: small synthetic set, small conv stack, few epochs."""
    cfg = RunConfig()
    cfg.synthetic = True
    cfg.synth.n = 240
    cfg.architecture.conv_filters = (4, 8)
    cfg.architecture.kernel_widths = (6, 4)
    cfg.architecture.fc_widths = (5, 4, 4)
    cfg.train.epochs = 4
    cfg.train.learning_rate = 1e-3
    cfg.expansion.grid_points_per_dim = 4
    cfg.random_checks = 500
    cfg.overlay.sample_cap = 50
    cfg.paths.out_dir = str(out_dir)
    return cfg


@pytest.fixture
def tiny_run_config(tmp_path):
    path = tmp_path / "config.json"
    tiny_config(tmp_path / "run").save(path)
    return path


# ---------------------------------------------------------------------------
# acceptance summary: one PASS/FAIL line per criterion after the test report


def pytest_configure(config):
    config._mmlens_acceptance = []


@pytest.fixture
def acceptance_log(request):
    return request.config._mmlens_acceptance


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_mmlens_acceptance", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
