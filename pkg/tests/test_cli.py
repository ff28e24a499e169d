import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from conftest import tiny_config
from mmlens.cli import BAD_INPUT, FAILED, OK, main
from mmlens.concepts import read_partition_table
from mmlens.ecg import load_templates
from mmlens.expr_io import save_expr
from mmlens.minmax import build_minmax
from mmlens.model_io import load_model
from mmlens.network import default_architecture, embed, tail_trace

# the tiny nets realize only a handful of patterns
pytestmark = pytest.mark.filterwarnings("ignore:level .* patterns is outside")

STAGES = ["prep", "train", "expand", "partition", "render", "verify"]


def run(config, *args):
    return main([args[0], "--config", str(config), *args[1:]])


def full_run(config):
    for stage in STAGES:
        code = run(config, stage)
        assert code == OK, stage


@pytest.fixture(scope="module")
def finished(tmp_path_factory):
    """One complete pipeline run shared by the read-only tests below."""
    root = tmp_path_factory.mktemp("cli")
    path = root / "config.json"
    tiny_config(root / "run").save(path)
    full_run(path)
    return path, root / "run"


def test_prep_split_sizes(finished):
    _, out = finished
    rep = json.loads((out / "prep_report.json").read_text())
    assert (rep["train"], rep["test"]) == (192, 48)
    with open(out / "train.csv") as fh:
        assert sum(1 for _ in fh) == 193


def test_all_artifacts_present(finished):
    _, out = finished
    for name in ["model.txt", "train_log.csv", "expr.txt", "expand_report.json", "partition.csv",
                 "concept_stats.csv", "verify_report.json", "figures/hierarchy.svg", "figures/node_root.svg"]:
        assert (out / name).exists(), name
    log = list(csv.DictReader(open(out / "train_log.csv")))
    assert [int(r["epoch"]) for r in log] == [1, 2, 3, 4]


def test_verify_report_covers_train_and_test(finished):
    _, out = finished
    rep = json.loads((out / "verify_report.json").read_text())
    assert rep["train"]["coverage"] == 1.0 and rep["train"]["checked"] == 192
    assert rep["test"]["checked"] == 48
    assert rep["random"]["checked"] == 500


def test_partition_rows_per_sample(finished):
    _, out = finished
    rows = read_partition_table((out / "partition.csv").read_text())
    levels = {r["level"] for r in rows}
    assert len(rows) == 192 * len(levels)


def test_rerun_is_byte_identical(finished, tmp_path):
    path, out = finished
    cfg = tiny_config(tmp_path / "again")
    cfg.save(tmp_path / "c.json")
    full_run(tmp_path / "c.json")
    for name in ["train.csv", "model.txt", "expr.txt", "partition.csv", "concept_stats.csv"]:
        assert (out / name).read_bytes() == (tmp_path / "again" / name).read_bytes(), name
    figs = sorted(p.name for p in (out / "figures").glob("*.svg"))
    assert figs == sorted(p.name for p in (tmp_path / "again" / "figures").glob("*.svg"))
    for name in figs:
        assert (out / "figures" / name).read_bytes() == (tmp_path / "again" / "figures" / name).read_bytes()


def test_render_twice_identical(finished):
    path, out = finished
    before = (out / "figures" / "hierarchy.svg").read_bytes()
    assert run(path, "render") == OK
    assert (out / "figures" / "hierarchy.svg").read_bytes() == before


def test_seed_changes_outputs(finished, tmp_path):
    _, out = finished
    cfg = tiny_config(tmp_path / "s1")
    cfg.save(tmp_path / "c.json")
    assert run(tmp_path / "c.json", "prep", "--seed", "1") == OK
    assert (out / "train.csv").read_bytes() != (tmp_path / "s1" / "train.csv").read_bytes()


def test_zero_epochs_keeps_initial_weights(tmp_path):
    cfg = tiny_config(tmp_path / "a")
    cfg.train.epochs = 0
    cfg.save(tmp_path / "a.json")
    assert run(tmp_path / "a.json", "prep") == OK
    assert run(tmp_path / "a.json", "train") == OK
    a = cfg.architecture
    init = default_architecture(216, seed=cfg.rng_seed, conv_filters=a.conv_filters, kernel_widths=a.kernel_widths,
                                fc_widths=a.fc_widths, expansion_depth=cfg.expansion.expansion_depth)
    got = load_model(tmp_path / "a" / "model.txt")
    for p, q in zip(init.parameters(), got.parameters()):
        assert np.array_equal(p, q)


def test_withheld_pattern_fails_verify(tmp_path):
    cfg = tiny_config(tmp_path / "w")
    cfg.save(tmp_path / "w.json")
    for stage in STAGES[:3]:
        assert run(tmp_path / "w.json", stage) == OK
    net = load_model(tmp_path / "w" / "model.txt")
    tr = load_templates(tmp_path / "w" / "train.csv")
    E = embed(net, tr.X)
    base = build_minmax(net, E, cfg.expansion)
    inner = min(base.patterns)
    realized = tail_trace(net, E)[inner]
    pats, counts = np.unique(realized, axis=0, return_counts=True)
    withheld = pats[np.argmax(counts)]
    patterns = dict(base.patterns)
    patterns[inner] = np.array([p for p in base.patterns[inner] if not np.array_equal(p, withheld)])
    save_expr(build_minmax(net, E, cfg.expansion, patterns=patterns), tmp_path / "w" / "expr.txt")
    assert run(tmp_path / "w.json", "verify") == FAILED


def test_full_enumeration_passes_verify(tmp_path):
    cfg = tiny_config(tmp_path / "f")
    cfg.expansion.full_enumeration = True
    cfg.expansion.expansion_depth = 1
    cfg.save(tmp_path / "f.json")
    for stage in ["prep", "train", "expand", "verify"]:
        assert run(tmp_path / "f.json", stage) == OK, stage
    rep = json.loads((tmp_path / "f" / "verify_report.json").read_text())
    assert rep["random"]["coverage"] == 1.0


def test_test_split_same_shape_different_members(finished, tmp_path):
    path, out = finished
    train_rows = read_partition_table((out / "partition.csv").read_text())
    assert run(path, "partition", "--split", "test", "--out", str(tmp_path)) == BAD_INPUT  # no model there
    for name in ["model.txt", "expr.txt", "test.csv", "train.csv"]:
        (tmp_path / name).write_bytes((out / name).read_bytes())
    assert run(path, "partition", "--split", "test", "--out", str(tmp_path)) == OK
    test_rows = read_partition_table((tmp_path / "partition.csv").read_text())
    assert {r["sample_id"] for r in test_rows}.isdisjoint({r["sample_id"] for r in train_rows})
    stats_a = [r["node_path"] for r in csv.DictReader(open(out / "concept_stats.csv"))]
    stats_b = [r["node_path"] for r in csv.DictReader(open(tmp_path / "concept_stats.csv"))]
    assert stats_a == stats_b
    assert run(path, "render", "--split", "test", "--out", str(tmp_path)) == OK


def test_missing_model_is_input_error(tmp_path, capsys):
    cfg = tiny_config(tmp_path / "m")
    cfg.save(tmp_path / "m.json")
    assert run(tmp_path / "m.json", "expand") == BAD_INPUT
    assert "not found" in capsys.readouterr().err


def test_empty_manifest_is_input_error(tmp_path, capsys):
    (tmp_path / "REFERENCE.csv").write_text("")
    cfg = tiny_config(tmp_path / "e")
    cfg.synthetic = False
    cfg.paths.manifest = str(tmp_path / "REFERENCE.csv")
    cfg.save(tmp_path / "e.json")
    assert run(tmp_path / "e.json", "prep") == BAD_INPUT
    assert "no templates" in capsys.readouterr().err


def test_bad_config_is_input_error(tmp_path):
    (tmp_path / "bad.json").write_text('{"nope": 1}')
    assert run(tmp_path / "bad.json", "prep") == BAD_INPUT


def test_bad_depth_flag(tmp_path):
    cfg = tiny_config(tmp_path / "d")
    cfg.save(tmp_path / "d.json")
    assert run(tmp_path / "d.json", "expand", "--depth", "0") == BAD_INPUT


def test_console_script_help():
    out = subprocess.run([sys.executable, "-m", "mmlens.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for stage in STAGES:
        assert stage in out.stdout
