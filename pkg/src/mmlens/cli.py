"""``mmlens`` command line: prep, train, expand, partition, render, verify.

Exit codes: 0 success, 1 verification or coverage failure, 2 input error.
Every artifact is written under the run's output directory and depends only
on the config and its seed, so reruns reproduce byte-identical files.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from . import ecg
from .concepts import (PartitionLawError, check_partition_laws, concept_stats, partition_dataset,
                       partition_table, path_str, prune_empty)
from .config import ConfigError, RunConfig
from .expr_io import load_expr, save_expr
from .minmax import (ExpansionError, MinMaxExpr, build_minmax, expanded_layers, grid_bounds,
                     verify_equivalence)
from .model_io import ModelFormatError, load_model, save_model
from .network import DimensionError, default_architecture, embed
from .training import History, TrainingError, accuracy, train
from .viz import FigureLayout, render_factor_heat, render_hierarchy, render_overlay

log = logging.getLogger("mmlens")

OK, FAILED, BAD_INPUT = 0, 1, 2


class InputError(Exception):
    """Missing or malformed input; maps to exit code 2."""


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise InputError(f"{what} not found: {path} (run the earlier subcommand first?)")
    return path


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _templates(cfg: RunConfig, split: str) -> ecg.LabeledDataset:
    path = _require(cfg.file(f"{split}.csv"), f"{split} templates")
    try:
        return ecg.load_templates(path, r_index=cfg.pipeline.pre(), split=split)
    except ValueError as e:
        raise InputError(str(e)) from None


def _model(cfg: RunConfig):
    try:
        return load_model(_require(cfg.model_path, "model file"))
    except ModelFormatError as e:
        raise InputError(str(e)) from None


def _expr(cfg: RunConfig) -> MinMaxExpr:
    try:
        return load_expr(_require(cfg.expr_path, "expression file"))
    except ModelFormatError as e:
        raise InputError(str(e)) from None


# ---------------------------------------------------------------------------
# subcommands


def cmd_prep(cfg: RunConfig) -> int:
    cfg.out.mkdir(parents=True, exist_ok=True)
    if cfg.synthetic:
        s = cfg.synth
        mix = ecg.RICH_MIX if s.morphology_mix == "rich" else s.morphology_mix
        if isinstance(mix, str):
            raise InputError(f"unknown morphology_mix {mix!r}")
        data = ecg.synth_generate(s.n, mix, seed=cfg.rng_seed, inversion_fraction=s.inversion_fraction,
                                  noise=s.noise, beats_per_record=s.beats_per_record,
                                  separation=s.separation, jitter=s.jitter, cfg=cfg.pipeline)
        report = {"source": "synthetic", "templates": len(data), "dropped_windows": 0}
    else:
        if not cfg.paths.manifest:
            raise InputError("no manifest given (set paths.manifest or use --synthetic)")
        manifest = _require(Path(cfg.paths.manifest), "manifest")
        try:
            recs = ecg.load_recordings(cfg.paths.data_dir or manifest.parent, manifest,
                                       default_rate=cfg.pipeline.sampling_rate)
        except ecg.RecordingLoadError as e:
            raise InputError("cannot load recordings:\n  " + "\n  ".join(e.errors)) from None
        except OSError as e:
            raise InputError(str(e)) from None
        data, report = ecg.process_recordings(recs, cfg.pipeline)
        report["source"] = str(manifest)
    if len(data) == 0:
        raise InputError("no templates extracted (empty manifest or no usable recordings)")
    tr, te = ecg.split_train_test(data, cfg.rng_seed, cfg.pipeline.train_fraction)
    ecg.save_templates(tr, cfg.file("train.csv"))
    ecg.save_templates(te, cfg.file("test.csv"))
    report["labels"] = {split: {"normal": int(np.sum(d.y == 1)), "other": int(np.sum(d.y == 0))}
                        for split, d in (("train", tr), ("test", te))}
    report["train"], report["test"] = len(tr), len(te)
    _write_json(cfg.file("prep_report.json"), report)
    print(f"prep: {len(tr)} train / {len(te)} test templates -> {cfg.out}")
    return OK


def cmd_train(cfg: RunConfig) -> int:
    tr = _templates(cfg, "train")
    a = cfg.architecture
    try:
        net = default_architecture(tr.X.shape[1], seed=cfg.rng_seed, conv_filters=a.conv_filters,
                                   kernel_widths=a.kernel_widths, fc_widths=a.fc_widths,
                                   expansion_depth=cfg.expansion.expansion_depth)
    except (DimensionError, ValueError) as e:
        raise InputError(f"architecture: {e}") from None
    hist = History()
    try:
        net = train(net, tr.X, tr.y, cfg.train, groups=tr.groups, history=hist)
    except TrainingError as e:
        print(f"train: aborted: {e}", file=sys.stderr)
        return FAILED
    cfg.model_path.parent.mkdir(parents=True, exist_ok=True)
    save_model(net, cfg.model_path)
    with open(cfg.file("train_log.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss", "train_accuracy"])
        for i, (loss, acc) in enumerate(zip(hist.loss, hist.accuracy), start=1):
            w.writerow([i, repr(float(loss)), repr(float(acc))])
    msg = f"train: {cfg.train.epochs} epochs, train accuracy {accuracy(net, tr.X, tr.y):.4f}"
    if cfg.file("test.csv").exists():
        te = _templates(cfg, "test")
        msg += f", test accuracy {accuracy(net, te.X, te.y):.4f}"
    print(msg)
    return OK


def cmd_expand(cfg: RunConfig) -> int:
    net = _model(cfg)
    tr = _templates(cfg, "train")
    E = embed(net, tr.X)
    try:
        expr = build_minmax(net, E, cfg.expansion)
    except ExpansionError as e:
        raise InputError(str(e)) from None
    cfg.expr_path.parent.mkdir(parents=True, exist_ok=True)
    save_expr(expr, cfg.expr_path)
    rep = verify_equivalence(net, expr, tr.X, ids=tr.ids)
    counts = {str(L): len(P) for L, P in sorted(expr.patterns.items())}
    lo, hi = cfg.pattern_range
    status = OK
    notes = []
    for level, L in enumerate(expanded_layers(net, cfg.expansion.expansion_depth)):
        n = len(expr.patterns[L])
        print(f"expand: level {level} (layer {L}): {n} patterns")
        if n > cfg.pattern_limit:
            notes.append(f"level {level}: {n} patterns exceeds the limit of {cfg.pattern_limit}")
            status = FAILED
        elif not lo <= n <= hi:
            warnings.warn(f"level {level}: {n} patterns is outside the expected {lo}-{hi}")
    root = expr.root
    print(f"expand: root {root.kind} with {len(root.children)} children, {expr.n_leaves} leaves")
    print(f"expand: training equivalence {rep.summary()}")
    if rep.uncovered_inputs or rep.n_exact < rep.n_checked:
        notes.append(f"{len(rep.uncovered_inputs)} training samples uncovered, "
                     f"{rep.n_checked - rep.n_exact} inexact")
        status = FAILED
    _write_json(cfg.file("expand_report.json"), {
        "pattern_counts": counts, "root_kind": root.kind, "root_arity": len(root.children),
        "leaves": expr.n_leaves, "nodes": root.n_nodes(),
        "train": {"checked": rep.n_checked, "exact": rep.n_exact, "max_abs_gap": rep.max_abs_gap,
                  "uncovered": rep.uncovered_inputs},
    })
    for n in notes:
        print(f"expand: FAIL {n}", file=sys.stderr)
    return status


def cmd_partition(cfg: RunConfig) -> int:
    net, expr = _model(cfg), _expr(cfg)
    data = _templates(cfg, cfg.partition_split)
    tree = prune_empty(partition_dataset(expr, net, data.X, data.y, data.ids))
    try:
        check_partition_laws(tree, cfg.expansion.equality_tolerance)
    except PartitionLawError as e:
        print(f"partition: FAIL {e}", file=sys.stderr)
        return FAILED
    cfg.file("partition.csv").write_text(partition_table(tree))
    cfg.file("concept_stats.csv").write_text(concept_stats(tree))
    pruned = sum(1 for n in tree.root.walk() if n.pruned)
    total = sum(1 for _ in tree.root.walk())
    print(f"partition: {len(data)} {cfg.partition_split} samples, {total} nodes, {pruned} pruned (empty)")
    return OK


def _node_file(path: tuple) -> str:
    return "node_root.svg" if not path else "node_" + "_".join(str(i) for i in path) + ".svg"


def cmd_render(cfg: RunConfig) -> int:
    from .concepts import read_partition_table

    data = _templates(cfg, cfg.partition_split)
    part = read_partition_table(_require(cfg.file("partition.csv"), "partition table").read_text())
    with open(_require(cfg.file("concept_stats.csv"), "concept stats"), newline="") as fh:
        stats = list(csv.DictReader(fh))
    index = {sid: i for i, sid in enumerate(data.ids)}
    missing = {r["sample_id"] for r in part} - set(index)
    if missing:
        raise InputError(f"partition refers to {len(missing)} samples absent from "
                         f"{cfg.partition_split}.csv (partition and templates out of sync)")
    layout = FigureLayout.from_tables(part, stats, index, max_depth=cfg.render_depth)
    layout.check_conservation()
    X, y = data.X, data.y
    fig_dir = cfg.file("figures")
    fig_dir.mkdir(parents=True, exist_ok=True)
    for old in fig_dir.glob("*.svg"):
        old.unlink()
    (fig_dir / "hierarchy.svg").write_text(render_hierarchy(layout, X, y, cfg.overlay))
    n_files = 1
    for k, row in enumerate(layout.rows):
        for j, p in enumerate(row):
            meta = {"path": path_str(p.path), "members": len(p.members), "kind": p.kind}
            svg = render_overlay(X[p.members], y[p.members], cfg.overlay,
                                 title=f"{path_str(p.path)}  n={len(p.members)}", meta=meta)
            (fig_dir / _node_file(p.path)).write_text(svg)
            n_files += 1
    # coefficient charts for the factors that own at least one sample
    expr = _expr(cfg) if cfg.expr_path.exists() else None
    if expr is not None:
        owned = [r["node_path"] for r in stats if r["kind"] == "leaf" and int(r["members"]) > 0]
        for p in owned:
            path = tuple(int(i) for i in p.strip("/").split("/")) if p != "/" else ()
            node = expr.root
            for i in path:
                node = node.children[i]
            (fig_dir / ("factor" + _node_file(path)[4:])).write_text(
                render_factor_heat(node.fn, cfg.overlay, title=f"factor {p}"))
            n_files += 1
    print(f"render: {len(layout.rows)} rows, {sum(len(r) for r in layout.rows)} panels, "
          f"{n_files} files -> {fig_dir}")
    return OK


def cmd_verify(cfg: RunConfig) -> int:
    net, expr = _model(cfg), _expr(cfg)
    tol = cfg.expansion.equality_tolerance
    tr = _templates(cfg, "train")
    results = {"train": verify_equivalence(net, expr, tr.X, tolerance=tol, ids=tr.ids)}
    if cfg.file("test.csv").exists():
        te = _templates(cfg, "test")
        results["test"] = verify_equivalence(net, expr, te.X, tolerance=tol, ids=te.ids)
    if cfg.random_checks > 0:
        E = embed(net, tr.X)
        lo, hi = grid_bounds(E, cfg.expansion)
        rng = np.random.default_rng([cfg.rng_seed, 7])
        Z = rng.uniform(lo, hi, size=(cfg.random_checks, len(lo)))
        results["random"] = verify_equivalence(net, expr, Z, space="embedding", tolerance=tol)
    status = OK
    for name, rep in results.items():
        gate = name != "random"
        ok = rep.coverage >= cfg.coverage_threshold
        flag = ("PASS" if ok else "FAIL") if gate else "info"
        print(f"verify {name:6s} [{flag}] {rep.summary()}")
        if gate and not ok:
            status = FAILED
    _write_json(cfg.file("verify_report.json"), {
        name: {"checked": r.n_checked, "exact": r.n_exact, "coverage": r.coverage,
               "max_abs_gap": r.max_abs_gap, "uncovered": len(r.uncovered_inputs)}
        for name, r in results.items()})
    return status


COMMANDS = {
    "prep": cmd_prep,
    "train": cmd_train,
    "expand": cmd_expand,
    "partition": cmd_partition,
    "render": cmd_render,
    "verify": cmd_verify,
}


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mmlens", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=list(COMMANDS))
    p.add_argument("--config", help="JSON run config (defaults used when omitted)")
    p.add_argument("--seed", type=int, help="global seed for every stage")
    p.add_argument("--synthetic", action="store_true", help="generate templates instead of reading recordings")
    p.add_argument("--polarity-correction", action="store_true", help="flip recordings whose beats point down")
    p.add_argument("--depth", type=int, help="number of terminal hidden layers to expand")
    p.add_argument("--grid", type=int, help="grid points per embedding dimension")
    p.add_argument("--out", help="output directory")
    p.add_argument("--split", choices=["train", "test"], help="split used for partition/render")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress (per-epoch loss etc.)")
    return p


def load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.set_seed(args.seed)
    if args.synthetic:
        cfg.synthetic = True
    if args.polarity_correction:
        cfg.pipeline.polarity_correction = True
    if args.depth is not None:
        if args.depth < 1:
            raise ConfigError("--depth must be >= 1")
        cfg.expansion.expansion_depth = args.depth
    if args.grid is not None:
        if args.grid < 2:
            raise ConfigError("--grid must be >= 2")
        cfg.expansion.grid_points_per_dim = args.grid
    if args.out:
        cfg.paths.out_dir = args.out
    if args.split:
        cfg.partition_split = args.split
    return cfg


def _thread_limit():
    """Cap BLAS threads (MMLENS_THREADS, default 1 so reductions stay in a fixed order)."""
    from threadpoolctl import threadpool_limits

    raw = os.environ.get("MMLENS_THREADS", "1")
    try:
        n = max(1, int(raw))
    except ValueError:
        raise InputError(f"MMLENS_THREADS must be an integer, got {raw!r}") from None
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    logging.captureWarnings(True)
    try:
        cfg = load_config(args)
        with _thread_limit():
            return COMMANDS[args.command](cfg)
    except (InputError, ConfigError) as e:
        print(f"mmlens {args.command}: error: {e}", file=sys.stderr)
        return BAD_INPUT


if __name__ == "__main__":
    sys.exit(main())
