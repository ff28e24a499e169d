"""Full pipeline on the recorded single-lead set, then compare test accuracy with 74% +/- 5 points.

Needs the training2017 recordings and REFERENCE.csv under data/training2017
(or edit configs/physionet.json). Without them the script says so and exits 2.

    python scripts/run_physionet.py [--config configs/physionet.json] [--polarity-correction]
"""

import argparse
import sys
from pathlib import Path

from mmlens.cli import BAD_INPUT, OK
from mmlens.config import RunConfig
from mmlens.ecg import load_templates
from mmlens.model_io import load_model
from mmlens.training import accuracy

sys.path.insert(0, str(Path(__file__).resolve().parent))
from run_synthetic import run  # noqa: E402

ROOT = Path(__file__).resolve().parents[1]
TARGET, BAND = 0.74, 0.05

if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", default=ROOT / "configs" / "physionet.json")
    p.add_argument("--polarity-correction", action="store_true")
    a = p.parse_args()
    cfg = RunConfig.load(a.config)
    if not Path(cfg.paths.manifest).exists():
        print(f"manifest {cfg.paths.manifest} not found; download the recordings first", file=sys.stderr)
        sys.exit(BAD_INPUT)
    extra = ["--polarity-correction"] if a.polarity_correction else []
    code = run(a.config, extra)
    if code != OK:
        sys.exit(code)
    if a.polarity_correction:
        cfg.pipeline.polarity_correction = True
    te = load_templates(cfg.file("test.csv"))
    acc = accuracy(load_model(cfg.model_path), te.X, te.y)
    ok = abs(acc - TARGET) <= BAND
    print(f"test accuracy {acc:.4f}: {'within' if ok else 'outside'} {TARGET:.2f} +/- {BAND:.2f}")
    sys.exit(OK if ok else 1)
