"""Run every pipeline stage on the synthetic ECG set.

    python scripts/run_synthetic.py [--config configs/synthetic.json] [--out runs/synthetic] [--seed 0]
"""

import argparse
import sys
import time
from pathlib import Path

from mmlens.cli import OK, main

STAGES = ["prep", "train", "expand", "partition", "render", "verify"]
ROOT = Path(__file__).resolve().parents[1]


def run(config, extra):
    for stage in STAGES:
        t0 = time.perf_counter()
        code = main([stage, "--config", str(config), *extra])
        print(f"[{stage} exit {code}, {time.perf_counter() - t0:.1f}s]", flush=True)
        if code != OK:
            return code
    return OK


if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", default=ROOT / "configs" / "synthetic.json")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    a = p.parse_args()
    extra = (["--out", a.out] if a.out else []) + (["--seed", str(a.seed)] if a.seed is not None else [])
    sys.exit(run(a.config, extra))
