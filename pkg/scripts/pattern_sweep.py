"""Pattern counts per expanded level against learning rate and seed on the synthetic set.

    python scripts/pattern_sweep.py --lr 1e-5 3e-4 1e-3 --seeds 0 1 [--epochs 80]

Prints one CSV row per run: lr, seed, test accuracy, and the count for each level.
"""

import argparse
import csv
import sys

from mmlens.ecg import RICH_MIX, split_train_test, synth_generate
from mmlens.minmax import ExpansionConfig, build_minmax
from mmlens.network import default_architecture, embed
from mmlens.training import TrainConfig, accuracy, train

if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--lr", type=float, nargs="+", default=[1e-5, 3e-4, 1e-3])
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--epochs", type=int, default=80)
    p.add_argument("--n", type=int, default=2000)
    a = p.parse_args()
    out = csv.writer(sys.stdout, lineterminator="\n")
    out.writerow(["lr", "seed", "test_accuracy", "layer", "patterns"])
    for seed in a.seeds:
        tr, te = split_train_test(synth_generate(a.n, RICH_MIX, seed=seed), seed)
        for lr in a.lr:
            net = train(default_architecture(tr.X.shape[1], seed=seed), tr.X, tr.y,
                        TrainConfig(learning_rate=lr, epochs=a.epochs, rng_seed=seed), groups=tr.groups)
            expr = build_minmax(net, embed(net, tr.X), ExpansionConfig())
            acc = accuracy(net, te.X, te.y)
            for layer, P in sorted(expr.patterns.items()):
                out.writerow([lr, seed, f"{acc:.4f}", layer, len(P)])
            sys.stdout.flush()
