"""Adam training on sigmoid cross-entropy, and a finite-difference gradient check."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .network import ReluNetwork, backward, forward, forward_with_trace

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-5
    batch_size: int = 64
    epochs: int = 80
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    rng_seed: int = 0
    # "two_stage": pick a source recording uniformly, then one of its templates.
    # "uniform": plain shuffled pass over the templates.
    sampler: str = "two_stage"

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.sampler not in ("two_stage", "uniform"):
            raise ValueError(f"unknown sampler {self.sampler!r}")


def sigmoid_cross_entropy(logits, labels) -> np.ndarray:
    """Per-sample loss, stable for large |logit|."""
    logits = np.asarray(logits, dtype=np.float64)
    return np.maximum(logits, 0) - logits * labels + np.log1p(np.exp(-np.abs(logits)))


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x)))


class TwoStageSampler:
    """Uniform over groups (recordings), then uniform within the chosen group."""

    def __init__(self, groups, rng: np.random.Generator):
        groups = np.asarray(groups)
        self.keys, inverse = np.unique(groups, return_inverse=True)
        order = np.argsort(inverse, kind="stable")
        counts = np.bincount(inverse, minlength=len(self.keys))
        self._members = order
        self._starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        self._counts = counts
        self.rng = rng

    def draw(self, n: int) -> np.ndarray:
        g = self.rng.integers(0, len(self.keys), size=n)
        offset = (self.rng.random(n) * self._counts[g]).astype(np.int64)
        return self._members[self._starts[g] + offset]


@dataclass
class History:
    loss: list = field(default_factory=list)
    accuracy: list = field(default_factory=list)


def train(net: ReluNetwork, X, y, cfg: TrainConfig, groups=None, history: History | None = None) -> ReluNetwork:
    """Return a trained copy of ``net``; the input network is left untouched.

    ``groups`` holds the source-recording id of each template and is used by
    the two-stage sampler. Without it every template is its own group.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(X) == 0:
        raise ValueError("empty dataset")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    net = net.copy()
    params = net.parameters()
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    rng = np.random.default_rng(cfg.rng_seed)
    sampler = None
    if cfg.sampler == "two_stage":
        sampler = TwoStageSampler(np.arange(len(X)) if groups is None else groups, rng)
    n = len(X)
    step = 0
    for epoch in range(cfg.epochs):
        order = sampler.draw(n) if sampler is not None else rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb, yb = X[idx], y[idx]
            logits = forward(net, xb)
            loss = sigmoid_cross_entropy(logits, yb).mean()
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, step {step}")
            grads = backward(net, xb, (sigmoid(logits) - yb) / len(idx))
            step += 1
            lr_t = cfg.learning_rate * np.sqrt(1 - cfg.beta2 ** step) / (1 - cfg.beta1 ** step)
            for p, g, mi, vi in zip(params, grads, m, v):
                mi *= cfg.beta1
                mi += (1 - cfg.beta1) * g
                vi *= cfg.beta2
                vi += (1 - cfg.beta2) * g * g
                p -= lr_t * mi / (np.sqrt(vi) + cfg.eps)
            total += loss * len(idx)
        acc = accuracy(net, X, y)
        log.info("epoch %d loss %.5f acc %.4f", epoch + 1, total / n, acc)
        if history is not None:
            history.loss.append(total / n)
            history.accuracy.append(acc)
    return net


def accuracy(net: ReluNetwork, X, y) -> float:
    """Fraction of samples where ``N(x) > 0`` matches ``y == 1``."""
    pred = forward(net, np.asarray(X, dtype=np.float64)) > 0
    return float(np.mean(pred == (np.asarray(y) == 1)))


# ---------------------------------------------------------------------------


@dataclass
class GradientReport:
    max_rel_error: float
    n_checked: int
    n_skipped: int
    skipped: bool = False
    notice: str = ""

    def passed(self, tolerance: float) -> bool:
        return not self.skipped and self.max_rel_error < tolerance


def _kink_signature(net, x):
    out, tr = forward_with_trace(net, x)
    bits = tuple(p.tobytes() for p in tr.patterns if p is not None)
    pools = tuple(tr.pool_argmax[k].tobytes() for k in sorted(tr.pool_argmax))
    return bits + pools, tr, out


def gradient_check(net: ReluNetwork, x, tolerance: float = 1e-4, h: float = 1e-5) -> GradientReport:
    """Compare backprop gradients of N(x) with central differences over every weight.

    Relative error per weight is ``|a - n| / max(|a|, |n|, floor)`` where the
    floor is ``1e-6 * max(1, max|a|)``. Weights whose perturbation changes the
    ReLU or max-pool selection are skipped and counted.
    """
    x = np.asarray(x, dtype=np.float64)
    base, tr, _ = _kink_signature(net, x)
    for pre, bits in zip(tr.pre_activations[1:], tr.patterns[1:]):
        if bits is not None and np.any(pre == 0):
            return GradientReport(np.nan, 0, 0, skipped=True,
                                  notice="input lies on a ReLU boundary (zero pre-activation); skipped")
    analytic = backward(net, x[None, :], np.ones(1))
    net = net.copy()
    scale = max(1.0, max(float(np.abs(a).max()) for a in analytic if a.size))
    worst, checked, skipped = 0.0, 0, 0
    for p, a in zip(net.parameters(), analytic):
        flat, aflat = p.reshape(-1), a.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            sig_plus, _, f_plus = _kink_signature(net, x)
            flat[i] = old - h
            sig_minus, _, f_minus = _kink_signature(net, x)
            flat[i] = old
            if sig_plus != base or sig_minus != base:
                skipped += 1
                continue
            num = (f_plus - f_minus) / (2 * h)
            denom = max(abs(aflat[i]), abs(num), 1e-6 * scale)
            worst = max(worst, abs(aflat[i] - num) / denom)
            checked += 1
    return GradientReport(float(worst), checked, skipped)
