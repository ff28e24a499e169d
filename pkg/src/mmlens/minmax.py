"""Exact Min/Max factorization of the fully-connected tail of a ReLU network.

Write the output of a hidden ReLU layer as ``R(h)`` with ``h`` its
pre-activation. For a row ``W`` acting on ``R(h)``, split ``W = W+ - W-``
into nonnegative parts. Then ``W+ R(h) = max_mu W+ diag(mu) h`` and
``W- R(h) = max_tau W- diag(tau) h`` over 0/1 masks, so

    b + W R(h) = min_tau max_mu  b + (W+ diag(mu) - W- diag(tau)) h

and each term is again ``b' + W' R(h_prev)`` one layer down. Repeating this
``depth`` times gives a Min/Max tree whose leaves are affine in the
activation feeding the innermost expanded layer. Restricting the masks to a
finite set of discovered patterns keeps the tree exact at every input whose
own (greedy) patterns are in the set.
"""

from __future__ import annotations

import itertools
import logging
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .network import ReluNetwork, activation, forward, forward_tail, run_layers, tail_trace

log = logging.getLogger(__name__)


class ExpansionError(RuntimeError):
    pass


@dataclass
class ExpansionConfig:
    grid_points_per_dim: int = 7
    bound_percentiles: tuple = (1.0, 99.0)
    include_training_embeddings: bool = True
    equality_tolerance: float = 1e-9
    expansion_depth: int = 2
    lead: str = "min"
    # collapse children that differ only on bits whose outgoing weight has the other sign
    dedupe: bool = True
    # use all 2**width patterns instead of discovering them
    full_enumeration: bool = False

    def __post_init__(self):
        self.bound_percentiles = tuple(float(p) for p in self.bound_percentiles)
        low, high = self.bound_percentiles
        if self.grid_points_per_dim < 2:
            raise ValueError("grid_points_per_dim must be >= 2")
        if not 0 <= low < high <= 100:
            raise ValueError("need 0 <= low < high <= 100 for bound_percentiles")
        if self.lead not in ("min", "max"):
            raise ValueError("lead must be 'min' or 'max'")
        if self.expansion_depth < 1:
            raise ValueError("expansion_depth must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bound_percentiles"] = list(self.bound_percentiles)
        return d


@dataclass
class AffineFunction:
    weights: np.ndarray
    bias: float

    def __call__(self, z):
        return np.asarray(z, dtype=np.float64) @ self.weights + self.bias


# One (tau, mu) pair of bit strings per expanded layer, outermost first.
# '*' marks bits that cannot affect the factor.
FactorId = tuple


@dataclass
class Node:
    kind: str  # "min", "max" or "leaf"
    children: list = field(default_factory=list)
    fn: AffineFunction | None = None
    factor: FactorId | None = None
    tag: str = "-"

    def __post_init__(self):
        if self.kind not in ("min", "max", "leaf"):
            raise ValueError(f"bad node kind {self.kind!r}")
        if self.kind == "leaf" and self.fn is None:
            raise ValueError("leaf needs an affine function")
        if self.kind != "leaf" and not self.children:
            raise ValueError(f"{self.kind} node needs at least one child")

    def leaves(self):
        if self.kind == "leaf":
            yield self
        else:
            for c in self.children:
                yield from c.leaves()

    def depth(self) -> int:
        return 0 if self.kind == "leaf" else 1 + max(c.depth() for c in self.children)

    def n_nodes(self) -> int:
        return 1 + sum(c.n_nodes() for c in self.children)


def leaf(weights, bias, factor=None, tag="-") -> Node:
    return Node("leaf", fn=AffineFunction(np.asarray(weights, dtype=np.float64), float(bias)),
                factor=factor, tag=tag)


@dataclass
class MinMaxExpr:
    """A Min/Max tree plus the bookkeeping needed to evaluate it against a network.

    ``input_index`` is the activation index the leaves read (the embedding when
    every hidden tail layer is expanded). ``patterns`` maps layer index to the
    0/1 pattern array used at that level.
    """

    root: Node
    input_index: int = 0
    input_dim: int = 0
    patterns: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        self._compiled = None
        if not self.input_dim:
            first = next(self.root.leaves(), None)
            self.input_dim = 0 if first is None else len(first.fn.weights)

    @property
    def compiled(self) -> "_Compiled":
        if self._compiled is None:
            self._compiled = _Compiled(self.root)
        return self._compiled

    @property
    def n_leaves(self) -> int:
        return self.compiled.W.shape[0]

    def invalidate(self) -> None:
        self._compiled = None


# ---------------------------------------------------------------------------
# expansion


def split_signs(W) -> tuple[np.ndarray, np.ndarray]:
    W = np.asarray(W, dtype=np.float64)
    return np.maximum(W, 0.0), np.maximum(-W, 0.0)


def _bits(p) -> str:
    return "".join(str(int(b)) for b in p)


def _masked(p, support) -> str:
    return "".join(str(int(b)) if s else "*" for b, s in zip(p, support))


def _select(patterns, support, dedupe):
    """Representative patterns and their tags, one per distinct restriction to ``support``."""
    if not dedupe:
        return [(p, _bits(p)) for p in patterns]
    seen, out = set(), []
    for p in patterns:
        tag = _masked(p, support)
        if tag not in seen:
            seen.add(tag)
            out.append((p, tag))
    return out


def expand_layer(bias: float, W, inner_weights, inner_bias, patterns, lead="min", dedupe=True,
                 make_child=None, level_tag=""):
    """One level of ``b + W R(A a + c)``.

    ``inner_weights``/``inner_bias`` are ``A``/``c``: the pre-activation of the
    layer being expanded as an affine map of its input ``a``. Each term
    ``b + v c + (v A) a`` with ``v = W+ mu - W- tau`` is handed to
    ``make_child(bias, row, factor_part)``; by default it becomes a leaf, which
    yields the full one-layer expansion over ``a``.
    """
    W = np.asarray(W, dtype=np.float64).ravel()
    A = np.asarray(inner_weights, dtype=np.float64)
    c = np.asarray(inner_bias, dtype=np.float64)
    patterns = np.atleast_2d(np.asarray(patterns))
    if patterns.size == 0 or len(patterns) == 0:
        raise ExpansionError("empty pattern set")
    if patterns.shape[1] != len(W) or A.shape[0] != len(W):
        raise ExpansionError(f"pattern width {patterns.shape[1]} does not match layer width {len(W)}")
    Wp, Wm = split_signs(W)
    taus = _select(patterns, Wm > 0, dedupe)
    mus = _select(patterns, Wp > 0, dedupe)
    if make_child is None:
        make_child = lambda b, row, fid: leaf(row, b, factor=(fid,))

    def term(tau, mu):
        v = Wp * mu - Wm * tau
        return bias + float(v @ c), v @ A

    outer, inner = (taus, mus) if lead == "min" else (mus, taus)
    outer_kind, inner_kind = ("min", "max") if lead == "min" else ("max", "min")
    children = []
    for po, to in outer:
        sub = []
        for pi, ti in inner:
            tau, mu, ttag, mtag = (po, pi, to, ti) if lead == "min" else (pi, po, ti, to)
            b, row = term(tau, mu)
            child = make_child(b, row, (ttag, mtag))
            child.tag = f"mu={mtag}" if lead == "min" else f"tau={ttag}"
            sub.append(child)
        node = Node(inner_kind, sub, tag=f"tau={to}" if lead == "min" else f"mu={to}")
        children.append(node)
    return Node(outer_kind, children, tag=level_tag or "-")


def expanded_layers(net: ReluNetwork, depth: int) -> list[int]:
    """Layer indices of the hidden layers being expanded, outermost first."""
    last = len(net.layers) - 1
    hidden = list(range(last - 1, net.embedding_index - 1, -1))
    if depth > len(hidden):
        raise ExpansionError(f"expansion_depth {depth} exceeds {len(hidden)} hidden tail layers")
    return hidden[:depth]


def build_minmax(net: ReluNetwork, embeddings=None, cfg: ExpansionConfig | None = None,
                 patterns: dict | None = None) -> MinMaxExpr:
    """Expand the terminal layers of ``net`` into a MinMaxExpr.

    ``embeddings`` are embedding-layer activations used to discover patterns
    (ignored when ``patterns`` is given or ``cfg.full_enumeration`` is set).
    """
    cfg = cfg or ExpansionConfig()
    layers_idx = expanded_layers(net, cfg.expansion_depth)
    if patterns is None:
        if cfg.full_enumeration:
            patterns = {L: all_patterns(net.layers[L].n_out) for L in layers_idx}
        else:
            if embeddings is None:
                raise ExpansionError("embeddings are required for pattern discovery")
            patterns = discover_all(net, embeddings, cfg, layers_idx)
    for L in layers_idx:
        P = np.asarray(patterns.get(L, np.zeros((0, 0))))
        if P.ndim != 2 or len(P) == 0:
            raise ExpansionError(f"empty pattern set at level {layers_idx.index(L)} (layer {L})")
        if P.shape[1] != net.layers[L].n_out:
            raise ExpansionError(f"layer {L}: pattern width {P.shape[1]} != {net.layers[L].n_out}")
    input_index = layers_idx[-1]
    terminal = net.layers[-1]

    def expand(level, b, row, prefix):
        L = layers_idx[level]
        layer = net.layers[L]
        last = level == len(layers_idx) - 1

        def child(b2, row2, fid):
            path = prefix + (fid,)
            if last:
                return leaf(row2, b2, factor=path)
            return expand(level + 1, b2, row2, path)

        return expand_layer(b, row, layer.weights, layer.bias, patterns[L], cfg.lead, cfg.dedupe,
                            make_child=child)

    root = expand(0, float(terminal.bias[0]), terminal.weights[0], ())
    return MinMaxExpr(root, input_index=input_index, input_dim=net.layers[input_index].n_in,
                      patterns={L: np.asarray(patterns[L], dtype=np.int8) for L in layers_idx},
                      config=cfg.to_dict())


def all_patterns(width: int) -> np.ndarray:
    return np.array(list(itertools.product((0, 1), repeat=width)), dtype=np.int8)


# ---------------------------------------------------------------------------
# pattern discovery


def grid_bounds(embeddings, cfg: ExpansionConfig) -> tuple[np.ndarray, np.ndarray]:
    E = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    if len(E) == 0:
        raise ExpansionError("no training embeddings")
    low, high = cfg.bound_percentiles
    lo = np.percentile(E, low, axis=0)
    hi = np.percentile(E, high, axis=0)
    flat = hi <= lo
    if np.any(flat):
        eps = 1e-6 * np.maximum(1.0, np.abs(lo[flat]))
        warnings.warn(f"degenerate percentile range in dims {np.flatnonzero(flat).tolist()}; widened by +-eps")
        lo[flat] -= eps
        hi[flat] += eps
    return lo, hi


def grid_points(lo, hi, n: int) -> np.ndarray:
    axes = [np.linspace(a, b, n) for a, b in zip(lo, hi)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def discover_patterns(net: ReluNetwork, layer_index: int, training_embeddings,
                      cfg: ExpansionConfig | None = None) -> np.ndarray:
    """Sorted unique activation patterns of ``layer_index`` over the probe grid (+ data)."""
    return discover_all(net, training_embeddings, cfg or ExpansionConfig(), [layer_index])[layer_index]


def discover_all(net, training_embeddings, cfg, layer_indices) -> dict:
    E = np.atleast_2d(np.asarray(training_embeddings, dtype=np.float64))
    lo, hi = grid_bounds(E, cfg)
    probes = grid_points(lo, hi, cfg.grid_points_per_dim)
    if cfg.include_training_embeddings:
        probes = np.concatenate([probes, E])
    found = {L: [] for L in layer_indices}
    for start in range(0, len(probes), 8192):
        traces = tail_trace(net, probes[start:start + 8192])
        for L in layer_indices:
            found[L].append(traces[L])
    out = {}
    for L in layer_indices:
        out[L] = np.unique(np.concatenate(found[L]), axis=0).astype(np.int8)
        log.info("layer %d: %d patterns", L, len(out[L]))
    return out


# ---------------------------------------------------------------------------
# evaluation


class _Compiled:
    """Leaves stacked into one matrix; internal nodes as nested index lists."""

    def __init__(self, root: Node):
        self.leaf_nodes: list[Node] = []
        self.leaf_paths: list[tuple] = []
        ws, bs = [], []

        def walk(node, path):
            if node.kind == "leaf":
                idx = len(self.leaf_nodes)
                self.leaf_nodes.append(node)
                self.leaf_paths.append(path)
                ws.append(node.fn.weights)
                bs.append(node.fn.bias)
                return idx
            return (node.kind, [walk(c, path + (i,)) for i, c in enumerate(node.children)])

        self.plan = walk(root, ())
        if not ws:
            raise ExpansionError("expression has no leaves")
        dims = {len(w) for w in ws}
        if len(dims) != 1:
            raise ExpansionError("leaves disagree on input dimension")
        self.W = np.array(ws, dtype=np.float64)
        self.b = np.array(bs, dtype=np.float64)

    def evaluate(self, Z: np.ndarray):
        V = Z @ self.W.T + self.b

        def go(plan):
            if isinstance(plan, int):
                return V[:, plan], np.full(len(Z), plan)
            kind, kids = plan
            vals, idxs = zip(*(go(k) for k in kids))
            vals = np.stack(vals, axis=1)
            pick = np.argmin(vals, axis=1) if kind == "min" else np.argmax(vals, axis=1)
            rows = np.arange(len(Z))
            return vals[rows, pick], np.stack(idxs, axis=1)[rows, pick]

        return go(self.plan)


def eval_batch(expr: MinMaxExpr, Z, chunk: int = 2048) -> tuple[np.ndarray, np.ndarray]:
    """Values and selected leaf indices for a batch of leaf inputs ``Z``.

    Ties go to the lowest-index child at every node.
    """
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    comp = expr.compiled
    if Z.shape[1] != comp.W.shape[1]:
        raise ValueError(f"input dim {Z.shape[1]} != leaf dim {comp.W.shape[1]}")
    vals, idx = [], []
    for s in range(0, len(Z), chunk):
        v, i = comp.evaluate(Z[s:s + chunk])
        vals.append(v)
        idx.append(i)
    if not vals:
        return np.zeros(0), np.zeros(0, dtype=np.int64)
    return np.concatenate(vals), np.concatenate(idx)


def eval_minmax(expr: MinMaxExpr | Node, z0) -> tuple[float, FactorId]:
    """Psi(z0) and the FactorId of the leaf that realizes it."""
    if isinstance(expr, Node):
        expr = MinMaxExpr(expr)
    v, i = eval_batch(expr, np.asarray(z0, dtype=np.float64)[None, :])
    return float(v[0]), expr.compiled.leaf_nodes[int(i[0])].factor


def leaf_path(expr: MinMaxExpr, leaf_index: int) -> tuple:
    """Child-index path from the root to a leaf."""
    return expr.compiled.leaf_paths[leaf_index]


def expr_inputs(net: ReluNetwork, expr: MinMaxExpr, X) -> np.ndarray:
    """Activation the leaves read, for raw network inputs ``X``."""
    return activation(net, X, expr.input_index)


# ---------------------------------------------------------------------------
# verification


@dataclass
class EquivalenceReport:
    n_checked: int
    n_exact: int
    max_abs_gap: float
    uncovered_inputs: list = field(default_factory=list)
    inexact_inputs: list = field(default_factory=list)

    @property
    def coverage(self) -> float:
        return self.n_exact / self.n_checked if self.n_checked else 0.0

    def summary(self) -> str:
        return (f"checked {self.n_checked}, exact {self.n_exact} ({100 * self.coverage:.2f}%), "
                f"max |gap| {self.max_abs_gap:.3e}, uncovered {len(self.uncovered_inputs)}")


def uncovered_mask(net: ReluNetwork, expr: MinMaxExpr, Z, start: int) -> np.ndarray:
    """True where some expanded layer's realized pattern is missing from the expression's set."""
    traces = tail_trace(net, Z, start=start)
    miss = np.zeros(len(Z), dtype=bool)
    for L, P in expr.patterns.items():
        known = {p.tobytes() for p in np.asarray(P, dtype=np.int8)}
        miss |= np.array([p.astype(np.int8).tobytes() not in known for p in traces[L]])
    return miss


def verify_equivalence(net: ReluNetwork, expr: MinMaxExpr, inputs, space: str = "input",
                       tolerance: float | None = None, ids=None) -> EquivalenceReport:
    """Compare Psi against the network on raw inputs or on embedding-layer activations.

    Exact means ``|Psi - N| <= tol * (1 + |N|)``.
    """
    if tolerance is None:
        tolerance = expr.config.get("equality_tolerance", 1e-9)
    X = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    if len(X) == 0:
        raise ValueError("no inputs to verify")
    if space == "input":
        N = forward(net, X)
        E = activation(net, X, net.embedding_index)
    elif space == "embedding":
        E = X
        N = forward_tail(net, E)
    else:
        raise ValueError(f"unknown space {space!r}")
    Z = run_layers(net, E, net.embedding_index, expr.input_index)
    psi, _ = eval_batch(expr, Z)
    gap = np.abs(psi - N)
    exact = gap <= tolerance * (1 + np.abs(N))
    miss = uncovered_mask(net, expr, E, net.embedding_index)
    ids = np.arange(len(X)) if ids is None else np.asarray(ids)
    return EquivalenceReport(
        n_checked=len(X), n_exact=int(exact.sum()), max_abs_gap=float(gap.max()),
        uncovered_inputs=ids[miss].tolist(), inexact_inputs=ids[~exact].tolist())
