"""Alpha-blended waveform overlays and the hierarchical concept figure, as plain SVG.

Every waveform is one ``<polyline>`` with a fixed, small stroke opacity, so
dense bundles of similar beats show up darker once a viewer composites them.
Output depends only on the inputs and ``rng_seed``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from xml.sax.saxutils import escape

import numpy as np

from .concepts import PartitionTree, path_str
from .minmax import AffineFunction

POSITIVE = "#1f4fd6"
NEGATIVE = "#d62728"


@dataclass
class OverlaySpec:
    sample_cap: int = 4000
    alpha: float = 0.008
    line_width: float = 0.6
    positive_color: str = POSITIVE
    negative_color: str = NEGATIVE
    rng_seed: int = 0
    sampling_rate: float = 300.0
    r_index: int = 75
    panel_width: int = 260
    panel_height: int = 170
    y_range: tuple = (-1.15, 1.15)

    def __post_init__(self):
        self.y_range = tuple(self.y_range)
        if not 0 < self.alpha < 0.01:
            raise ValueError("alpha must be in (0, 0.01)")
        if self.sample_cap <= 0:
            raise ValueError("sample_cap must be > 0")


def choose_samples(n: int, spec: OverlaySpec, salt: int = 0) -> np.ndarray:
    """Indices to draw: everything once when n <= cap, else ``cap`` draws with replacement."""
    if n <= spec.sample_cap:
        return np.arange(n)
    rng = np.random.default_rng([spec.rng_seed, salt])
    return rng.integers(0, n, size=spec.sample_cap)


def _fmt(v: float) -> str:
    s = f"{v:.1f}"
    return "0.0" if s == "-0.0" else s


class _Doc:
    def __init__(self, width, height):
        self.parts = [
            '<?xml version="1.0" encoding="UTF-8" standalone="no"?>',
            f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}">',
            f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        ]

    def add(self, s: str):
        self.parts.append(s)

    def text(self, x, y, s, size=11, anchor="middle", weight="normal"):
        self.add(f'<text x="{_fmt(x)}" y="{_fmt(y)}" font-family="sans-serif" font-size="{size}" '
                 f'text-anchor="{anchor}" font-weight="{weight}">{escape(s)}</text>')

    def line(self, x1, y1, x2, y2, stroke="black", width=1.0, dash=None):
        d = f' stroke-dasharray="{dash}"' if dash else ""
        self.add(f'<line x1="{_fmt(x1)}" y1="{_fmt(y1)}" x2="{_fmt(x2)}" y2="{_fmt(y2)}" '
                 f'stroke="{stroke}" stroke-width="{width}"{d}/>')

    def render(self) -> str:
        return "\n".join(self.parts + ["</svg>"]) + "\n"


def _panel(doc: _Doc, X, y, spec: OverlaySpec, x0, y0, title, meta: dict, salt=0) -> int:
    """Draw one overlay panel with its top-left corner at (x0, y0); returns polylines drawn."""
    w, h = spec.panel_width, spec.panel_height
    pad_l, pad_b, pad_t = 30, 22, 18
    pw, ph = w - pad_l - 6, h - pad_b - pad_t
    px0, py0 = x0 + pad_l, y0 + pad_t
    n = len(X)
    idx = choose_samples(n, spec, salt)
    comment = " ".join(f"{k}={v}" for k, v in meta.items())
    doc.add(f"<!-- panel {comment} drawn={len(idx)} -->")
    doc.add(f'<g id="panel{meta.get("path", "").replace("/", "_")}">')
    doc.text(x0 + w / 2, y0 + 12, title, size=10)
    doc.add(f'<rect x="{_fmt(px0)}" y="{_fmt(py0)}" width="{_fmt(pw)}" height="{_fmt(ph)}" '
            f'fill="none" stroke="#888" stroke-width="0.5"/>')
    if n == 0:
        doc.text(px0 + pw / 2, py0 + ph / 2, "n = 0", size=10)
        doc.add("</g>")
        return 0
    length = X.shape[1]
    t = (np.arange(length) - spec.r_index) / spec.sampling_rate
    tmin, tmax = t[0], t[-1]
    lo, hi = spec.y_range
    xs = px0 + (t - tmin) / (tmax - tmin) * pw
    # time zero (R peak) and amplitude zero
    x_zero = px0 + (0 - tmin) / (tmax - tmin) * pw
    y_zero = py0 + (hi - 0) / (hi - lo) * ph
    doc.line(x_zero, py0, x_zero, py0 + ph, stroke="#bbb", width=0.5, dash="2,2")
    doc.line(px0, y_zero, px0 + pw, y_zero, stroke="#bbb", width=0.5, dash="2,2")
    for tick in (-0.2, 0.0, 0.2, 0.4):
        if tmin <= tick <= tmax:
            tx = px0 + (tick - tmin) / (tmax - tmin) * pw
            doc.text(tx, py0 + ph + 12, f"{tick:.1f}", size=8)
    for amp in (-1, 0, 1):
        doc.text(px0 - 4, py0 + (hi - amp) / (hi - lo) * ph + 3, str(amp), size=8, anchor="end")
    xs_s = [_fmt(v) for v in xs]
    for i in idx:
        ys = py0 + (hi - np.clip(X[i], lo, hi)) / (hi - lo) * ph
        color = spec.positive_color if y[i] == 1 else spec.negative_color
        pts = " ".join(f"{a},{_fmt(b)}" for a, b in zip(xs_s, ys))
        doc.add(f'<polyline fill="none" stroke="{color}" stroke-opacity="{spec.alpha}" '
                f'stroke-width="{spec.line_width}" points="{pts}"/>')
    doc.add("</g>")
    return len(idx)


def render_overlay(X, y, spec: OverlaySpec | None = None, title: str | None = None, meta=None) -> str:
    """Single-panel composite of aligned, peak-normalized templates colored by label."""
    spec = spec or OverlaySpec()
    X = np.asarray(X, dtype=np.float64).reshape(len(X), -1) if len(X) else np.zeros((0, 0))
    y = np.asarray(y)
    doc = _Doc(spec.panel_width, spec.panel_height)
    n = len(X)
    pos = float(np.mean(y == 1)) if n else 0.0
    meta = dict(meta or {})
    meta.setdefault("members", n)
    _panel(doc, X, y, spec, 0, 0, title or f"n={n}  positive={pos:.2f}", meta)
    return doc.render()


# ---------------------------------------------------------------------------
# hierarchy


@dataclass
class Panel:
    path: tuple
    members: np.ndarray  # row indices into the template matrix
    parent_kind: str = ""  # "min"/"max" of the parent node; "" for the root
    kind: str = ""
    positive_fraction: float = 0.0  # share of members with N(x) > 0


@dataclass
class FigureLayout:
    rows: list = field(default_factory=list)  # rows[k] = panels at depth k, preorder

    @classmethod
    def from_tree(cls, tree: PartitionTree, max_depth: int | None = None) -> "FigureLayout":
        depth = tree.depth if max_depth is None else min(max_depth, tree.depth)
        rows = [[] for _ in range(depth + 1)]

        def visit(node, parent_kind):
            if node.pruned or len(node.members) == 0 or node.depth > depth:
                return
            pos = float(np.mean(tree.outputs[node.members] > 0))
            rows[node.depth].append(Panel(node.path, node.members, parent_kind, node.kind, pos))
            for c in node.children:
                visit(c, node.kind)

        visit(tree.root, "")
        return cls([r for r in rows if r])

    @classmethod
    def from_tables(cls, partition_rows, stats_rows, sample_index: dict, max_depth=None) -> "FigureLayout":
        """Rebuild from the partition/stats CSV rows; ``sample_index`` maps sample id to row index."""
        kinds = {r["node_path"]: r["kind"] for r in stats_rows}
        pruned = {r["node_path"] for r in stats_rows if str(r.get("pruned", "0")) == "1"}
        order = [r["node_path"] for r in stats_rows]
        members: dict = {}
        positives: dict = {}
        for r in partition_rows:
            members.setdefault(r["node_path"], []).append(sample_index[r["sample_id"]])
            positives.setdefault(r["node_path"], []).append(r["model_output"] > 0)
        rows: dict = {}
        for p in order:
            if p in pruned or p not in members:
                continue
            path = tuple(int(i) for i in p.strip("/").split("/")) if p != "/" else ()
            if max_depth is not None and len(path) > max_depth:
                continue
            parent = path_str(path[:-1]) if path else None
            rows.setdefault(len(path), []).append(
                Panel(path, np.array(members[p]), kinds.get(parent, "") if parent else "",
                      kinds[p], float(np.mean(positives[p]))))
        return cls([rows[k] for k in sorted(rows)])

    def row_members(self, k: int) -> np.ndarray:
        return np.sort(np.concatenate([p.members for p in self.rows[k]]))

    def check_conservation(self) -> None:
        root = self.row_members(0)
        for k in range(1, len(self.rows)):
            if not np.array_equal(self.row_members(k), root):
                raise AssertionError(f"row {k} does not hold every sample exactly once")


def _panel_title(p: Panel, y) -> str:
    name = path_str(p.path)
    n = len(p.members)
    return f"{name}  n={n}  N>0: {p.positive_fraction:.2f}"


def render_hierarchy(layout: FigureLayout | PartitionTree, X, y, spec: OverlaySpec | None = None,
                     max_depth: int | None = None) -> str:
    """Rows of concept panels, one row per tree level, with Min/Max brackets between rows."""
    spec = spec or OverlaySpec()
    if isinstance(layout, PartitionTree):
        layout = FigureLayout.from_tree(layout, max_depth)
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    gap_x, gap_y, margin = 14, 46, 20
    pw, ph = spec.panel_width, spec.panel_height
    ncols = max(len(r) for r in layout.rows)
    width = margin * 2 + ncols * pw + (ncols - 1) * gap_x
    height = margin * 2 + len(layout.rows) * ph + (len(layout.rows) - 1) * gap_y
    doc = _Doc(width, height)
    doc.add(f"<!-- hierarchy rows={len(layout.rows)} panels={sum(len(r) for r in layout.rows)} -->")
    where: dict = {}
    for k, row in enumerate(layout.rows):
        row_w = len(row) * pw + (len(row) - 1) * gap_x
        x = (width - row_w) / 2
        y0 = margin + k * (ph + gap_y)
        for j, p in enumerate(row):
            meta = {"path": path_str(p.path), "members": len(p.members), "kind": p.kind,
                    "positive_fraction": f"{p.positive_fraction:.6f}"}
            _panel(doc, X[p.members], y[p.members], spec, x, y0, _panel_title(p, y), meta,
                   salt=k * 1_000_003 + j)
            where[p.path] = (x, y0)
            x += pw + gap_x
    # brackets: one per parent, spanning its visible children
    for k in range(1, len(layout.rows)):
        groups: dict = {}
        for p in layout.rows[k]:
            groups.setdefault(p.path[:-1], []).append(p)
        for parent, kids in groups.items():
            if parent not in where:
                continue
            xs = [where[c.path][0] for c in kids]
            top = where[kids[0].path][1] - 8
            left, right = min(xs) + 6, max(xs) + pw - 6
            px, py = where[parent]
            doc.line(px + pw / 2, py + ph, px + pw / 2, top - 12, stroke="#444", width=0.8)
            doc.line(left, top, right, top, stroke="#444", width=0.8)
            doc.line(left, top, left, top + 5, stroke="#444", width=0.8)
            doc.line(right, top, right, top + 5, stroke="#444", width=0.8)
            label = kids[0].parent_kind.capitalize() or "?"
            doc.text((left + right) / 2, top - 3, label, size=11, weight="bold")
    return doc.render()


def render_factor_heat(fn: AffineFunction, spec: OverlaySpec | None = None, title: str = "") -> str:
    """Bar chart of a factor's coefficients over the leaf inputs, plus its bias."""
    spec = spec or OverlaySpec()
    vals = list(np.asarray(fn.weights, dtype=np.float64)) + [float(fn.bias)]
    names = [f"z{i + 1}" for i in range(len(vals) - 1)] + ["b"]
    bar_w, gap, margin, h = 28, 10, 30, 180
    width = margin * 2 + len(vals) * (bar_w + gap)
    doc = _Doc(width, h + 2 * margin)
    doc.add("<!-- factor " + " ".join(f"{n}={repr(float(v))}" for n, v in zip(names, vals)) + " -->")
    if title:
        doc.text(width / 2, 16, title, size=11)
    scale = max(1e-12, max(abs(v) for v in vals))
    mid = margin + h / 2
    doc.line(margin - 4, mid, width - margin + 4, mid, stroke="#888", width=0.6)
    for i, (n, v) in enumerate(zip(names, vals)):
        x = margin + i * (bar_w + gap)
        bh = abs(v) / scale * (h / 2 - 4)
        top = mid - bh if v > 0 else mid
        color = spec.positive_color if v > 0 else spec.negative_color
        doc.add(f'<rect class="bar" x="{_fmt(x)}" y="{_fmt(top)}" width="{bar_w}" height="{_fmt(bh)}" '
                f'fill="{color}" data-value="{repr(float(v))}"/>')
        doc.text(x + bar_w / 2, margin + h + 14, n, size=10)
    return doc.render()
