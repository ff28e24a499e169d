"""Plain-text expression files (format tag ``mmlens-expr/1``).

::

    mmlens-expr/1
    config {"grid_points_per_dim": 7, ...}
    input_index 10
    input_dim 5
    patterns 11 3 01100110 11100010 ...
    nodes 37
    min 2 -
    max 3 tau=1*0*
    leaf mu=*1*0 0.25 1.0 -2.0 3.5 0.0 0.0 | 1*0*:*1*0 | 0110:1001
    ...
    end

Nodes are written in preorder; internal nodes give their child count, leaves
give ``bias`` then the weights, followed by the FactorId path (``-`` when the
leaf has none).
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .minmax import AffineFunction, MinMaxExpr, Node
from .model_io import ModelFormatError, format_floats

EXPR_TAG = "mmlens-expr/1"


class ExprFormatError(ModelFormatError):
    pass


def _factor_str(factor) -> str:
    if not factor:
        return "-"
    return " | ".join(f"{t}:{m}" for t, m in factor)


def dumps_expr(expr: MinMaxExpr) -> str:
    out = [EXPR_TAG,
           "config " + json.dumps(expr.config, sort_keys=True),
           f"input_index {expr.input_index}",
           f"input_dim {expr.input_dim}"]
    for L in sorted(expr.patterns):
        P = np.asarray(expr.patterns[L], dtype=np.int8)
        bits = " ".join("".join(str(int(b)) for b in p) for p in P)
        out.append(f"patterns {L} {len(P)} {bits}".rstrip())
    body = []

    def walk(node: Node):
        if node.kind == "leaf":
            body.append(f"leaf {node.tag} {repr(float(node.fn.bias))} {format_floats(node.fn.weights)}"
                        f" | {_factor_str(node.factor)}")
        else:
            body.append(f"{node.kind} {len(node.children)} {node.tag}")
            for c in node.children:
                walk(c)

    walk(expr.root)
    out.append(f"nodes {len(body)}")
    out += body
    out.append("end")
    return "\n".join(out) + "\n"


def save_expr(expr: MinMaxExpr, path) -> None:
    Path(path).write_text(dumps_expr(expr))


def load_expr(path) -> MinMaxExpr:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ExprFormatError(0, f"cannot read {path}: {e}") from e
    return loads_expr(text)


def _parse_factor(n, text):
    text = text.strip()
    if text == "-":
        return None
    parts = []
    for piece in text.split("|"):
        bits = piece.strip().split(":")
        if len(bits) != 2:
            raise ExprFormatError(n, f"bad factor element {piece.strip()!r}")
        parts.append((bits[0], bits[1]))
    return tuple(parts)


def loads_expr(text: str) -> MinMaxExpr:
    lines = [(i + 1, ln.rstrip("\n")) for i, ln in enumerate(text.splitlines()) if ln.strip()]
    pos = 0

    def take():
        nonlocal pos
        if pos >= len(lines):
            raise ExprFormatError(lines[-1][0] if lines else 0, "unexpected end of file")
        item = lines[pos]
        pos += 1
        return item

    n, ln = take()
    if ln.strip() != EXPR_TAG:
        raise ExprFormatError(n, f"missing format tag {EXPR_TAG!r}")
    n, ln = take()
    if not ln.startswith("config "):
        raise ExprFormatError(n, "expected 'config'")
    try:
        config = json.loads(ln[len("config "):])
    except json.JSONDecodeError as e:
        raise ExprFormatError(n, f"config: {e}") from None
    header = {}
    for key in ("input_index", "input_dim"):
        n, ln = take()
        parts = ln.split()
        if len(parts) != 2 or parts[0] != key:
            raise ExprFormatError(n, f"expected '{key} <int>'")
        header[key] = int(parts[1])
    patterns = {}
    while True:
        n, ln = take()
        parts = ln.split()
        if parts[0] != "patterns":
            break
        L, count, bits = int(parts[1]), int(parts[2]), parts[3:]
        if len(bits) != count:
            raise ExprFormatError(n, f"patterns {L}: declared {count}, found {len(bits)}")
        patterns[L] = np.array([[int(c) for c in b] for b in bits], dtype=np.int8)
    if parts[0] != "nodes":
        raise ExprFormatError(n, "expected 'nodes'")
    n_nodes = int(parts[1])
    count = 0

    def parse():
        nonlocal count
        n, ln = take()
        count += 1
        parts = ln.split()
        kind = parts[0]
        if kind == "leaf":
            head, _, factor = ln.partition(" | ")
            fields = head.split()
            tag = fields[1]
            try:
                nums = [float(v) for v in fields[2:]]
            except ValueError as e:
                raise ExprFormatError(n, f"leaf coefficients: {e}") from None
            if len(nums) != header["input_dim"] + 1:
                raise ExprFormatError(n, f"leaf has {len(nums) - 1} weights, expected {header['input_dim']}")
            return Node("leaf", fn=AffineFunction(np.array(nums[1:]), nums[0]),
                        factor=_parse_factor(n, factor), tag=tag)
        if kind not in ("min", "max") or len(parts) != 3:
            raise ExprFormatError(n, f"bad node line {ln!r}")
        k = int(parts[1])
        if k < 1:
            raise ExprFormatError(n, "internal node without children")
        children = [parse() for _ in range(k)]
        return Node(kind, children, tag=parts[2])

    root = parse()
    if count != n_nodes:
        raise ExprFormatError(n, f"declared {n_nodes} nodes, parsed {count}")
    n, ln = take()
    if ln.strip() != "end":
        raise ExprFormatError(n, "expected 'end'")
    return MinMaxExpr(root, input_index=header["input_index"], input_dim=header["input_dim"],
                      patterns=patterns, config=config)
