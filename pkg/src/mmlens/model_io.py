"""Plain-text model files (format tag ``mmlens-model/1``).

Layout, one record per line::

    mmlens-model/1
    input_length 216
    embedding_index 9
    expansion_depth 2
    layers 13
    layer conv filters 8 in_channels 1 width 6 stride 2 relu 1
    kernels <filters*in_channels*width floats, row-major>
    bias <filters floats>
    layer maxpool size 2 stride 1
    layer affine out 5 in 144 relu 1
    weights <out*in floats, row-major>
    bias <out floats>
    ...
    end

Floats are written with ``repr`` so they round-trip exactly. Lines starting
with ``#`` and blank lines are ignored.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .network import AffineLayer, ConvLayer, DimensionError, MaxPoolLayer, ReluNetwork

MODEL_TAG = "mmlens-model/1"


class ModelFormatError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


def format_floats(values) -> str:
    return " ".join(repr(float(v)) for v in np.asarray(values, dtype=np.float64).ravel())


def dumps_model(net: ReluNetwork) -> str:
    out = [MODEL_TAG,
           f"input_length {net.input_length}",
           f"embedding_index {net.embedding_index}",
           f"expansion_depth {net.expansion_depth}",
           f"layers {len(net.layers)}"]
    for layer in net.layers:
        if isinstance(layer, ConvLayer):
            out.append(f"layer conv filters {layer.filters} in_channels {layer.in_channels} "
                       f"width {layer.width} stride {layer.stride} relu {int(layer.relu)}")
            out.append("kernels " + format_floats(layer.kernels))
            out.append("bias " + format_floats(layer.bias))
        elif isinstance(layer, MaxPoolLayer):
            out.append(f"layer maxpool size {layer.pool_size} stride {layer.stride}")
        else:
            out.append(f"layer affine out {layer.n_out} in {layer.n_in} relu {int(layer.relu)}")
            out.append("weights " + format_floats(layer.weights))
            out.append("bias " + format_floats(layer.bias))
    out.append("end")
    return "\n".join(out) + "\n"


def save_model(net: ReluNetwork, path) -> None:
    Path(path).write_text(dumps_model(net))


def load_model(path) -> ReluNetwork:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ModelFormatError(0, f"cannot read {path}: {e}") from e
    return loads_model(text)


class _Lines:
    def __init__(self, text: str):
        self.items = [(i + 1, ln.strip()) for i, ln in enumerate(text.splitlines())
                      if ln.strip() and not ln.lstrip().startswith("#")]
        self.pos = 0

    def next(self) -> tuple[int, list[str]]:
        if self.pos >= len(self.items):
            last = self.items[-1][0] if self.items else 0
            raise ModelFormatError(last, "unexpected end of file")
        n, ln = self.items[self.pos]
        self.pos += 1
        return n, ln.split()

    def keyed(self, key: str) -> tuple[int, list[str]]:
        n, parts = self.next()
        if parts[0] != key:
            raise ModelFormatError(n, f"expected field '{key}', found '{parts[0]}'")
        return n, parts[1:]


def _int(n, parts, key):
    if len(parts) != 1:
        raise ModelFormatError(n, f"field '{key}' takes one integer")
    try:
        return int(parts[0])
    except ValueError:
        raise ModelFormatError(n, f"field '{key}': not an integer: {parts[0]!r}") from None


def _attrs(n, parts, keys):
    if len(parts) != 2 * len(keys) or parts[0::2] != list(keys):
        raise ModelFormatError(n, f"expected attributes {' '.join(keys)}")
    out = {}
    for k, v in zip(parts[0::2], parts[1::2]):
        try:
            out[k] = int(v)
        except ValueError:
            raise ModelFormatError(n, f"attribute '{k}': not an integer: {v!r}") from None
    return out


def _floats(lines: _Lines, key: str, shape):
    n, parts = lines.keyed(key)
    expected = int(np.prod(shape))
    if len(parts) != expected:
        raise ModelFormatError(n, f"field '{key}': declared dims {shape} need {expected} values, found {len(parts)}")
    try:
        arr = np.array([float(p) for p in parts], dtype=np.float64)
    except ValueError as e:
        raise ModelFormatError(n, f"field '{key}': {e}") from None
    if not np.all(np.isfinite(arr)):
        raise ModelFormatError(n, f"field '{key}': non-finite value")
    return arr.reshape(shape)


def loads_model(text: str) -> ReluNetwork:
    lines = _Lines(text)
    n, parts = lines.next()
    if parts != [MODEL_TAG]:
        raise ModelFormatError(n, f"missing format tag {MODEL_TAG!r}")
    input_length = _int(*lines.keyed("input_length"), "input_length")
    embedding_index = _int(*lines.keyed("embedding_index"), "embedding_index")
    expansion_depth = _int(*lines.keyed("expansion_depth"), "expansion_depth")
    n_layers = _int(*lines.keyed("layers"), "layers")
    layers = []
    for _ in range(n_layers):
        n, parts = lines.keyed("layer")
        if not parts:
            raise ModelFormatError(n, "layer kind missing")
        kind, rest = parts[0], parts[1:]
        if kind == "conv":
            a = _attrs(n, rest, ("filters", "in_channels", "width", "stride", "relu"))
            k = _floats(lines, "kernels", (a["filters"], a["in_channels"], a["width"]))
            b = _floats(lines, "bias", (a["filters"],))
            layers.append(ConvLayer(k, b, a["stride"], bool(a["relu"])))
        elif kind == "maxpool":
            a = _attrs(n, rest, ("size", "stride"))
            layers.append(MaxPoolLayer(a["size"], a["stride"]))
        elif kind == "affine":
            a = _attrs(n, rest, ("out", "in", "relu"))
            w = _floats(lines, "weights", (a["out"], a["in"]))
            b = _floats(lines, "bias", (a["out"],))
            layers.append(AffineLayer(w, b, bool(a["relu"])))
        else:
            raise ModelFormatError(n, f"unknown layer kind {kind!r}")
    n, parts = lines.next()
    if parts != ["end"]:
        raise ModelFormatError(n, "expected 'end'")
    try:
        return ReluNetwork(layers, input_length, embedding_index, expansion_depth)
    except DimensionError as e:
        raise ModelFormatError(n, f"inconsistent layer dims: {e}") from None
