"""Small conv + fully-connected ReLU network in plain numpy.

The network is a flat list of layers. Activations are indexed by the number
of layers already applied: activation 0 is the input, activation ``k`` is the
output of ``layers[k - 1]``. ``embedding_index`` uses that convention, so the
embedding is ``layers[:embedding_index]`` applied to the input and the tail is
``layers[embedding_index:]``.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Union

import numpy as np


class DimensionError(ValueError):
    """Input or weight shapes do not line up with the network."""


@dataclass
class ConvLayer:
    kernels: np.ndarray  # (filters, in_channels, width)
    bias: np.ndarray  # (filters,)
    stride: int = 2
    relu: bool = True

    @property
    def filters(self) -> int:
        return self.kernels.shape[0]

    @property
    def in_channels(self) -> int:
        return self.kernels.shape[1]

    @property
    def width(self) -> int:
        return self.kernels.shape[2]

    def out_length(self, length: int) -> int:
        return (length - self.width) // self.stride + 1


@dataclass
class MaxPoolLayer:
    pool_size: int = 2
    stride: int = 1

    def out_length(self, length: int) -> int:
        return (length - self.pool_size) // self.stride + 1


@dataclass
class AffineLayer:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    relu: bool = True

    @property
    def n_out(self) -> int:
        return self.weights.shape[0]

    @property
    def n_in(self) -> int:
        return self.weights.shape[1]


Layer = Union[ConvLayer, MaxPoolLayer, AffineLayer]


@dataclass
class ReluNetwork:
    layers: list
    input_length: int
    embedding_index: int = 0
    expansion_depth: int = 2

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.layers:
            raise DimensionError("network has no layers")
        if not 0 <= self.embedding_index < len(self.layers):
            raise DimensionError(f"embedding_index {self.embedding_index} out of range")
        shape = (1, self.input_length)  # (channels, length) or (features,)
        for i, layer in enumerate(self.layers):
            shape = _out_shape(layer, shape, i)
        last = self.layers[-1]
        if not isinstance(last, AffineLayer) or last.relu or last.n_out != 1:
            raise DimensionError("terminal layer must be a single-output affine layer without ReLU")
        for i, layer in enumerate(self.layers[self.embedding_index:], self.embedding_index):
            if not isinstance(layer, AffineLayer):
                raise DimensionError(f"layer {i} after the embedding is not affine")
        n_hidden = len(self.tail_layers) - 1
        if not 0 <= self.expansion_depth <= n_hidden:
            raise DimensionError(
                f"expansion_depth {self.expansion_depth} exceeds {n_hidden} hidden tail layers")

    @property
    def tail_layers(self) -> list:
        return self.layers[self.embedding_index:]

    @property
    def embedding_dim(self) -> int:
        return self.layers[self.embedding_index].n_in

    def copy(self) -> "ReluNetwork":
        return copy.deepcopy(self)

    def parameters(self) -> list[np.ndarray]:
        """Weight arrays in layer order (views, not copies)."""
        params = []
        for layer in self.layers:
            if isinstance(layer, ConvLayer):
                params += [layer.kernels, layer.bias]
            elif isinstance(layer, AffineLayer):
                params += [layer.weights, layer.bias]
        return params


def _out_shape(layer, shape, i):
    if isinstance(layer, AffineLayer):
        n_in = int(np.prod(shape))
        if layer.n_in != n_in or layer.bias.shape != (layer.n_out,):
            raise DimensionError(f"layer {i}: affine expects {layer.n_in} inputs, gets {n_in}")
        return (layer.n_out,)
    if len(shape) != 2:
        raise DimensionError(f"layer {i}: conv/pool after a flattened layer")
    channels, length = shape
    if isinstance(layer, ConvLayer):
        if layer.in_channels != channels or layer.bias.shape != (layer.filters,):
            raise DimensionError(f"layer {i}: conv expects {layer.in_channels} channels, gets {channels}")
        out = layer.out_length(length)
        if out < 1:
            raise DimensionError(f"layer {i}: conv kernel wider than input")
        return (layer.filters, out)
    out = layer.out_length(length)
    if out < 1:
        raise DimensionError(f"layer {i}: pool wider than input")
    return (channels, out)


# ---------------------------------------------------------------------------
# construction


def default_architecture(input_length: int = 216, seed: int = 0,
                         conv_filters=(8, 16, 16, 16), kernel_widths=(6, 6, 4, 4),
                         fc_widths=(5, 8, 8), expansion_depth: int = 2) -> ReluNetwork:
    """Conv/max-pool stack followed by the FC tail; the first FC layer is the embedding."""
    rng = np.random.default_rng(seed)
    layers: list = []
    channels, length = 1, input_length
    for filters, width in zip(conv_filters, kernel_widths):
        conv = ConvLayer(_he_uniform(rng, (filters, channels, width), channels * width),
                         np.zeros(filters), stride=2, relu=True)
        layers.append(conv)
        length = conv.out_length(length)
        layers.append(MaxPoolLayer(2, 1))
        length = layers[-1].out_length(length)
        channels = filters
    n_in = channels * length
    for width in fc_widths:
        layers.append(AffineLayer(_he_uniform(rng, (width, n_in), n_in), np.zeros(width), relu=True))
        n_in = width
    layers.append(AffineLayer(_he_uniform(rng, (1, n_in), n_in), np.zeros(1), relu=False))
    # embedding = output of the first FC layer
    embedding_index = 2 * len(conv_filters) + 1
    return ReluNetwork(layers, input_length, embedding_index, expansion_depth)


def mlp(widths, seed: int = 0, embedding_index: int = 0, expansion_depth: int | None = None) -> ReluNetwork:
    """Fully-connected net with ``widths = [n_in, h1, ..., 1]``."""
    rng = np.random.default_rng(seed)
    layers = []
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        last = i == len(widths) - 2
        layers.append(AffineLayer(_he_uniform(rng, (b, a), a), np.zeros(b), relu=not last))
    if expansion_depth is None:
        expansion_depth = len(layers) - 1 - embedding_index
    return ReluNetwork(layers, widths[0], embedding_index, expansion_depth)


def _he_uniform(rng, shape, fan_in):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


# ---------------------------------------------------------------------------
# forward pass


@dataclass
class ActivationTrace:
    """Post-activations and on/off patterns for one forward pass.

    Everything is keyed by activation index: ``activations[0]`` is the input
    and ``patterns[k]`` holds the ReLU bits of ``layers[k - 1]`` (None when
    that layer has no ReLU). ``pool_argmax[k]`` stores the selected window
    offsets when ``layers[k - 1]`` is a max-pool.
    """

    activations: list = field(default_factory=list)
    pre_activations: list = field(default_factory=list)
    patterns: list = field(default_factory=list)
    pool_argmax: dict = field(default_factory=dict)


def _as_batch(net: ReluNetwork, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != net.input_length:
        raise DimensionError(f"expected input length {net.input_length}, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise DimensionError("input contains non-finite values")
    return x, single


def _conv_windows(x, layer: ConvLayer):
    # x: (B, C, L) -> (B, C, Lout, K)
    win = np.lib.stride_tricks.sliding_window_view(x, layer.width, axis=2)
    return win[:, :, ::layer.stride, :]


def _layer_forward(layer, a):
    """Pre-activation of ``layer`` for a batch ``a``; returns (pre, cache)."""
    if isinstance(layer, AffineLayer):
        flat = a.reshape(a.shape[0], -1)
        return flat @ layer.weights.T + layer.bias, flat
    if a.ndim == 2:
        a = a[:, None, :]
    if isinstance(layer, ConvLayer):
        win = _conv_windows(a, layer)
        B, C, Lout, K = win.shape
        cols = win.transpose(0, 2, 1, 3).reshape(B * Lout, C * K)
        out = cols @ layer.kernels.reshape(layer.filters, C * K).T + layer.bias
        out = out.reshape(B, Lout, layer.filters).transpose(0, 2, 1)
        return out, (a, cols)
    win = np.lib.stride_tricks.sliding_window_view(a, layer.pool_size, axis=2)[:, :, ::layer.stride, :]
    arg = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, (a, arg)


def _run(layers, a, trace: ActivationTrace | None = None, caches: list | None = None):
    for k, layer in enumerate(layers):
        pre, cache = _layer_forward(layer, a)
        relu = getattr(layer, "relu", False)
        a = np.maximum(pre, 0.0) if relu else pre
        if caches is not None:
            caches.append((pre, cache))
        if trace is not None:
            trace.pre_activations.append(pre)
            trace.activations.append(a)
            trace.patterns.append((pre > 0).astype(np.int8) if relu else None)
            if isinstance(layer, MaxPoolLayer):
                trace.pool_argmax[len(trace.activations) - 1] = cache[1]
    return a


def forward(net: ReluNetwork, x) -> np.ndarray | float:
    """Network output N(x) for one input (returns float) or a batch (returns (B,))."""
    xb, single = _as_batch(net, x)
    out = _run(net.layers, xb)[:, 0]
    return float(out[0]) if single else out


def forward_with_trace(net: ReluNetwork, x):
    """Output plus an ActivationTrace. Pattern bits use strict ``pre > 0``."""
    xb, single = _as_batch(net, x)
    trace = ActivationTrace(activations=[xb], pre_activations=[None], patterns=[None])
    out = _run(net.layers, xb, trace)[:, 0]
    if single:
        trace = _unbatch(trace)
        return float(out[0]), trace
    return out, trace


def _unbatch(trace: ActivationTrace) -> ActivationTrace:
    pick = lambda v: None if v is None else v[0]
    return ActivationTrace(
        activations=[pick(v) for v in trace.activations],
        pre_activations=[pick(v) for v in trace.pre_activations],
        patterns=[pick(v) for v in trace.patterns],
        pool_argmax={k: v[0] for k, v in trace.pool_argmax.items()},
    )


def activation(net: ReluNetwork, x, index: int) -> np.ndarray:
    """Activation ``index`` (0 = input), flattened per sample."""
    xb, single = _as_batch(net, x)
    a = _run(net.layers[:index], xb)
    a = a.reshape(a.shape[0], -1)
    return a[0] if single else a


def run_layers(net: ReluNetwork, a, start: int, stop: int | None = None) -> np.ndarray:
    """Apply ``layers[start:stop]`` to a batch of activations ``a``; output flattened per sample."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    return _run(net.layers[start:stop], a).reshape(len(a), -1)


def embed(net: ReluNetwork, x) -> np.ndarray:
    return activation(net, x, net.embedding_index)


def forward_tail(net: ReluNetwork, z, start: int | None = None):
    """Evaluate ``layers[start:]`` (default: the tail after the embedding) on activation ``z``."""
    start = net.embedding_index if start is None else start
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    zb = z[None, :] if single else z
    out = _run(net.layers[start:], zb)[:, 0]
    return float(out[0]) if single else out


def tail_trace(net: ReluNetwork, z, start: int | None = None) -> dict[int, np.ndarray]:
    """ReLU patterns ``(B, width)`` of the hidden layers from ``start`` on.

    Keyed by layer index (position in ``net.layers``), not activation index.
    """
    start = net.embedding_index if start is None else start
    zb = np.atleast_2d(np.asarray(z, dtype=np.float64))
    trace = ActivationTrace()
    _run(net.layers[start:], zb, trace)
    return {start + k: p for k, p in enumerate(trace.patterns) if p is not None}


# ---------------------------------------------------------------------------
# local affine reconstruction from a trace


def _dense_matrix(layer, in_shape, trace_argmax=None):
    """Dense (W, b) of a layer acting on the flattened activation, with pools fixed by argmax."""
    if isinstance(layer, AffineLayer):
        return layer.weights, layer.bias
    channels, length = in_shape
    n_in = channels * length
    if isinstance(layer, ConvLayer):
        lout = layer.out_length(length)
        W = np.zeros((layer.filters * lout, n_in))
        for f in range(layer.filters):
            for l in range(lout):
                for c in range(channels):
                    s = c * length + l * layer.stride
                    W[f * lout + l, s:s + layer.width] = layer.kernels[f, c]
        return W, np.repeat(layer.bias, lout)
    lout = layer.out_length(length)
    W = np.zeros((channels * lout, n_in))
    for c in range(channels):
        for l in range(lout):
            W[c * lout + l, c * length + l * layer.stride + trace_argmax[c, l]] = 1.0
    return W, np.zeros(channels * lout)


def local_affine(net: ReluNetwork, trace: ActivationTrace) -> tuple[np.ndarray, float]:
    """(w, b) with N(y) = w @ y + b on the linear region recorded in ``trace`` (single input)."""
    shape = (1, net.input_length)
    M = np.eye(net.input_length)
    c = np.zeros(net.input_length)
    for k, layer in enumerate(net.layers, start=1):
        W, b = _dense_matrix(layer, shape, trace.pool_argmax.get(k))
        M, c = W @ M, W @ c + b
        if trace.patterns[k] is not None:
            mask = trace.patterns[k].reshape(-1).astype(np.float64)
            M, c = mask[:, None] * M, mask * c
        shape = _out_shape(layer, shape, k - 1)
    return M[0], float(c[0])


# ---------------------------------------------------------------------------
# backward pass


def _layer_backward(layer, grad_pre, cache):
    """Gradient w.r.t. the layer input and its parameters, given d(loss)/d(pre)."""
    if isinstance(layer, AffineLayer):
        flat = cache
        return grad_pre @ layer.weights, [grad_pre.T @ flat, grad_pre.sum(axis=0)]
    a = cache[0]
    if isinstance(layer, ConvLayer):
        cols = cache[1]
        B, F, lout = grad_pre.shape
        C, K = layer.in_channels, layer.width
        g2 = grad_pre.transpose(0, 2, 1).reshape(B * lout, F)
        gk = (g2.T @ cols).reshape(F, C, K)
        gb = grad_pre.sum(axis=(0, 2))
        gcols = (g2 @ layer.kernels.reshape(F, C * K)).reshape(B, lout, C, K)
        ga = np.zeros_like(a)
        stop = layer.stride * (lout - 1) + 1
        for k in range(K):
            ga[:, :, k:k + stop:layer.stride] += gcols[:, :, :, k].transpose(0, 2, 1)
        return ga, [gk, gb]
    arg = cache[1]
    ga = np.zeros_like(a)
    lout = grad_pre.shape[2]
    base = np.arange(lout) * layer.stride
    for j in range(layer.pool_size):
        hit = arg == j
        ga[:, :, base + j] += np.where(hit, grad_pre, 0.0)
    return ga, []


def backward(net: ReluNetwork, x_batch: np.ndarray, grad_out: np.ndarray):
    """Parameter gradients of ``sum(grad_out * N(x))``, in ``net.parameters()`` order."""
    caches: list = []
    _run(net.layers, x_batch, caches=caches)
    g = grad_out.reshape(-1, 1)
    grads: list = []
    for layer, (pre, cache) in zip(reversed(net.layers), reversed(caches)):
        if getattr(layer, "relu", False):
            g = g.reshape(pre.shape) * (pre > 0)
        else:
            g = g.reshape(pre.shape)
        g, pg = _layer_backward(layer, g, cache)
        grads = pg + grads
    return grads
