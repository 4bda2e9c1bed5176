"""Minimal CNN graph: full-precision forward inference and bias gradients.

Activations are NHWC, convolution kernels are (kh, kw, in, out) and depthwise
kernels (kh, kw, C, 1). Everything is computed in float64.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional

import numpy as np

from . import kernels

KINDS = ("Conv2D", "DepthwiseConv2D", "Dense", "AvgPool", "Add", "Concat")
ACTIVATIONS = (None, "ReLU", "ReLU6")
WEIGHTED = ("Conv2D", "DepthwiseConv2D", "Dense")

INPUT = -1  # edge reference to the graph input


class GraphError(ValueError):
    """Structural or shape problem; ``layer`` is the offending layer index."""

    def __init__(self, message, layer=None):
        super().__init__(message if layer is None else f"layer {layer}: {message}")
        self.layer = layer


class TraceError(ValueError):
    pass


@dataclass
class BatchNorm:
    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    eps: float = 1e-3


@dataclass
class LayerSpec:
    kind: str
    inputs: list
    weights: Optional[np.ndarray] = None
    bias: Optional[np.ndarray] = None
    activation: Optional[str] = None
    stride: int = 1
    padding: str = "valid"
    pool_size: Optional[int] = None  # AvgPool only, non-overlapping; None means global
    bn: Optional[BatchNorm] = None
    name: str = ""

    @property
    def has_bias(self):
        return self.bias is not None

    @property
    def out_channels(self):
        if self.kind == "DepthwiseConv2D":
            return self.weights.shape[2]
        if self.kind in ("Conv2D", "Dense"):
            return self.weights.shape[-1]
        return None

    @property
    def fan_in_k(self):
        """Kernel elements contributing to one output-channel value."""
        w = self.weights
        if self.kind == "Conv2D":
            return w.shape[0] * w.shape[1] * w.shape[2]
        if self.kind == "DepthwiseConv2D":
            return w.shape[0] * w.shape[1]
        if self.kind == "Dense":
            return w.shape[0]
        return None


@dataclass
class Graph:
    layers: list
    input_shape: tuple  # (H, W, C) per image, or (features,)
    output: int = -1

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        if self.output < 0:
            self.output = len(self.layers) + self.output

    def copy(self):
        return copy.deepcopy(self)

    def __len__(self):
        return len(self.layers)


@dataclass
class ActivationTrace:
    """Per-layer tensors of one forward pass.

    ``post`` is the tensor a layer hands to its consumers (after any activation
    quantization); ``masks`` marks elements that were inside the quantizer's
    clip range, or is None where no quantizer ran.
    """

    input: np.ndarray
    pre: list = field(default_factory=list)
    post: list = field(default_factory=list)
    masks: list = field(default_factory=list)
    input_mask: Optional[np.ndarray] = None


class Diagnostic(NamedTuple):
    layer: int
    check: str
    message: str


def _same_pads(n, k, stride):
    out = -(-n // stride)
    total = max((out - 1) * stride + k - n, 0)
    return total // 2, total - total // 2


def _pad(x, layer, kh, kw):
    if layer.padding == "valid":
        return x, (0, 0, 0, 0)
    if layer.padding != "same":
        raise GraphError(f"unknown padding {layer.padding!r}")
    top, bottom = _same_pads(x.shape[1], kh, layer.stride)
    left, right = _same_pads(x.shape[2], kw, layer.stride)
    if top == bottom == left == right == 0:
        return x, (0, 0, 0, 0)
    return np.pad(x, ((0, 0), (top, bottom), (left, right), (0, 0))), (top, bottom, left, right)


def _unpad(g, pads):
    top, bottom, left, right = pads
    return g[:, top:g.shape[1] - bottom, left:g.shape[2] - right, :]


def _activate(pre, activation):
    if activation is None:
        return pre
    if activation == "ReLU":
        return np.maximum(pre, 0.0)
    if activation == "ReLU6":
        return np.clip(pre, 0.0, 6.0)
    raise GraphError(f"unknown activation {activation!r}")


def _activation_slope(pre, activation):
    if activation is None:
        return None
    if activation == "ReLU":
        return pre > 0.0
    return (pre > 0.0) & (pre < 6.0)


def _linear(layer, xs):
    """Layer output before bias, batch norm and activation."""
    kind = layer.kind
    x = xs[0]
    if kind == "Conv2D":
        xp, _ = _pad(x, layer, *layer.weights.shape[:2])
        return kernels.conv2d_forward(xp, layer.weights, layer.stride)
    if kind == "DepthwiseConv2D":
        xp, _ = _pad(x, layer, *layer.weights.shape[:2])
        return kernels.depthwise_forward(xp, layer.weights[:, :, :, 0], layer.stride)
    if kind == "Dense":
        return x.reshape(x.shape[0], -1) @ layer.weights
    if kind == "AvgPool":
        if layer.pool_size is None:
            return x.mean(axis=(1, 2), keepdims=True)
        p = layer.pool_size
        w = np.full((p, p, x.shape[3]), 1.0 / (p * p))
        return kernels.depthwise_forward(x, w, p)
    if kind == "Add":
        out = xs[0].copy()
        for other in xs[1:]:
            out += other
        return out
    if kind == "Concat":
        return np.concatenate(xs, axis=-1)
    raise GraphError(f"unknown layer kind {kind!r}")


def _bn_scale(bn):
    return bn.gamma / np.sqrt(bn.var + bn.eps)


ActivationHook = Callable[[int, np.ndarray], tuple]


def forward(graph, batch, capture=False, *, act_hook=None, stop_after=None):
    """Run ``graph`` on ``batch``.

    ``act_hook(index, tensor) -> (tensor, mask)`` is applied to the graph
    input (index -1) and to every layer's post-activation output; the
    quantized simulator uses it for fake quantization. ``stop_after`` ends the
    pass after that layer, in which case the returned logits are None.
    Returns (logits, trace or None).
    """
    batch = np.asarray(batch, dtype=np.float64)
    if batch.shape[1:] != graph.input_shape:
        raise GraphError(f"batch shape {batch.shape[1:]} does not match graph input {graph.input_shape}")
    x_in, in_mask = (batch, None) if act_hook is None else act_hook(INPUT, batch)
    trace = ActivationTrace(input=x_in, input_mask=in_mask) if capture else None
    outs = []
    last = len(graph.layers) - 1 if stop_after is None else stop_after
    for idx, layer in enumerate(graph.layers[:last + 1]):
        xs = [x_in if j == INPUT else outs[j] for j in layer.inputs]
        try:
            z = _linear(layer, xs)
        except (ValueError, IndexError) as exc:
            raise GraphError(str(exc), idx) from exc
        if layer.bias is not None:
            if layer.bias.shape[0] != z.shape[-1]:
                raise GraphError(f"bias length {layer.bias.shape[0]} != {z.shape[-1]} channels", idx)
            z = z + layer.bias
        if layer.bn is not None:
            z = (z - layer.bn.mean) * _bn_scale(layer.bn) + layer.bn.beta
        post = _activate(z, layer.activation)
        mask = None
        if act_hook is not None:
            post, mask = act_hook(idx, post)
        outs.append(post)
        if capture:
            trace.pre.append(z)
            trace.post.append(post)
            trace.masks.append(mask)
    logits = outs[graph.output] if last >= graph.output else None
    return logits, trace


def backward_bias_grads(graph, trace, logits_grad):
    """Gradient of a scalar loss with respect to every bias in ``graph``.

    ``logits_grad`` is dLoss/dlogits for the whole batch. When the loss is a
    batch mean (as the distillation loss is), the result is the batch-averaged
    per-sample bias gradient. Quantizer masks recorded in the trace act as a
    clipped straight-through estimator. Returns {layer index: gradient}.
    """
    n = len(graph.layers)
    if trace is None or len(trace.pre) < n or len(trace.post) < n:
        raise TraceError("trace does not cover every layer of the graph")
    grads = [None] * n
    grads[graph.output] = np.asarray(logits_grad, dtype=np.float64)
    if grads[graph.output].shape != trace.post[graph.output].shape:
        raise TraceError("logits_grad shape does not match the traced logits")
    result = {}
    for idx in range(n - 1, -1, -1):
        layer = graph.layers[idx]
        g = grads[idx]
        if g is None:
            if layer.has_bias:
                result[idx] = np.zeros_like(layer.bias, dtype=np.float64)
            continue
        if trace.masks[idx] is not None:
            g = g * trace.masks[idx]
        slope = _activation_slope(trace.pre[idx], layer.activation)
        if slope is not None:
            g = g * slope
        if layer.bn is not None:
            g = g * _bn_scale(layer.bn)
        if layer.has_bias:
            result[idx] = g.reshape(-1, g.shape[-1]).sum(axis=0)
        _propagate(graph, trace, idx, layer, g, grads)
    return result


def _input_of(trace, j):
    return trace.input if j == INPUT else trace.post[j]


def _accumulate(grads, j, g):
    if j == INPUT:
        return
    grads[j] = g if grads[j] is None else grads[j] + g


def _propagate(graph, trace, idx, layer, g, grads):
    kind = layer.kind
    srcs = layer.inputs
    if kind == "Conv2D":
        x = _input_of(trace, srcs[0])
        xp, pads = _pad(x, layer, *layer.weights.shape[:2])
        gx = kernels.conv2d_backward_input(g, layer.weights, layer.stride, xp.shape)
        _accumulate(grads, srcs[0], _unpad(gx, pads))
    elif kind == "DepthwiseConv2D":
        x = _input_of(trace, srcs[0])
        xp, pads = _pad(x, layer, *layer.weights.shape[:2])
        gx = kernels.depthwise_backward_input(g, layer.weights[:, :, :, 0], layer.stride, xp.shape)
        _accumulate(grads, srcs[0], _unpad(gx, pads))
    elif kind == "Dense":
        x = _input_of(trace, srcs[0])
        _accumulate(grads, srcs[0], (g @ layer.weights.T).reshape(x.shape))
    elif kind == "AvgPool":
        x = _input_of(trace, srcs[0])
        if layer.pool_size is None:
            gx = np.broadcast_to(g / (x.shape[1] * x.shape[2]), x.shape).copy()
        else:
            p = layer.pool_size
            w = np.full((p, p, x.shape[3]), 1.0 / (p * p))
            gx = kernels.depthwise_backward_input(g, w, p, x.shape)
        _accumulate(grads, srcs[0], gx)
    elif kind == "Add":
        for j in srcs:
            _accumulate(grads, j, g)
    elif kind == "Concat":
        start = 0
        for j in srcs:
            c = _input_of(trace, j).shape[-1]
            _accumulate(grads, j, g[..., start:start + c])
            start += c


def layer_output_shapes(graph):
    """Per-image output shape of every layer; raises GraphError on mismatch."""
    shapes = []
    for idx, layer in enumerate(graph.layers):
        ins = [graph.input_shape if j == INPUT else shapes[j] for j in layer.inputs]
        shapes.append(_infer_shape(idx, layer, ins))
    return shapes


def _conv_out(n, k, stride, padding):
    if padding == "same":
        return -(-n // stride)
    return (n - k) // stride + 1


def _infer_shape(idx, layer, ins):
    kind = layer.kind
    if kind not in KINDS:
        raise GraphError(f"unknown layer kind {kind!r}", idx)
    if layer.activation not in ACTIVATIONS:
        raise GraphError(f"unknown activation {layer.activation!r}", idx)
    if not ins:
        raise GraphError("layer has no inputs", idx)
    if kind in ("Conv2D", "DepthwiseConv2D", "AvgPool") and len(ins[0]) != 3:
        raise GraphError(f"{kind} needs an (H, W, C) input, got {ins[0]}", idx)
    if kind in WEIGHTED and layer.weights is None:
        raise GraphError(f"{kind} requires weights", idx)
    if kind == "Conv2D":
        h, w, c = ins[0]
        kh, kw, cin, cout = layer.weights.shape
        if cin != c:
            raise GraphError(f"kernel expects {cin} input channels, got {c}", idx)
        out = (_conv_out(h, kh, layer.stride, layer.padding), _conv_out(w, kw, layer.stride, layer.padding), cout)
    elif kind == "DepthwiseConv2D":
        h, w, c = ins[0]
        kh, kw, cin, mult = layer.weights.shape
        if cin != c or mult != 1:
            raise GraphError(f"depthwise kernel {layer.weights.shape} incompatible with {c} channels", idx)
        out = (_conv_out(h, kh, layer.stride, layer.padding), _conv_out(w, kw, layer.stride, layer.padding), c)
    elif kind == "Dense":
        fan_in = int(np.prod(ins[0]))
        if layer.weights.shape[0] != fan_in:
            raise GraphError(f"dense expects {layer.weights.shape[0]} features, got {fan_in}", idx)
        out = (layer.weights.shape[1],)
    elif kind == "AvgPool":
        h, w, c = ins[0]
        if layer.pool_size is None:
            out = (1, 1, c)
        else:
            p = layer.pool_size
            out = (h // p, w // p, c)
    elif kind == "Add":
        if any(s != ins[0] for s in ins):
            raise GraphError(f"Add inputs disagree: {ins}", idx)
        out = ins[0]
    else:
        if any(s[:-1] != ins[0][:-1] for s in ins):
            raise GraphError(f"Concat inputs disagree spatially: {ins}", idx)
        out = ins[0][:-1] + (sum(s[-1] for s in ins),)
    if min(out) < 1:
        raise GraphError(f"output shape {out} is empty", idx)
    return tuple(int(s) for s in out)


def topo_validate(graph):
    """Return None if ``graph`` is well formed, else the first Diagnostic found."""
    for idx, layer in enumerate(graph.layers):
        for j in layer.inputs:
            if j != INPUT and not 0 <= j < idx:
                return Diagnostic(idx, "ordering", f"input {j} is not an earlier layer")
    if not 0 <= graph.output < len(graph.layers):
        return Diagnostic(graph.output, "output", "output index out of range")
    try:
        shapes = layer_output_shapes(graph)
    except GraphError as exc:
        return Diagnostic(exc.layer, "shape", str(exc))
    for idx, layer in enumerate(graph.layers):
        if layer.kind in WEIGHTED and layer.bias is not None:
            if layer.bias.shape != (shapes[idx][-1],):
                return Diagnostic(idx, "shape", f"bias length {layer.bias.shape[0]} != {shapes[idx][-1]} channels")
        if layer.kind not in WEIGHTED and (layer.weights is not None or layer.bias is not None):
            return Diagnostic(idx, "params", f"{layer.kind} carries no weights or bias")
        if layer.bn is not None:
            c = shapes[idx][-1]
            for name in ("gamma", "beta", "mean", "var"):
                if np.shape(getattr(layer.bn, name)) != (c,):
                    return Diagnostic(idx, "shape", f"batch-norm {name} length != {c} channels")
    return None
