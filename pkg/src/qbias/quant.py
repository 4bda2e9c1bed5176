"""Layerwise post-training quantization scheme and fake-quantized inference.

Weights: symmetric per-layer grid, codes in [-(2^(N-1)-1), 2^(N-1)-1].
Biases: symmetric 16-bit grid. Activations: asymmetric per-layer grid from
calibration min/max, with real zero exactly representable. Quantized
inference is simulated in float64 over dequantized values.

A grid with ``bits >= 32`` is a passthrough: no rounding or clipping. This is
how quantization is switched off for a tensor role.
"""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import kernels
from .nn import INPUT, WEIGHTED, Graph, GraphError, forward

log = logging.getLogger(__name__)

PASSTHROUGH_BITS = 32
BIAS_BITS = 16
DEAD_VARIANCE = 1e-10
_SCALE_FLOOR = 1e-12


class QuantError(ValueError):
    pass


@dataclass(frozen=True)
class QuantGrid:
    bits: int
    scale: float
    zero_point: int
    symmetric: bool
    qmin: int
    qmax: int

    def __post_init__(self):
        if not self.scale > 0:
            raise QuantError(f"grid scale must be positive, got {self.scale}")
        if not self.qmin <= self.zero_point <= self.qmax:
            raise QuantError(f"zero point {self.zero_point} outside [{self.qmin}, {self.qmax}]")
        if self.symmetric and (self.zero_point != 0 or self.qmin != -self.qmax):
            raise QuantError("symmetric grid needs zero_point 0 and qmin == -qmax")

    @property
    def passthrough(self):
        return self.bits >= PASSTHROUGH_BITS

    @property
    def lo(self):
        """Smallest representable real value (the nudged minimum)."""
        return (self.qmin - self.zero_point) * self.scale

    @property
    def hi(self):
        return (self.qmax - self.zero_point) * self.scale

    def quantize(self, x):
        """Integer codes (float64 array). Passthrough grids return x unrounded."""
        x = np.asarray(x, dtype=np.float64)
        if self.passthrough:
            return x / self.scale + self.zero_point
        return np.clip(kernels.round_half_away(x / self.scale) + self.zero_point, self.qmin, self.qmax)

    def dequantize(self, codes):
        return (np.asarray(codes, dtype=np.float64) - self.zero_point) * self.scale

    def to_dict(self):
        return {"bits": self.bits, "scale": self.scale, "zero_point": self.zero_point,
                "symmetric": self.symmetric, "qmin": self.qmin, "qmax": self.qmax}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["bits"]), float(d["scale"]), int(d["zero_point"]), bool(d["symmetric"]),
                   int(d["qmin"]), int(d["qmax"]))


def _symmetric_grid(bits, scale):
    qmax = 2 ** (bits - 1) - 1
    return QuantGrid(bits, float(scale), 0, True, -qmax, qmax)


def _passthrough_grid(symmetric=True):
    q = 2 ** (PASSTHROUGH_BITS - 1) - 1
    return QuantGrid(PASSTHROUGH_BITS, 1.0, 0, symmetric, -q, q)


def fake_quant(x, grid):
    """Quantize-dequantize ``x`` on ``grid``."""
    return fake_quant_with_mask(x, grid)[0]


def fake_quant_with_mask(x, grid):
    """Return (fake-quantized x, mask of elements inside the clip range)."""
    x = np.asarray(x, dtype=np.float64)
    if grid.passthrough:
        return x, None
    return kernels.fake_quant(x, grid.scale, grid.zero_point, grid.qmin, grid.qmax)


def quantize_weights_symmetric(w, bits):
    """Per-tensor symmetric grid and integer codes for ``w``.

    scale = max|w| / (2^(bits-1) - 1); an all-zero tensor gets scale 1e-12.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.size == 0:
        raise QuantError("cannot quantize an empty weight tensor")
    if bits >= PASSTHROUGH_BITS:
        grid = _passthrough_grid()
        return grid, grid.quantize(w)
    qmax = 2 ** (bits - 1) - 1
    maxabs = float(np.max(np.abs(w)))
    if maxabs <= 0.0:
        grid = _symmetric_grid(bits, _SCALE_FLOOR)
        return grid, np.zeros_like(w)
    grid = _symmetric_grid(bits, maxabs / qmax)
    # w * qmax / maxabs keeps grid points exact (w / scale can land just off a tie)
    codes = np.clip(kernels.round_half_away(w * qmax / maxabs), -qmax, qmax)
    return grid, codes


def make_activation_grid(vmin, vmax, bits):
    """Asymmetric unsigned grid over [vmin, vmax], widened to contain zero."""
    if vmin > vmax:
        raise QuantError(f"min {vmin} > max {vmax}")
    if bits >= PASSTHROUGH_BITS:
        return _passthrough_grid(symmetric=False)
    vmin, vmax = min(float(vmin), 0.0), max(float(vmax), 0.0)
    qmax = 2 ** bits - 1
    span = vmax - vmin
    if span < 1e-12:
        scale = max(1e-6, abs(vmax) / qmax)
        zp = int(np.clip(kernels.round_half_away(-vmin / scale), 0, qmax))
    else:
        scale = span / qmax
        zp = int(np.clip(kernels.round_half_away(-vmin * qmax / span), 0, qmax))
    return QuantGrid(bits, scale, zp, False, 0, qmax)


def quantize_bias(b, w_grid, in_grid, bits=BIAS_BITS):
    """Symmetric bias grid with scale in_scale * w_scale, widened on overflow."""
    b = np.asarray(b, dtype=np.float64)
    if bits >= PASSTHROUGH_BITS or (w_grid.passthrough and in_grid.passthrough):
        grid = _passthrough_grid()
        return grid, grid.quantize(b)
    qmax = 2 ** (bits - 1) - 1
    scale = in_grid.scale * w_grid.scale
    codes = kernels.round_half_away(b / scale)
    if np.any(np.abs(codes) > qmax):
        scale = float(np.max(np.abs(b))) / qmax
        codes = np.clip(kernels.round_half_away(b / scale), -qmax, qmax)
    return _symmetric_grid(bits, scale), codes


def requantize_on_grid(b, grid):
    """Codes for ``b`` on a fixed bias grid. Returns (codes, number clipped)."""
    codes = grid.quantize(b)
    if grid.passthrough:
        return codes, 0
    raw = kernels.round_half_away(np.asarray(b, dtype=np.float64) / grid.scale)
    return codes, int(np.sum(raw != codes))


# --- graph preprocessing -----------------------------------------------------


def fold_batchnorm(graph):
    """Fold attached batch norms into the weights and biases of their layers."""
    out = graph.copy()
    for idx, layer in enumerate(out.layers):
        bn = layer.bn
        if bn is None:
            continue
        if layer.kind not in WEIGHTED:
            raise GraphError("batch norm can only be folded into a weighted layer", idx)
        var = np.asarray(bn.var, dtype=np.float64)
        if np.any(var < 0):
            raise QuantError(f"layer {idx}: negative batch-norm variance")
        s = np.asarray(bn.gamma, dtype=np.float64) / np.sqrt(var + bn.eps)
        w = np.asarray(layer.weights, dtype=np.float64)
        if layer.kind == "DepthwiseConv2D":
            w = w * s[None, None, :, None]
        else:
            w = w * s
        b = np.zeros(len(s)) if layer.bias is None else np.asarray(layer.bias, dtype=np.float64)
        layer.weights = w
        layer.bias = (b - bn.mean) * s + bn.beta
        layer.bn = None
    return out


@dataclass
class DeadChannel:
    layer: int
    channel: int
    value: float  # the constant output before zeroing
    zeroed: bool


def _zero_channel(layer, ch):
    if layer.kind == "DepthwiseConv2D":
        layer.weights[:, :, ch, :] = 0.0
    else:
        layer.weights[..., ch] = 0.0
    layer.bias[ch] = 0.0


def _absorb(graph, src, ch, value, shapes):
    """Move a constant channel's contribution into its consumers' biases.

    Returns False if some consumer cannot absorb it exactly enough.
    """
    consumers = [(i, l) for i, l in enumerate(graph.layers) if src in l.inputs]
    if src == graph.output or not consumers:
        return False
    for _, layer in consumers:
        if layer.kind not in WEIGHTED or layer.bias is None:
            return False
        # zero padding sees the constant only partially at the borders
        if layer.kind != "Dense" and layer.padding == "same" and layer.weights.shape[:2] != (1, 1):
            return False
    for _, layer in consumers:
        w = layer.weights
        if layer.kind == "Conv2D":
            layer.bias = layer.bias + value * w[:, :, ch, :].sum(axis=(0, 1))
        elif layer.kind == "DepthwiseConv2D":
            layer.bias = layer.bias.copy()
            layer.bias[ch] += value * w[:, :, ch, 0].sum()
        else:
            c = shapes[src][-1]
            layer.bias = layer.bias + value * w[ch::c].sum(axis=0)
    return True


def drop_dead_channels(graph, calib, threshold=DEAD_VARIANCE):
    """Zero channels whose post-activation output is constant on ``calib``.

    A constant c != 0 is first absorbed into the biases of downstream
    Conv2D/Depthwise/Dense consumers; if that is impossible the channel is
    flagged but left in place. Returns (graph, list of DeadChannel).
    """
    if any(layer.bn is not None for layer in graph.layers):
        raise QuantError("fold batch norms before dropping dead channels")
    out = graph.copy()
    _, trace = forward(out, calib, capture=True)
    shapes = [p.shape[1:] for p in trace.post]
    dead = []
    for idx, layer in enumerate(out.layers):
        if layer.kind not in WEIGHTED or layer.bias is None:
            continue
        post = trace.post[idx].reshape(-1, trace.post[idx].shape[-1])
        var = post.var(axis=0)
        for ch in np.flatnonzero(var < threshold):
            value = float(post[:, ch].mean())
            zeroed = value == 0.0 or _absorb(out, idx, ch, value, shapes)
            if zeroed:
                _zero_channel(layer, ch)
            dead.append(DeadChannel(idx, int(ch), value, zeroed))
    if dead:
        before = np.argmax(forward(graph, calib)[0].reshape(len(calib), -1), axis=1)
        after = np.argmax(forward(out, calib)[0].reshape(len(calib), -1), axis=1)
        if np.any(before != after):
            log.warning("dropping dead channels changed %d calibration predictions", int(np.sum(before != after)))
    return out, dead


def round_params_to_storage(graph):
    """Round every parameter to float32, the on-disk precision."""
    out = graph.copy()
    for layer in out.layers:
        if layer.weights is not None:
            layer.weights = layer.weights.astype(np.float32).astype(np.float64)
        if layer.bias is not None:
            layer.bias = layer.bias.astype(np.float32).astype(np.float64)
    return out


# --- quantized model ---------------------------------------------------------


@dataclass
class CalibrationStats:
    input_min: float
    input_max: float
    mins: list
    maxs: list


@dataclass
class LayerQuant:
    a_grid: QuantGrid
    w_grid: Optional[QuantGrid] = None
    w_codes: Optional[np.ndarray] = None
    b_grid: Optional[QuantGrid] = None
    b_codes: Optional[np.ndarray] = None
    # full-precision bias that overrides the codes (IBC without re-quantization)
    bias_fp: Optional[np.ndarray] = None


@dataclass
class QuantizedModel:
    graph: Graph
    input_grid: QuantGrid
    layers: list = field(default_factory=list)

    def copy(self):
        return copy.deepcopy(self)

    def weights(self, idx):
        lq = self.layers[idx]
        return None if lq.w_grid is None else lq.w_grid.dequantize(lq.w_codes)

    def bias(self, idx):
        lq = self.layers[idx]
        if lq.bias_fp is not None:
            return lq.bias_fp.copy()
        return None if lq.b_grid is None else lq.b_grid.dequantize(lq.b_codes)

    def biases(self):
        return {i: self.bias(i) for i, lq in enumerate(self.layers) if lq.b_grid is not None}

    def effective_graph(self, biases=None):
        """The graph with dequantized weights and biases (or ``biases`` overrides)."""
        g = Graph([copy.copy(l) for l in self.graph.layers], self.graph.input_shape, self.graph.output)
        for idx, layer in enumerate(g.layers):
            if self.layers[idx].w_grid is not None:
                layer.weights = self.weights(idx)
            if layer.bias is not None:
                layer.bias = biases[idx] if biases is not None and idx in biases else self.bias(idx)
        return g

    def with_biases(self, biases, requantize=True):
        """Copy with new full-precision biases, re-quantized onto the fixed bias grids.

        Returns (model, {layer: clipped code count}).
        """
        out = self.copy()
        clipped = {}
        for idx, b in biases.items():
            lq = out.layers[idx]
            b = np.asarray(b, dtype=np.float64)
            if requantize:
                lq.b_codes, clipped[idx] = requantize_on_grid(b, lq.b_grid)
                lq.bias_fp = None
            else:
                lq.bias_fp = b.copy()
        return out, clipped

    def activation_hook(self):
        grids = {INPUT: self.input_grid}
        grids.update({i: lq.a_grid for i, lq in enumerate(self.layers)})

        def hook(idx, x):
            return fake_quant_with_mask(x, grids[idx])

        return hook


def calibrate(graph, calib):
    _, trace = forward(graph, calib, capture=True)
    return CalibrationStats(
        float(np.min(trace.input)), float(np.max(trace.input)),
        [float(np.min(p)) for p in trace.post], [float(np.max(p)) for p in trace.post],
    )


def quantize_model(graph, calib, bits_w=8, bits_a=8, bits_b=BIAS_BITS):
    """Build every grid from min/max calibration and quantize weights and biases.

    ``graph`` should already be folded and dead-channel processed.
    """
    stats = calibrate(graph, calib)
    input_grid = make_activation_grid(stats.input_min, stats.input_max, bits_a)
    a_grids = [make_activation_grid(lo, hi, bits_a) for lo, hi in zip(stats.mins, stats.maxs)]
    layers = []
    for idx, layer in enumerate(graph.layers):
        lq = LayerQuant(a_grid=a_grids[idx])
        if layer.kind in WEIGHTED:
            lq.w_grid, lq.w_codes = quantize_weights_symmetric(layer.weights, bits_w)
            if layer.bias is not None:
                src = layer.inputs[0]
                in_grid = input_grid if src == INPUT else a_grids[src]
                lq.b_grid, lq.b_codes = quantize_bias(layer.bias, lq.w_grid, in_grid, bits_b)
        layers.append(lq)
    return QuantizedModel(graph.copy(), input_grid, layers)


def forward_quant(qmodel, batch, capture=False, *, biases=None, stop_after=None):
    """Simulated quantized inference. ``biases`` overrides per-layer biases."""
    graph = qmodel.effective_graph(biases)
    return forward(graph, batch, capture, act_hook=qmodel.activation_hook(), stop_after=stop_after)


def same_except_biases(a, b):
    """True when two quantized models have bit-identical weights and grids."""
    if a.input_grid != b.input_grid or len(a.layers) != len(b.layers):
        return False
    for la, lb in zip(a.layers, b.layers):
        if (la.a_grid, la.w_grid, la.b_grid) != (lb.a_grid, lb.w_grid, lb.b_grid):
            return False
        if (la.w_codes is None) != (lb.w_codes is None):
            return False
        if la.w_codes is not None and la.w_codes.tobytes() != lb.w_codes.tobytes():
            return False
    for la, lb in zip(a.graph.layers, b.graph.layers):
        if (la.weights is None) != (lb.weights is None):
            return False
        if la.weights is not None and la.weights.tobytes() != lb.weights.tobytes():
            return False
    return True
