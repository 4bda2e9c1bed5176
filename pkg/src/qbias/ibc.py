"""Iterative bias correction.

Full-precision activations are evaluated once. Then, layer by layer in
topological order, the quantized net is re-evaluated with all earlier
corrections in place, the per-channel mean shift between the two nets is
measured over images and spatial positions, and it is added to the layer's
bias. Activation grids are never touched.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .metrics import teacher_student_ce
from .nn import forward
from .quant import forward_quant, requantize_on_grid

log = logging.getLogger(__name__)

MODES = ("post", "pre")


class IbcError(RuntimeError):
    def __init__(self, message, layer=None):
        super().__init__(message if layer is None else f"layer {layer}: {message}")
        self.layer = layer


@dataclass
class IbcConfig:
    batch: np.ndarray
    mode: str = "post"
    bias_requantize: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if len(self.batch) == 0:
            raise ValueError("IBC batch is empty")


@dataclass
class IbcLayerReport:
    layer: int
    kind: str
    skipped: bool
    delta: np.ndarray = field(default_factory=lambda: np.zeros(0))
    residual: np.ndarray = field(default_factory=lambda: np.zeros(0))
    dead: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    clipped: int = 0


def _channel_means(t):
    return t.reshape(-1, t.shape[-1]).mean(axis=0)


def _dead_channels(fp_act, q_act):
    fp = fp_act.reshape(-1, fp_act.shape[-1])
    q = q_act.reshape(-1, q_act.shape[-1])
    q_zero = np.all(q == 0.0, axis=0)
    fp_zero = np.all(fp == 0.0, axis=0)
    return (q_zero & (fp.mean(axis=0) > 0)) | (fp_zero & (q.mean(axis=0) > 0))


def ibc_run(fp_graph, qmodel, cfg):
    """Correct the biases of ``qmodel`` against ``fp_graph``.

    Returns (corrected model, list of IbcLayerReport, one per layer).
    """
    batch = cfg.batch
    where = cfg.mode
    _, fp_trace = forward(fp_graph, batch, capture=True)
    biases = qmodel.biases()
    reports = []
    for idx, layer in enumerate(qmodel.graph.layers):
        lq = qmodel.layers[idx]
        if lq.b_grid is None:
            reports.append(IbcLayerReport(idx, layer.kind, skipped=True))
            continue
        fp_act = getattr(fp_trace, where)[idx]
        try:
            _, qt = forward_quant(qmodel, batch, capture=True, biases=biases, stop_after=idx)
        except Exception as exc:
            raise IbcError(f"quantized evaluation failed: {exc}", idx) from exc
        q_act = getattr(qt, where)[idx]
        delta = _channel_means(fp_act) - _channel_means(q_act)
        if not np.all(np.isfinite(delta)):
            raise IbcError("non-finite mean shift", idx)
        dead = _dead_channels(fp_act, q_act) if where == "post" else np.zeros(len(delta), dtype=bool)
        if dead.any():
            log.info("layer %d: %d channels dead on one side, raw mean difference applied", idx, int(dead.sum()))
        new_bias = biases[idx] + delta
        clipped = 0
        if cfg.bias_requantize:
            codes, clipped = requantize_on_grid(new_bias, lq.b_grid)
            new_bias = lq.b_grid.dequantize(codes)
        biases[idx] = new_bias
        _, qt = forward_quant(qmodel, batch, capture=True, biases=biases, stop_after=idx)
        residual = _channel_means(getattr(qt, where)[idx]) - _channel_means(fp_act)
        reports.append(IbcLayerReport(idx, layer.kind, False, delta, residual, dead, clipped))
    corrected, _ = qmodel.with_biases(biases, requantize=cfg.bias_requantize)
    return corrected, reports


def report_rows(reports):
    """Flatten reports to one dict per (layer, channel); skipped layers get one row."""
    rows = []
    for r in reports:
        if r.skipped:
            rows.append({"layer": r.layer, "kind": r.kind, "channel": -1, "skipped": 1,
                         "delta": 0.0, "residual": 0.0, "dead": 0, "clipped": 0})
            continue
        for ch in range(len(r.delta)):
            rows.append({"layer": r.layer, "kind": r.kind, "channel": ch, "skipped": 0,
                         "delta": float(r.delta[ch]), "residual": float(r.residual[ch]),
                         "dead": int(r.dead[ch]), "clipped": r.clipped})
    return rows


@dataclass
class SweepRow:
    batch_size: int
    cross_entropy: float


def ibc_sweep(fp_graph, qmodel, pool, batch_sizes, eval_set, seed=0, mode="post"):
    """Run IBC with batches of several sizes drawn from ``pool``.

    Each batch is the first n entries of one seeded permutation, kept in pool
    order. The metric is teacher-student cross-entropy on ``eval_set``.
    """
    perm = np.random.default_rng(seed).permutation(len(pool))
    rows = []
    for n in batch_sizes:
        if not 1 <= n <= len(pool):
            raise ValueError(f"batch size {n} outside [1, {len(pool)}]")
        batch = pool[np.sort(perm[:n])]
        corrected, _ = ibc_run(fp_graph, qmodel, IbcConfig(batch, mode=mode))
        rows.append(SweepRow(n, teacher_student_ce(fp_graph, corrected, eval_set)))
    return rows
