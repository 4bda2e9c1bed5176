"""Monte Carlo checks of how weight rounding produces a mean activation shift.

Two experiments over kernel sizes k:

* the sum of k weight rounding errors on a symmetric N-bit grid: its mean
  should vanish and its spread should grow like sqrt(k);
* the per-channel mean-shift-to-signal ratio of a single-output layer with k
  weights fed non-negative inputs, whose spread should fall like 1/sqrt(k).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .quant import quantize_weights_symmetric


@dataclass(frozen=True)
class Sampler:
    kind: str = "uniform"  # "uniform" (low, high) or "normal" (loc, scale)
    a: float = 0.0
    b: float = 1.0
    absolute: bool = False  # fold samples to |x| (for non-negative inputs)

    def draw(self, rng, shape):
        if self.kind == "uniform":
            x = rng.uniform(self.a, self.b, shape)
        elif self.kind == "normal":
            x = rng.normal(self.a, self.b, shape)
        else:
            raise ValueError(f"unknown sampler {self.kind!r}")
        return np.abs(x) if self.absolute else x


@dataclass
class MonteCarloConfig:
    k_values: tuple = (9, 27, 128, 512)
    trials: int = 10_000
    bits: int = 8
    weight_sampler: Sampler = field(default_factory=Sampler)
    input_sampler: Sampler = field(default_factory=lambda: Sampler("uniform", 0.0, 1.0))
    n_inputs: int = 64  # input vectors per trial for the data term
    seed: int = 0
    chunk: int = 1000

    def __post_init__(self):
        if self.trials < 1 or any(k < 1 for k in self.k_values):
            raise ValueError("need trials >= 1 and every k >= 1")


def rounding_support(max_abs, bits):
    """Width C of the assumed uniform rounding-error support, 2 max|W| / 2^(N-1)."""
    return 2.0 * max_abs / 2 ** (bits - 1)


def predicted_sum_std(k, max_abs, bits):
    return rounding_support(max_abs, bits) * np.sqrt(k / 12.0)


def _streams(seed, n):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def _rounding_errors(w, bits):
    """Per-row rounding errors of a (trials, k) weight block, one grid per row."""
    out = np.empty_like(w)
    maxabs = np.empty(len(w))
    for i, row in enumerate(w):
        grid, codes = quantize_weights_symmetric(row, bits)
        out[i] = grid.dequantize(codes) - row
        maxabs[i] = np.max(np.abs(row))
    return out, maxabs


@dataclass
class SumStatsRow:
    k: int
    empirical_mean: float
    empirical_std: float
    predicted_std: float
    grid_step_std: float  # step * sqrt(k/12), using the actual grid step
    max_abs_error_ratio: float  # max |delta| / (C/2) over all elements


def rounding_error_sum_stats(cfg):
    """Statistics of the summed weight rounding error for each k.

    ``predicted_std`` uses the RMS over trials of C = 2 max|W| / 2^(N-1).
    """
    rows = []
    for k, rng in zip(cfg.k_values, _streams(cfg.seed, len(cfg.k_values))):
        sums = np.empty(cfg.trials)
        c2 = np.empty(cfg.trials)
        ratio = 0.0
        for start in range(0, cfg.trials, cfg.chunk):
            n = min(cfg.chunk, cfg.trials - start)
            w = cfg.weight_sampler.draw(rng, (n, k))
            err, maxabs = _rounding_errors(w, cfg.bits)
            if np.any(maxabs == 0.0):
                raise ValueError("weight sampler produced an all-zero kernel")
            sums[start:start + n] = err.sum(axis=1)
            c = rounding_support(maxabs, cfg.bits)
            c2[start:start + n] = c * c
            ratio = max(ratio, float(np.max(np.abs(err) / (c[:, None] / 2))))
        c_rms = np.sqrt(c2.mean())
        step_rms = c_rms * 2 ** (cfg.bits - 1) / 2 / (2 ** (cfg.bits - 1) - 1)
        rows.append(SumStatsRow(k, float(sums.mean()), float(sums.std(ddof=1)),
                                float(c_rms * np.sqrt(k / 12.0)), float(step_rms * np.sqrt(k / 12.0)), ratio))
    return rows


@dataclass
class MssrRow:
    k: int
    mssr_mean: float
    mssr_std: float
    redraws: int


@dataclass
class MssrScaling:
    rows: list
    slope: float
    intercept: float


def _mssr_block(rng, cfg, k, n):
    """MSSR of n single-channel layers: E(x_in) * sum(delta_w) / RMS(x_out)."""
    w = cfg.weight_sampler.draw(rng, (n, k))
    err, _ = _rounding_errors(w, cfg.bits)
    x = cfg.input_sampler.draw(rng, (n, cfg.n_inputs, k))
    x_out = np.einsum("tik,tk->ti", x, w)
    rms_out = np.sqrt(np.mean(x_out * x_out, axis=1))
    mean_in = x.mean(axis=(1, 2))
    with np.errstate(divide="ignore", invalid="ignore"):
        mssr = mean_in * err.sum(axis=1) / rms_out
    return mssr, rms_out > 0


def mssr_scaling_sim(cfg):
    """Spread of the per-channel MSSR against k, with a log-log least-squares fit."""
    rows = []
    for k, rng in zip(cfg.k_values, _streams(cfg.seed + 1, len(cfg.k_values))):
        vals = []
        redraws = 0
        need = cfg.trials
        # bound the (n, n_inputs, k) input block to ~16 MB
        chunk = max(1, min(cfg.chunk, 2_000_000 // (cfg.n_inputs * k)))
        while need > 0:
            mssr, ok = _mssr_block(rng, cfg, k, min(chunk, need))
            redraws += int(np.sum(~ok))
            if redraws > 10 * cfg.trials:
                raise ValueError(f"k={k}: zero output energy on almost every draw")
            vals.append(mssr[ok])
            need -= int(ok.sum())
        v = np.concatenate(vals)
        rows.append(MssrRow(k, float(v.mean()), float(v.std(ddof=1)), redraws))
    lk = np.log([r.k for r in rows])
    ls = np.log([r.mssr_std for r in rows])
    slope, intercept = np.polyfit(lk, ls, 1) if len(rows) > 1 else (float("nan"), float(ls[0]))
    return MssrScaling(rows, float(slope), float(intercept))
