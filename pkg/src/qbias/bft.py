"""Bias fine-tuning: bias-only, label-free micro-training of the quantized net.

The student is the fake-quantized net with its weights frozen on their
grids; the teacher is the full-precision net. Gradients flow through the
activation quantizers as a clipped straight-through estimator and only the
biases are updated (Adam). Biases are trained in full precision and
re-quantized onto their 16-bit grids at the end.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .metrics import distillation_loss, fp_logits, quant_logits
from .nn import backward_bias_grads, forward

log = logging.getLogger(__name__)

DEFAULT_SCHEDULE = ((1e-3, 16), (1e-4, 16), (1e-5, 16), (1e-6, 16))

__all__ = ["BftConfig", "TrainState", "BftHistory", "bft_run", "bft_step",
           "distillation_loss", "parse_schedule", "DEFAULT_SCHEDULE"]


def parse_schedule(text):
    """Parse "1e-3x16,1e-4x16" into ((0.001, 16), (0.0001, 16))."""
    text = text.strip()
    if not text:
        return ()
    out = []
    for part in text.split(","):
        lr, _, epochs = part.strip().partition("x")
        out.append((float(lr), int(epochs)))
    return tuple(out)


@dataclass
class BftConfig:
    tuning_set: np.ndarray
    lr_schedule: tuple = DEFAULT_SCHEDULE
    minibatch_size: int = 32
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        for lr, epochs in self.lr_schedule:
            if epochs < 1 or not lr > 0:
                raise ValueError(f"bad schedule entry ({lr}, {epochs})")
        if not 1 <= self.minibatch_size <= len(self.tuning_set):
            raise ValueError(f"minibatch size {self.minibatch_size} vs tuning set of {len(self.tuning_set)}")


@dataclass
class TrainState:
    biases: dict
    m: dict
    v: dict
    step: int = 0
    loss_history: list = field(default_factory=list)

    @classmethod
    def start(cls, biases):
        biases = {k: np.array(b, dtype=np.float64) for k, b in biases.items()}
        return cls(biases, {k: np.zeros_like(b) for k, b in biases.items()},
                   {k: np.zeros_like(b) for k, b in biases.items()})


@dataclass
class BftHistory:
    step_losses: list
    boundary_losses: list  # tuning-set loss before training and after each schedule phase
    initial_loss: float
    final_loss: float  # after 16-bit re-quantization
    prequant_loss: float  # same biases in full precision


def bft_step(qmodel, state, minibatch, teacher_logits, lr, cfg):
    """One Adam update of the biases on ``minibatch``. Mutates and returns ``state``."""
    graph = qmodel.effective_graph(state.biases)
    logits, trace = forward(graph, minibatch, capture=True, act_hook=qmodel.activation_hook())
    loss, dlogits = distillation_loss(teacher_logits, logits)
    if not np.isfinite(loss):
        raise FloatingPointError(f"non-finite loss at step {state.step}")
    grads = backward_bias_grads(graph, trace, dlogits)
    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    for k, g in grads.items():
        state.m[k] = b1 * state.m[k] + (1 - b1) * g
        state.v[k] = b2 * state.v[k] + (1 - b2) * g * g
        m_hat = state.m[k] / (1 - b1 ** t)
        v_hat = state.v[k] / (1 - b2 ** t)
        state.biases[k] = state.biases[k] - lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
    state.loss_history.append(loss)
    return state


def _tuning_loss(qmodel, data, teacher, biases):
    return distillation_loss(teacher, quant_logits(qmodel, data, biases))[0]


def bft_run(fp_graph, qmodel, cfg):
    """Fine-tune the biases of ``qmodel``. Returns (tuned model, BftHistory).

    One mini-epoch is a full pass over the tuning set in a fresh seeded
    shuffle order.
    """
    data = np.asarray(cfg.tuning_set, dtype=np.float64)
    teacher = fp_logits(fp_graph, data)
    state = TrainState.start(qmodel.biases())
    initial = _tuning_loss(qmodel, data, teacher, state.biases)
    if not cfg.lr_schedule:
        return qmodel.copy(), BftHistory([], [initial], initial, initial, initial)
    rng = np.random.default_rng(cfg.seed)
    boundaries = [initial]
    n, mb = len(data), cfg.minibatch_size
    for lr, epochs in cfg.lr_schedule:
        for _ in range(epochs):
            perm = rng.permutation(n)
            for start in range(0, n, mb):
                idx = perm[start:start + mb]
                bft_step(qmodel, state, data[idx], teacher[idx], lr, cfg)
        boundaries.append(_tuning_loss(qmodel, data, teacher, state.biases))
        log.info("lr %g: tuning loss %.6g", lr, boundaries[-1])
    tuned, clipped = qmodel.with_biases(state.biases, requantize=True)
    if any(clipped.values()):
        log.warning("bias codes clipped on re-quantization: %s", {k: v for k, v in clipped.items() if v})
    final = _tuning_loss(tuned, data, teacher, None)
    if final > initial:
        log.warning("tuning loss rose from %.6g to %.6g", initial, final)
    return tuned, BftHistory(state.loss_history, boundaries, initial, final, boundaries[-1])
