"""Teacher-student evaluation helpers."""
import numpy as np

from .nn import forward
from .quant import forward_quant


def log_softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits):
    return np.exp(log_softmax(logits))


def distillation_loss(teacher_logits, student_logits):
    """Batch-mean cross-entropy of student log-softmax against teacher softmax.

    Returns (loss, dloss/dstudent_logits).
    """
    t = np.asarray(teacher_logits, dtype=np.float64)
    s = np.asarray(student_logits, dtype=np.float64)
    if t.shape != s.shape:
        raise ValueError(f"logit shapes differ: {t.shape} vs {s.shape}")
    if not (np.all(np.isfinite(t)) and np.all(np.isfinite(s))):
        raise FloatingPointError("non-finite logits")
    t = t.reshape(t.shape[0], -1)
    s2 = s.reshape(s.shape[0], -1)
    n = t.shape[0]
    p_t = softmax(t)
    log_p_s = log_softmax(s2)
    loss = float(-np.sum(p_t * log_p_s) / n)
    grad = (np.exp(log_p_s) - p_t) / n
    return loss, grad.reshape(s.shape)


def _batched(fn, data, chunk):
    return np.concatenate([fn(data[i:i + chunk]) for i in range(0, len(data), chunk)])


def fp_logits(graph, data, chunk=256):
    return _batched(lambda b: forward(graph, b)[0], data, chunk)


def quant_logits(qmodel, data, biases=None, chunk=256):
    return _batched(lambda b: forward_quant(qmodel, b, biases=biases)[0], data, chunk)


def teacher_student_ce(fp_graph, qmodel, data, biases=None, teacher=None):
    """Cross-entropy of the quantized net against the full-precision net on ``data``."""
    if teacher is None:
        teacher = fp_logits(fp_graph, data)
    return distillation_loss(teacher, quant_logits(qmodel, data, biases))[0]


def top1(logits, labels):
    pred = np.argmax(logits.reshape(len(logits), -1), axis=1)
    return float(np.mean(pred == np.asarray(labels)))
