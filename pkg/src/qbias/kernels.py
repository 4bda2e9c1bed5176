"""Hot-loop kernels, dispatched to the compiled extension when it is available.

Set ``QBIAS_PURE_PYTHON=1`` to force the numpy implementation.
"""
import os

import numpy as np

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if not os.environ.get("QBIAS_PURE_PYTHON"):
    try:
        from . import _ckernels as _impl  # noqa: F811

        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels


def _c64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def _check(x, w, stride):
    if x.ndim != 4 or w.ndim not in (3, 4):
        raise ValueError(f"bad ranks: input {x.shape}, kernel {w.shape}")
    if x.shape[3] != w.shape[2]:
        raise ValueError(f"kernel expects {w.shape[2]} channels, input has {x.shape[3]}")
    if x.shape[1] < w.shape[0] or x.shape[2] < w.shape[1] or stride < 1:
        raise ValueError(f"kernel {w.shape[:2]} does not fit input {x.shape[1:3]} at stride {stride}")


def conv2d_forward(x, w, stride=1):
    x, w = _c64(x), _c64(w)
    _check(x, w, stride)
    # matmul per tap hits BLAS, which beats the compiled loop for dense conv
    return _pykernels.conv2d_forward(x, w, int(stride))


def conv2d_backward_input(gout, w, stride, in_shape):
    return _pykernels.conv2d_backward_input(_c64(gout), _c64(w), int(stride), tuple(in_shape))


def depthwise_forward(x, w, stride=1):
    x, w = _c64(x), _c64(w)
    _check(x, w, stride)
    return _impl.depthwise_forward(_c64(x), _c64(w), int(stride))


def depthwise_backward_input(gout, w, stride, in_shape):
    return _impl.depthwise_backward_input(_c64(gout), _c64(w), int(stride), tuple(in_shape))


def round_half_away(x):
    x = np.asarray(x, dtype=np.float64)
    return _impl.round_half_away(x).reshape(x.shape)


def fake_quant(x, scale, zero_point, qmin, qmax):
    x = np.asarray(x, dtype=np.float64)
    y, mask = _impl.fake_quant(x, float(scale), float(zero_point), float(qmin), float(qmax))
    return y.reshape(x.shape), mask.reshape(x.shape)
