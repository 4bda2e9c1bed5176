"""Numpy reference kernels.

All arrays are float64, NHWC for activations. Inputs to the convolution
kernels are already padded; padding is resolved by the caller.
"""
import numpy as np


def _out_size(n, k, stride):
    return (n - k) // stride + 1


def conv2d_forward(x, w, stride):
    """Direct convolution. x: (B, H, W, Cin), w: (kh, kw, Cin, Cout)."""
    b, h, wd, _ = x.shape
    kh, kw, _, cout = w.shape
    ho, wo = _out_size(h, kh, stride), _out_size(wd, kw, stride)
    out = np.zeros((b, ho, wo, cout))
    for i in range(kh):
        for j in range(kw):
            patch = x[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :]
            out += patch @ w[i, j]
    return out


def conv2d_backward_input(gout, w, stride, in_shape):
    b, ho, wo, _ = gout.shape
    kh, kw, _, _ = w.shape
    gx = np.zeros(in_shape)
    for i in range(kh):
        for j in range(kw):
            gx[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :] += gout @ w[i, j].T
    return gx


def depthwise_forward(x, w, stride):
    """Depthwise convolution, multiplier 1. x: (B, H, W, C), w: (kh, kw, C)."""
    b, h, wd, c = x.shape
    kh, kw, _ = w.shape
    ho, wo = _out_size(h, kh, stride), _out_size(wd, kw, stride)
    out = np.zeros((b, ho, wo, c))
    for i in range(kh):
        for j in range(kw):
            out += x[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :] * w[i, j]
    return out


def depthwise_backward_input(gout, w, stride, in_shape):
    _, ho, wo, _ = gout.shape
    kh, kw, _ = w.shape
    gx = np.zeros(in_shape)
    for i in range(kh):
        for j in range(kw):
            gx[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :] += gout * w[i, j]
    return gx


def round_half_away(x):
    x = np.asarray(x, dtype=np.float64)
    t = np.trunc(x)
    # x - t is exact in binary floating point, so the tie test is exact too
    return t + np.sign(x) * (np.abs(x - t) >= 0.5)


def fake_quant(x, scale, zero_point, qmin, qmax):
    """Quantize-dequantize onto a uniform grid; returns (y, in_range_mask)."""
    x = np.asarray(x, dtype=np.float64)
    q = round_half_away(x / scale) + zero_point
    y = (np.clip(q, qmin, qmax) - zero_point) * scale
    lo = (qmin - zero_point) * scale
    hi = (qmax - zero_point) * scale
    return y, (x >= lo) & (x <= hi)
