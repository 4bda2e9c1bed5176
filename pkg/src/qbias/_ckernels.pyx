# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled direct-convolution and fake-quant kernels.

Same contracts as ``qbias._pykernels``. Loops run in a fixed order so
results are reproducible run to run.
"""
import numpy as np

from libc.math cimport round as c_round


def conv2d_forward(const double[:, :, :, ::1] x, const double[:, :, :, ::1] w, int stride):
    cdef Py_ssize_t b = x.shape[0], h = x.shape[1], wd = x.shape[2], cin = x.shape[3]
    cdef Py_ssize_t kh = w.shape[0], kw = w.shape[1], cout = w.shape[3]
    cdef Py_ssize_t ho = (h - kh) // stride + 1, wo = (wd - kw) // stride + 1
    out_arr = np.zeros((b, ho, wo, cout))
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t n, oy, ox, i, j, ci, co, iy, ix
    cdef double xv
    cdef double *orow
    cdef const double *wrow
    with nogil:
        for n in range(b):
            for oy in range(ho):
                for ox in range(wo):
                    orow = &out[n, oy, ox, 0]
                    for i in range(kh):
                        iy = oy * stride + i
                        for j in range(kw):
                            ix = ox * stride + j
                            for ci in range(cin):
                                xv = x[n, iy, ix, ci]
                                wrow = &w[i, j, ci, 0]
                                for co in range(cout):
                                    orow[co] += xv * wrow[co]
    return out_arr


def conv2d_backward_input(const double[:, :, :, ::1] gout, const double[:, :, :, ::1] w,
                          int stride, tuple in_shape):
    cdef Py_ssize_t b = gout.shape[0], ho = gout.shape[1], wo = gout.shape[2], cout = gout.shape[3]
    cdef Py_ssize_t kh = w.shape[0], kw = w.shape[1], cin = w.shape[2]
    gx_arr = np.zeros(in_shape)
    cdef double[:, :, :, ::1] gx = gx_arr
    cdef Py_ssize_t n, oy, ox, i, j, ci, co, iy, ix
    cdef double acc
    with nogil:
        for n in range(b):
            for oy in range(ho):
                for ox in range(wo):
                    for i in range(kh):
                        iy = oy * stride + i
                        for j in range(kw):
                            ix = ox * stride + j
                            for ci in range(cin):
                                acc = 0.0
                                for co in range(cout):
                                    acc = acc + gout[n, oy, ox, co] * w[i, j, ci, co]
                                gx[n, iy, ix, ci] += acc
    return gx_arr


def depthwise_forward(const double[:, :, :, ::1] x, const double[:, :, ::1] w, int stride):
    cdef Py_ssize_t b = x.shape[0], h = x.shape[1], wd = x.shape[2], c = x.shape[3]
    cdef Py_ssize_t kh = w.shape[0], kw = w.shape[1]
    cdef Py_ssize_t ho = (h - kh) // stride + 1, wo = (wd - kw) // stride + 1
    out_arr = np.zeros((b, ho, wo, c))
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t n, oy, ox, i, j, ch, iy, ix
    with nogil:
        for n in range(b):
            for oy in range(ho):
                for ox in range(wo):
                    for i in range(kh):
                        iy = oy * stride + i
                        for j in range(kw):
                            ix = ox * stride + j
                            for ch in range(c):
                                out[n, oy, ox, ch] += x[n, iy, ix, ch] * w[i, j, ch]
    return out_arr


def depthwise_backward_input(const double[:, :, :, ::1] gout, const double[:, :, ::1] w,
                             int stride, tuple in_shape):
    cdef Py_ssize_t b = gout.shape[0], ho = gout.shape[1], wo = gout.shape[2], c = gout.shape[3]
    cdef Py_ssize_t kh = w.shape[0], kw = w.shape[1]
    gx_arr = np.zeros(in_shape)
    cdef double[:, :, :, ::1] gx = gx_arr
    cdef Py_ssize_t n, oy, ox, i, j, ch, iy, ix
    with nogil:
        for n in range(b):
            for oy in range(ho):
                for ox in range(wo):
                    for i in range(kh):
                        iy = oy * stride + i
                        for j in range(kw):
                            ix = ox * stride + j
                            for ch in range(c):
                                gx[n, iy, ix, ch] += gout[n, oy, ox, ch] * w[i, j, ch]
    return gx_arr


def round_half_away(x):
    arr = np.ascontiguousarray(x, dtype=np.float64)
    out_arr = np.empty_like(arr)
    cdef const double[::1] src = arr.reshape(-1)
    cdef double[::1] dst = out_arr.reshape(-1)
    cdef Py_ssize_t k
    with nogil:
        for k in range(src.shape[0]):
            dst[k] = c_round(src[k])
    return out_arr


def fake_quant(x, double scale, double zero_point, double qmin, double qmax):
    arr = np.ascontiguousarray(x, dtype=np.float64)
    y_arr = np.empty_like(arr)
    mask_arr = np.empty(arr.shape, dtype=np.bool_)
    cdef const double[::1] src = arr.reshape(-1)
    cdef double[::1] dst = y_arr.reshape(-1)
    cdef unsigned char[::1] mask = mask_arr.reshape(-1).view(np.uint8)
    cdef double lo = (qmin - zero_point) * scale
    cdef double hi = (qmax - zero_point) * scale
    cdef double q, v
    cdef Py_ssize_t k
    with nogil:
        for k in range(src.shape[0]):
            v = src[k]
            q = c_round(v / scale) + zero_point
            if q < qmin:
                q = qmin
            elif q > qmax:
                q = qmax
            dst[k] = (q - zero_point) * scale
            mask[k] = lo <= v <= hi
    return y_arr, mask_arr
