import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qbias import _pykernels, kernels

try:
    from qbias import _ckernels
except ImportError:  # extension not built
    _ckernels = None

BACKENDS = [_pykernels] + ([_ckernels] if _ckernels is not None else [])
needs_c = pytest.mark.skipif(_ckernels is None, reason="compiled extension not built")


def naive_conv(x, w, stride):
    n, h, wd, _ = x.shape
    kh, kw, _, co = w.shape
    oh, ow = (h - kh) // stride + 1, (wd - kw) // stride + 1
    out = np.zeros((n, oh, ow, co))
    for b in range(n):
        for i in range(oh):
            for j in range(ow):
                patch = x[b, i * stride:i * stride + kh, j * stride:j * stride + kw, :]
                out[b, i, j] = np.tensordot(patch, w, axes=([0, 1, 2], [0, 1, 2]))
    return out


def naive_depthwise(x, w, stride):
    kh, kw, c = w.shape
    return naive_conv(x, w[:, :, :, None] * np.eye(c)[None, None], stride)


shapes = st.tuples(st.integers(1, 3), st.integers(3, 7), st.integers(3, 7), st.integers(1, 4),
                   st.integers(1, 3), st.integers(1, 3), st.integers(1, 2))


@pytest.mark.parametrize("impl", BACKENDS, ids=lambda m: m.__name__.rsplit(".", 1)[-1])
class TestAgainstNaive:
    @settings(max_examples=30, deadline=None)
    @given(shapes, st.integers(1, 4), st.integers(0, 2**32 - 1))
    def test_conv(self, impl, shape, cout, seed):
        n, h, w, c, kh, kw, s = shape
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(n, h, w, c))
        k = rng.normal(size=(kh, kw, c, cout))
        np.testing.assert_allclose(impl.conv2d_forward(x, k, s), naive_conv(x, k, s), rtol=1e-12, atol=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(shapes, st.integers(0, 2**32 - 1))
    def test_depthwise(self, impl, shape, seed):
        n, h, w, c, kh, kw, s = shape
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(n, h, w, c))
        k = rng.normal(size=(kh, kw, c))
        np.testing.assert_allclose(impl.depthwise_forward(x, k, s), naive_depthwise(x, k, s),
                                   rtol=1e-12, atol=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(shapes, st.integers(1, 4), st.integers(0, 2**32 - 1))
    def test_backward_is_adjoint(self, impl, shape, cout, seed):
        # <conv(x), g> == <x, conv^T(g)> for every x, g
        n, h, w, c, kh, kw, s = shape
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(n, h, w, c))
        k = rng.normal(size=(kh, kw, c, cout))
        y = impl.conv2d_forward(x, k, s)
        g = rng.normal(size=y.shape)
        gx = impl.conv2d_backward_input(g, k, s, x.shape)
        assert np.isclose(np.sum(y * g), np.sum(x * gx), rtol=1e-10)

        kd = rng.normal(size=(kh, kw, c))
        yd = impl.depthwise_forward(x, kd, s)
        gd = rng.normal(size=yd.shape)
        gxd = impl.depthwise_backward_input(gd, kd, s, x.shape)
        assert np.isclose(np.sum(yd * gd), np.sum(x * gxd), rtol=1e-10)

    def test_round_half_away(self, impl):
        x = np.array([0.5, -0.5, 1.5, -1.5, 2.5, 0.49999999999999994, -2.4999, 0.0, -0.0, 1e300])
        np.testing.assert_array_equal(impl.round_half_away(x), [1, -1, 2, -2, 3, 0, -2, 0, 0, 1e300])

    def test_fake_quant_mask(self, impl):
        y, mask = impl.fake_quant(np.array([-1.1, -1.0, 0.0, 0.3, 5.0]), 2 / 255, 128.0, 0.0, 255.0)
        np.testing.assert_allclose(y, [-256 / 255, -1.0039215686, 0.0, 0.2980392157, 254 / 255], rtol=1e-9)
        np.testing.assert_array_equal(mask, [0, 1, 1, 1, 0])


@needs_c
@settings(max_examples=40, deadline=None)
@given(shapes, st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_backends_agree(shape, cout, seed):
    # convolutions may differ in the last bit (summation order); rounding must not
    n, h, w, c, kh, kw, s = shape
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, h, w, c))
    k = rng.normal(size=(kh, kw, c, cout))
    kd = rng.normal(size=(kh, kw, c))
    np.testing.assert_allclose(_ckernels.conv2d_forward(x, k, s), _pykernels.conv2d_forward(x, k, s),
                               rtol=1e-13, atol=1e-14)
    np.testing.assert_allclose(_ckernels.depthwise_forward(x, kd, s), _pykernels.depthwise_forward(x, kd, s),
                               rtol=1e-13, atol=1e-14)
    v = rng.normal(size=50) * 100
    np.testing.assert_array_equal(_ckernels.round_half_away(v), _pykernels.round_half_away(v))
    for a, b in zip(_ckernels.fake_quant(v, 0.37, 11.0, 0.0, 255.0), _pykernels.fake_quant(v, 0.37, 11.0, 0.0, 255.0)):
        np.testing.assert_array_equal(a, b)


class TestDispatch:
    def test_backend_name(self):
        assert kernels.BACKEND in ("cython", "python")
        forced = bool(os.environ.get("QBIAS_PURE_PYTHON"))
        assert (kernels.BACKEND == "cython") == (_ckernels is not None and not forced)

    def test_kernel_too_large(self):
        with pytest.raises(ValueError, match="does not fit"):
            kernels.conv2d_forward(np.zeros((1, 2, 2, 1)), np.zeros((3, 3, 1, 1)))

    def test_channel_mismatch(self):
        with pytest.raises(ValueError, match="channels"):
            kernels.depthwise_forward(np.zeros((1, 4, 4, 2)), np.zeros((3, 3, 3)))

    def test_accepts_float32_and_views(self):
        x = np.arange(2 * 6 * 6 * 2, dtype=np.float32).reshape(2, 6, 6, 2)[:, ::2, ::2, :]
        w = np.ones((1, 1, 2, 1), dtype=np.float32)
        np.testing.assert_allclose(kernels.conv2d_forward(x, w)[..., 0], x.sum(axis=-1))

    def test_scalar_shape_preserved(self):
        assert kernels.round_half_away(2.5).shape == ()
        y, mask = kernels.fake_quant(0.3, 0.1, 0, 0, 255)
        assert y.shape == mask.shape == ()
