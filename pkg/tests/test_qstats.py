import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from qbias.nn import ActivationTrace
from qbias.qstats import (ChannelStats, LayerSummary, StatsError, aggregate_layers, channel_stats_from_arrays,
                          compute_channel_stats, csv_to_rows, format_csv, mse_decomposition, rows_to_csv,
                          summary_document)

errors = arrays(np.float64, st.integers(1, 200), elements=st.floats(-1e3, 1e3))


def traces(x, xq):
    return (ActivationTrace(None, pre=[x], post=[x]), ActivationTrace(None, pre=[xq], post=[xq]))


class TestDecomposition:
    def test_hand_example(self):
        assert mse_decomposition([1, 1, 1, 3]) == pytest.approx((2.25, 0.75, 3.0))

    def test_zero(self):
        assert mse_decomposition(np.zeros(5)) == (0.0, 0.0, 0.0)

    def test_constant(self):
        m2, var, mse = mse_decomposition(np.full(7, -0.3))
        assert m2 == pytest.approx(0.09) and var == pytest.approx(0.0, abs=1e-30) and mse == pytest.approx(0.09)

    def test_empty(self):
        with pytest.raises(StatsError):
            mse_decomposition([])

    @settings(max_examples=300, deadline=None)
    @given(errors)
    def test_identity(self, e):
        m2, var, mse = mse_decomposition(e)
        assert m2 + var == pytest.approx(mse, rel=1e-9, abs=1e-300)


class TestChannelStats:
    def test_identity(self, rng):
        x = rng.normal(size=(2, 3, 3, 4))
        for s in channel_stats_from_arrays(x, x):
            assert s.mas == 0 and s.mssr == 0 and s.rqnsr == 0 and s.error_energy == 0

    def test_hand_example(self):
        (s,) = channel_stats_from_arrays(np.array([[1.0], [2.0], [3.0]]), np.array([[1.5], [2.5], [2.5]]))
        assert s.n_samples == 3
        assert s.mas == pytest.approx(1 / 6)
        assert s.error_energy == pytest.approx(0.25)
        assert s.signal_energy == pytest.approx(14 / 3)
        assert s.rqnsr == pytest.approx(0.2315, abs=1e-4)
        assert s.mssr == pytest.approx(0.0772, abs=1e-4)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(-5, 5).filter(lambda c: abs(c) > 1e-3), st.integers(0, 2**32 - 1))
    def test_pure_shift(self, c, seed):
        x = np.random.default_rng(seed).normal(size=(4, 5, 5, 3))
        for s in channel_stats_from_arrays(x, x + c):
            assert s.mas == pytest.approx(c)
            assert s.error_energy == pytest.approx(c * c)
            assert s.mssr / s.rqnsr == pytest.approx(math.copysign(1, c))

    def test_degenerate_channel(self):
        x = np.zeros((4, 2))
        x[:, 1] = 1.0
        s0, s1 = channel_stats_from_arrays(x, x + 0.5)
        assert s0.degenerate and s0.mssr == 0 and s0.rqnsr == 0 and s0.mas == 0.5
        assert not s1.degenerate

    def test_shape_mismatch(self):
        with pytest.raises(StatsError):
            channel_stats_from_arrays(np.zeros((2, 3)), np.zeros((3, 3)))

    def test_where(self, rng):
        pre, post = rng.normal(size=(2, 4)), rng.normal(size=(2, 4))
        fp = ActivationTrace(None, pre=[pre], post=[post])
        q = ActivationTrace(None, pre=[pre + 1], post=[post])
        assert all(s.mas == pytest.approx(1) for s in compute_channel_stats(fp, q, where="pre"))
        assert all(s.mas == 0 for s in compute_channel_stats(fp, q, where="post"))
        with pytest.raises(StatsError):
            compute_channel_stats(fp, q, where="mid")

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_invariants(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(3, 4, 4, 5))
        xq = x + rng.normal(0.1, 0.3, x.shape)
        for s in compute_channel_stats(*traces(x, xq)):
            assert s.error_energy >= s.mas ** 2
            assert s.signal_energy >= 0
            assert s.mssr ** 2 <= s.rqnsr ** 2 + 1e-12
            e = (xq - x)[..., s.channel].ravel()
            assert s.error_energy - s.mas ** 2 == pytest.approx(np.var(e), rel=1e-9)

    def test_duplicated_batch_unchanged(self, rng):
        x = rng.normal(size=(3, 4, 4, 2))
        xq = x + rng.normal(size=x.shape) * 0.1
        a = channel_stats_from_arrays(x, xq)
        b = channel_stats_from_arrays(np.concatenate([x, x]), np.concatenate([xq, xq]))
        for sa, sb in zip(a, b):
            assert sb.n_samples == 2 * sa.n_samples
            for f in ("mas", "signal_energy", "error_energy", "mssr", "rqnsr"):
                assert getattr(sb, f) == pytest.approx(getattr(sa, f), rel=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(1e-3, 1e3), st.integers(0, 2**32 - 1))
    def test_scale_equivariance(self, a, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(2, 3, 3, 2))
        xq = x + rng.normal(size=x.shape) * 0.1
        for s1, s2 in zip(channel_stats_from_arrays(x, xq), channel_stats_from_arrays(a * x, a * xq)):
            assert s2.mssr == pytest.approx(s1.mssr, rel=1e-9)
            assert s2.rqnsr == pytest.approx(s1.rqnsr, rel=1e-9)
            assert s2.mas == pytest.approx(a * s1.mas, rel=1e-9)


class TestAggregate:
    def stat(self, layer, ch, mssr, rqnsr, mas=0.0):
        return ChannelStats(layer, ch, 10, mas, 1.0, rqnsr ** 2, mssr, rqnsr)

    def test_single_channel(self):
        (s,) = aggregate_layers([self.stat(0, 0, 0.2, 0.5, mas=-0.1)])
        assert (s.mas_rms, s.mssr_rms, s.rqnsr_rms) == pytest.approx((0.1, 0.2, 0.5))

    def test_two_channel_rms(self):
        (s,) = aggregate_layers([self.stat(0, 0, 0.3, 1.0), self.stat(0, 1, 0.4, 1.0)])
        assert s.mssr_rms == pytest.approx(0.3536, abs=1e-4)
        assert s.n_channels == 2

    def test_pure_shift_ratio(self):
        stats = [self.stat(1, c, v, v) for c, v in enumerate([0.1, 0.5, 0.2])]
        assert aggregate_layers(stats)[0].mean_ratio == pytest.approx(1.0)

    def test_grouped_by_layer(self):
        stats = [self.stat(2, 0, 0.1, 0.2), self.stat(0, 0, 0.3, 0.4), self.stat(2, 1, 0.1, 0.2)]
        assert [s.layer for s in aggregate_layers(stats)] == [0, 2]


class TestReports:
    def test_round_trip(self, rng):
        x = rng.normal(size=(2, 3, 3, 4))
        stats = channel_stats_from_arrays(x, x + rng.normal(size=x.shape) * 0.01, layer=3)
        stats.append(ChannelStats(3, 4, 18, 0.0, 0.0, 0.0, 0.0, 0.0, True))
        back = csv_to_rows(rows_to_csv(stats, ChannelStats), ChannelStats)
        assert len(back) == len(stats)
        for a, b in zip(stats, back):
            assert (a.layer, a.channel, a.n_samples, a.degenerate) == (b.layer, b.channel, b.n_samples, b.degenerate)
            for f in ("mas", "signal_energy", "error_energy", "mssr", "rqnsr"):
                assert float("%.9g" % getattr(a, f)) == getattr(b, f)

    def test_layer_round_trip(self):
        rows = [LayerSummary(0, 3, 0.1, 0.2, 0.3, 2 / 3)]
        assert csv_to_rows(rows_to_csv(rows, LayerSummary), LayerSummary)[0].mean_ratio == float("%.9g" % (2 / 3))

    def test_format(self):
        text = format_csv(["a", "b", "c", "d"], [[1, 0.1 + 0.2, True, "Conv2D"]])
        assert text == "a,b,c,d\n1,0.3,1,Conv2D\n"
        assert format_csv(["x"], [[1234567890.123]]) == "x\n1.23456789e+09\n"

    def test_summary_document(self):
        stats = [ChannelStats(0, 0, 1, 0, 0, 0, 0, 0, True)]
        layers = [LayerSummary(0, 1, 0, 0.1, 0.2, 0.5), LayerSummary(1, 1, 0, 0.3, 0.3, 1.0)]
        doc = summary_document(stats, layers)
        assert doc["n_degenerate"] == 1 and doc["max_mean_ratio_layer"] == 1
