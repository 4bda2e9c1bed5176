"""Per-channel quantization error statistics and layer summaries.

For each (layer, channel) the error is e = x_q - x over every pixel of every
image. Reported: the mean activation shift E(e), signal energy E(x^2), error
energy E(e^2), rqnsr = sqrt(E(e^2)/E(x^2)) and mssr = E(e)/sqrt(E(x^2)).
Expectations are population means (no Bessel correction).
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

CSV_FORMAT = "%.9g"


class StatsError(ValueError):
    pass


@dataclass
class ChannelStats:
    layer: int
    channel: int
    n_samples: int
    mas: float
    signal_energy: float
    error_energy: float
    mssr: float
    rqnsr: float
    degenerate: bool = False


@dataclass
class LayerSummary:
    layer: int
    n_channels: int
    mas_rms: float
    mssr_rms: float
    rqnsr_rms: float
    mean_ratio: float  # mssr_rms / rqnsr_rms


def mse_decomposition(e):
    """Split the mean squared error into (mean^2, population variance, mse)."""
    e = np.asarray(e, dtype=np.float64).ravel()
    if e.size == 0:
        raise StatsError("empty error vector")
    mean = e.mean()
    var = np.mean((e - mean) ** 2)
    return float(mean * mean), float(var), float(np.mean(e * e))


def channel_stats_from_arrays(x, xq, layer=0):
    """Statistics for every channel (last axis) of a pair of activation tensors."""
    x = np.asarray(x, dtype=np.float64)
    xq = np.asarray(xq, dtype=np.float64)
    if x.shape != xq.shape:
        raise StatsError(f"layer {layer}: trace shapes differ {x.shape} vs {xq.shape}")
    c = x.shape[-1]
    x2 = x.reshape(-1, c)
    e = xq.reshape(-1, c) - x2
    n = x2.shape[0]
    mas = e.mean(axis=0)
    sig = np.mean(x2 * x2, axis=0)
    err = np.mean(e * e, axis=0)
    out = []
    for ch in range(c):
        if sig[ch] > 0.0:
            root = math.sqrt(sig[ch])
            mssr, rqnsr, degenerate = mas[ch] / root, math.sqrt(err[ch] / sig[ch]), False
        else:
            mssr, rqnsr, degenerate = 0.0, 0.0, True
        out.append(ChannelStats(layer, ch, n, float(mas[ch]), float(sig[ch]), float(err[ch]),
                                float(mssr), float(rqnsr), degenerate))
    return out


def compute_channel_stats(fp_trace, q_trace, where="post", layers=None):
    """ChannelStats for every layer (or the given ``layers``) of two paired traces."""
    if where not in ("pre", "post"):
        raise StatsError(f"where must be 'pre' or 'post', got {where!r}")
    fp = getattr(fp_trace, where)
    q = getattr(q_trace, where)
    if len(fp) != len(q):
        raise StatsError(f"traces cover {len(fp)} and {len(q)} layers")
    idxs = range(len(fp)) if layers is None else layers
    out = []
    for idx in idxs:
        out.extend(channel_stats_from_arrays(fp[idx], q[idx], layer=idx))
    return out


def _rms(values):
    v = np.asarray(values, dtype=np.float64)
    return float(np.sqrt(np.mean(v * v)))


def aggregate_layers(stats):
    """RMS over channels of mas, mssr and rqnsr for each layer."""
    by_layer = {}
    for s in stats:
        by_layer.setdefault(s.layer, []).append(s)
    out = []
    for layer in sorted(by_layer):
        rows = by_layer[layer]
        mssr = _rms([r.mssr for r in rows])
        rqnsr = _rms([r.rqnsr for r in rows])
        out.append(LayerSummary(layer, len(rows), _rms([r.mas for r in rows]), mssr, rqnsr,
                                mssr / rqnsr if rqnsr > 0 else 0.0))
    return out


# --- report files --------------------------------------------------------------


def _fmt(v):
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, str):
        return v
    return CSV_FORMAT % v


def format_csv(names, rows):
    """CSV text with floats at 9 significant digits; ``rows`` are sequences or dicts."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(names)
    for r in rows:
        values = [r[n] for n in names] if isinstance(r, dict) else r
        w.writerow([_fmt(v) for v in values])
    return buf.getvalue()


def rows_to_csv(rows, cls):
    names = [f.name for f in fields(cls)]
    return format_csv(names, [asdict(r) for r in rows])


def csv_to_rows(text, cls):
    types = {f.name: f.type for f in fields(cls)}
    out = []
    for rec in csv.DictReader(io.StringIO(text)):
        kw = {}
        for name, raw in rec.items():
            t = types[name]
            if t in ("bool", bool):
                kw[name] = raw == "1"
            elif t in ("int", int):
                kw[name] = int(raw)
            else:
                kw[name] = float(raw)
        out.append(cls(**kw))
    return out


def summary_document(stats, summaries):
    """Machine-readable digest of an analysis run."""
    worst = max(summaries, key=lambda s: s.mean_ratio) if summaries else None
    return {
        "n_channels": len(stats),
        "n_degenerate": sum(s.degenerate for s in stats),
        "layers": [asdict(s) for s in summaries],
        "max_mean_ratio_layer": None if worst is None else worst.layer,
    }
