"""Seeded toy networks and synthetic image sets.

The depthwise toy net mimics a MobileNet block stack at desk scale:
conv stem, two depthwise/pointwise pairs, global average pool and a dense
classifier, all with batch norms that are set from data statistics the way
a trained network's running statistics would be. Per-channel output spreads
vary widely, so folding produces the uneven per-channel weight ranges that
make layerwise quantization of depthwise kernels lossy.
"""
from __future__ import annotations

import numpy as np

from .nn import BatchNorm, Graph, LayerSpec, forward

IMAGE_SHAPE = (12, 12, 3)
N_CLASSES = 10


def synthetic_images(n, seed, shape=IMAGE_SHAPE):
    """Smooth random images in [0, 1]: upsampled low-resolution noise plus grain."""
    rng = np.random.default_rng(seed)
    h, w, c = shape
    coarse = rng.uniform(0.0, 1.0, (n, 4, 4, c))
    ys = np.linspace(0, 3, h)
    xs = np.linspace(0, 3, w)
    y0 = np.minimum(ys.astype(int), 2)
    x0 = np.minimum(xs.astype(int), 2)
    fy = (ys - y0)[None, :, None, None]
    fx = (xs - x0)[None, None, :, None]
    top = coarse[:, y0][:, :, x0] * (1 - fx) + coarse[:, y0][:, :, x0 + 1] * fx
    bot = coarse[:, y0 + 1][:, :, x0] * (1 - fx) + coarse[:, y0 + 1][:, :, x0 + 1] * fx
    img = top * (1 - fy) + bot * fy
    img = img + rng.normal(0.0, 0.05, img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32).astype(np.float64)


def _set_bn(graph, idx, data, rng, mean_range, std_range):
    """Give layer ``idx`` a batch norm whose statistics come from ``data``."""
    layer = graph.layers[idx]
    layer.bn = None
    _, trace = forward(graph, data, capture=True, stop_after=idx)
    z = trace.pre[idx].reshape(-1, trace.pre[idx].shape[-1])
    c = z.shape[1]
    target_std = np.exp(rng.uniform(np.log(std_range[0]), np.log(std_range[1]), c))
    layer.bn = BatchNorm(
        gamma=target_std,
        beta=rng.uniform(*mean_range, c),
        mean=z.mean(axis=0),
        var=z.var(axis=0),
        eps=1e-3,
    )


def depthwise_toy_net(seed=0, width=(8, 16), activation="ReLU6", logit_scale=3.0,
                      mean_range=(0.2, 1.0), std_range=(0.05, 0.6), dead_channel=True):
    """Seven-layer depthwise-separable classifier on 12x12x3 inputs, with batch norms.

    ``mean_range``/``std_range`` set the per-channel post-norm statistics;
    means near zero make ReLU6 clip heavily. With ``dead_channel`` the first
    pointwise layer gets one channel whose output is constantly zero.
    """
    rng = np.random.default_rng(seed)
    c1, c2 = width
    cin = IMAGE_SHAPE[2]

    def he(shape, fan_in):
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), shape)

    layers = [
        LayerSpec("Conv2D", [-1], he((3, 3, cin, c1), 9 * cin), np.zeros(c1), activation, name="stem"),
        LayerSpec("DepthwiseConv2D", [0], he((3, 3, c1, 1), 9), np.zeros(c1), activation, name="dw1"),
        LayerSpec("Conv2D", [1], he((1, 1, c1, c2), c1), np.zeros(c2), activation, name="pw1"),
        LayerSpec("DepthwiseConv2D", [2], he((3, 3, c2, 1), 9), np.zeros(c2), activation, name="dw2"),
        LayerSpec("Conv2D", [3], he((1, 1, c2, c2), c2), np.zeros(c2), activation, name="pw2"),
        LayerSpec("AvgPool", [4], name="pool"),
        LayerSpec("Dense", [5], he((c2, N_CLASSES), c2), rng.normal(0.0, 0.1, N_CLASSES), None, name="logits"),
    ]
    graph = Graph(layers, IMAGE_SHAPE)
    stats_data = synthetic_images(128, seed + 1000)
    for idx in range(5):
        _set_bn(graph, idx, stats_data, rng, mean_range, std_range)
    if dead_channel:
        graph.layers[2].bn.gamma[0] = 0.0
        graph.layers[2].bn.beta[0] = -1.0
    # spread logits so the teacher is confident
    _, trace = forward(graph, stats_data, capture=True)
    feats = trace.post[5].reshape(len(stats_data), -1)
    centred = feats - feats.mean(axis=0)
    w = graph.layers[6].weights
    spread = (centred @ w).std()
    graph.layers[6].weights = w * (logit_scale / spread)
    graph.layers[6].bias = graph.layers[6].bias - feats.mean(axis=0) @ graph.layers[6].weights
    return graph


FIXTURE_NETS = {
    "depthwise": {},
    "relu6-clipped": {"mean_range": (-0.5, 1.0)},
}


def fixture_net(name, seed):
    return depthwise_toy_net(seed, **FIXTURE_NETS[name])


def fixture_set(seed=0):
    """Data splits used by the acceptance suite and the ``gen-fixtures`` command."""
    return {
        "calib": synthetic_images(64, seed + 1),
        "tune": synthetic_images(512, seed + 2),
        "heldout": synthetic_images(256, seed + 3),
    }


def teacher_labels(graph, data):
    logits, _ = forward(graph, data)
    return np.argmax(logits.reshape(len(data), -1), axis=1)
