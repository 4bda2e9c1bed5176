import numpy as np
import pytest

from qbias.nn import BatchNorm, Graph, LayerSpec, forward
from qbias.quant import quantize_model


def random_graph(rng, kind=None):
    """Small random graph (at most four layers, eight channels) ending in a Dense layer.

    ``kind`` forces the middle block to one of the supported layer kinds.
    """
    c = int(rng.integers(2, 5))
    shape = (5, 5, c)
    kind = kind or rng.choice(["Conv2D", "DepthwiseConv2D", "AvgPool", "Add", "Concat"])
    act = lambda: rng.choice([None, "ReLU", "ReLU6"])  # noqa: E731

    def conv(src, cin, cout, k=3, **kw):
        return LayerSpec("Conv2D", [src], rng.normal(0, 0.5, (k, k, cin, cout)), rng.normal(0, 0.3, cout),
                         act(), **kw)

    layers = [conv(-1, c, 4, padding="same")]
    if kind == "Conv2D":
        layers.append(conv(0, 4, 6, stride=2))
        feat = 6 * 2 * 2
    elif kind == "DepthwiseConv2D":
        layers.append(LayerSpec("DepthwiseConv2D", [0], rng.normal(0, 0.5, (3, 3, 4, 1)), rng.normal(0, 0.3, 4),
                                act(), padding="same",
                                bn=BatchNorm(rng.uniform(0.5, 2, 4), rng.normal(0, 0.2, 4),
                                             rng.normal(0, 0.2, 4), rng.uniform(0.5, 2, 4))))
        feat = 4 * 25
    elif kind == "AvgPool":
        layers.append(LayerSpec("AvgPool", [0], pool_size=2))
        feat = 4 * 4
    elif kind == "Add":
        layers.append(conv(0, 4, 4, k=1))
        layers.append(LayerSpec("Add", [0, 1]))
        feat = 4 * 25
    else:
        layers.append(conv(-1, c, 3, k=1))
        layers.append(LayerSpec("Concat", [0, 1]))
        feat = 7 * 25
    layers.append(LayerSpec("Dense", [len(layers) - 1], rng.normal(0, 0.3, (feat, 3)), rng.normal(0, 0.3, 3)))
    return Graph(layers, shape)


def near_kink(graph, batch, margin=1e-3):
    """True if any pre-activation sits within ``margin`` of a ReLU/ReLU6 corner."""
    _, trace = forward(graph, batch, capture=True)
    for layer, pre in zip(graph.layers, trace.pre):
        if layer.activation and (np.min(np.abs(pre)) < margin or np.min(np.abs(pre - 6.0)) < margin):
            return True
    return False


def linear_net(w, b, n_in):
    return Graph([LayerSpec("Dense", [-1], np.asarray(w, float), np.asarray(b, float))], (n_in,))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy():
    """Seed-0 depthwise fixture net, folded and quantized (6-bit weights), with data splits."""
    from qbias.fixtures import fixture_net, fixture_set
    from qbias.quant import drop_dead_channels, fold_batchnorm, round_params_to_storage

    data = fixture_set(0)
    graph = fixture_net("depthwise", 0)
    folded, dead = drop_dead_channels(fold_batchnorm(graph), data["calib"])
    folded = round_params_to_storage(folded)
    qmodel = quantize_model(folded, data["calib"], bits_w=6, bits_a=8)
    return {"graph": graph, "fp": folded, "qmodel": qmodel, "dead": dead, **data}


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
