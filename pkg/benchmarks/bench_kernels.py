"""Compare the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import timeit

import numpy as np

from qbias import _pykernels

try:
    from qbias import _ckernels
except ImportError:
    _ckernels = None


def cases(rng):
    x = rng.normal(size=(16, 32, 32, 16))
    w = rng.normal(size=(3, 3, 16, 32))
    dw = rng.normal(size=(3, 3, 16))
    big = rng.normal(size=10**6) * 4
    return {
        "conv2d 3x3 16->32": lambda m: m.conv2d_forward(x, w, 1),
        "depthwise 3x3 x16": lambda m: m.depthwise_forward(x, dw, 1),
        "depthwise stride 2": lambda m: m.depthwise_forward(x, dw, 2),
        "round_half_away 1e6": lambda m: m.round_half_away(big),
        "fake_quant 1e6": lambda m: m.fake_quant(big, 0.05, 3, 0, 255),
    }


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args()
    backends = {"numpy": _pykernels}
    if _ckernels is not None:
        backends["cython"] = _ckernels
    print(f"{'kernel':<22}" + "".join(f"{b:>12}" for b in backends) + ("     speedup" if len(backends) > 1 else ""))
    for name, fn in cases(np.random.default_rng(0)).items():
        t = {b: min(timeit.repeat(lambda m=m: fn(m), number=1, repeat=args.repeat)) for b, m in backends.items()}
        line = f"{name:<22}" + "".join(f"{v * 1e3:>10.2f}ms" for v in t.values())
        if len(t) > 1:
            line += f"{t['numpy'] / t['cython']:>11.1f}x"
        print(line)


if __name__ == "__main__":
    main()
