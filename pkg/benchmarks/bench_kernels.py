"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]

Shapes follow the conv and pool layers of the encoders at the SEED and
ThoughtViz geometries with batch 64.
"""
import argparse
import timeit

import numpy as np

from ueeg import _kernels
from ueeg._kernels import fallback

CASES = [
    ("im2col", "conv1 SEED", (64, 1, 62, 32), (1, 4)),
    ("im2col", "conv2 ThoughtViz", (64, 25, 14, 32), (4, 1)),
    ("im2col", "conv3 SEED", (64, 32, 7, 40), (4, 25)),
    ("col2im", "conv3 SEED", (64, 32, 7, 40), (4, 25)),
    ("maxpool", "pool (1,2) SEED", (64, 32, 59, 29), (1, 2)),
    ("maxpool_bwd", "pool (1,2) SEED", (64, 32, 59, 29), (1, 2)),
]


def make_call(impl, kind, shape, k, rng):
    x = rng.normal(size=shape).astype(np.float32)
    if kind == "im2col":
        return lambda: impl.im2col(x, *k)
    if kind == "col2im":
        cols = fallback.im2col(x, *k)
        return lambda: impl.col2im(cols, shape, *k)
    if kind == "maxpool":
        return lambda: impl.maxpool_forward(x, k[0], k[1], k[0], k[1])
    out, arg = fallback.maxpool_forward(x, k[0], k[1], k[0], k[1])
    g = np.ones_like(out)
    return lambda: impl.maxpool_backward(g, arg, shape)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if _kernels.compiled is None:
        raise SystemExit("compiled kernels are not built; run `pip install -e . --no-build-isolation` first")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<12}{'case':<20}{'numpy ms':>10}{'cython ms':>11}{'speedup':>9}")
    for kind, label, shape, k in CASES:
        times = []
        for impl in (fallback, _kernels.compiled):
            fn = make_call(impl, kind, shape, k, rng)
            fn()
            times.append(min(timeit.repeat(fn, number=1, repeat=args.repeat)) * 1e3)
        print(f"{kind:<12}{label:<20}{times[0]:>10.2f}{times[1]:>11.2f}{times[0] / times[1]:>8.1f}x")


if __name__ == "__main__":
    main()
