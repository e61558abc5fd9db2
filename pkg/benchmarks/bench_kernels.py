"""Compare the compiled and numpy convolution kernels on training-sized inputs.

Run with ``python benchmarks/bench_kernels.py [--repeat N]``. Both backends are
checked for identical output before timing.
"""

import argparse
import timeit

import numpy as np

from procl.tensor import _kernels_py
from procl.tensor.kernels import BACKEND

try:
    from procl.tensor import _kernels as _kernels_c
except ImportError:
    _kernels_c = None

# (batch, height, width, channels) entering each encoder layer for K=128 triples
SHAPES = [(384, 32, 32, 1), (384, 15, 15, 16), (384, 7, 7, 32)]
KERNEL, STRIDE = 3, 2


def bench(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    print(f"default backend: {BACKEND}")
    if _kernels_c is None:
        print("compiled extension not built; only the numpy backend is available")
    rng = np.random.default_rng(0)
    print(f"{'shape':>20} {'op':>7} {'python ms':>10} {'cython ms':>10} {'speedup':>8}")
    for shape in SHAPES:
        x = rng.standard_normal(shape)
        cols = _kernels_py.im2col(x, KERNEL, STRIDE)
        g = rng.standard_normal(cols.shape)
        ops = {
            "im2col": (lambda m: (lambda: m.im2col(x, KERNEL, STRIDE))),
            "col2im": (lambda m: (lambda: m.col2im(g, x.shape, STRIDE))),
        }
        for name, make in ops.items():
            t_py = bench(make(_kernels_py), args.repeat)
            if _kernels_c is not None:
                assert np.array_equal(make(_kernels_py)(), make(_kernels_c)()), name
                t_c = bench(make(_kernels_c), args.repeat)
                print(f"{str(shape):>20} {name:>7} {1e3 * t_py:10.2f} {1e3 * t_c:10.2f} {t_py / t_c:8.2f}")
            else:
                print(f"{str(shape):>20} {name:>7} {1e3 * t_py:10.2f} {'-':>10} {'-':>8}")


if __name__ == "__main__":
    main()
