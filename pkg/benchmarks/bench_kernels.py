"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import timeit

import numpy as np

from eisnn import _pykernels as py

try:
    from eisnn import _ckernels as ck
except ImportError:
    ck = None


def cases(dtype):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((32, 64, 16, 16)).astype(dtype)
    cols = py.im2col(x, 3, 1)
    z = (rng.exponential(size=(32, 16384)) * (rng.random((32, 16384)) > 0.5)).astype(dtype)
    v = rng.standard_normal(32 * 64 * 16 * 16).astype(dtype)
    g = rng.standard_normal(v.shape).astype(dtype)
    pooled = py.avg_pool2(x)
    return {
        "im2col 3x3": lambda m: m.im2col(x, 3, 1),
        "col2im 3x3": lambda m: m.col2im(cols, x.shape, 3, 1),
        "avg_pool2": lambda m: m.avg_pool2(x),
        "avg_pool2_backward": lambda m: m.avg_pool2_backward(pooled),
        "zero_replace_rows": lambda m: m.zero_replace_rows(z, 1.0),
        "arctan_surrogate_grad": lambda m: m.arctan_surrogate_grad(v, g, 2.0),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if ck is None:
        print("compiled kernels not built; showing the numpy fallback only")
    print(f"{'kernel':24s} {'dtype':8s} {'python ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for dtype in (np.float32, np.float64):
        for name, fn in cases(dtype).items():
            tp = min(timeit.repeat(lambda: fn(py), number=1, repeat=args.repeat)) * 1e3
            if ck is None:
                print(f"{name:24s} {np.dtype(dtype).name:8s} {tp:10.2f}")
                continue
            tc = min(timeit.repeat(lambda: fn(ck), number=1, repeat=args.repeat)) * 1e3
            print(f"{name:24s} {np.dtype(dtype).name:8s} {tp:10.2f} {tc:10.2f} {tp / tc:8.2f}x")


if __name__ == "__main__":
    main()
