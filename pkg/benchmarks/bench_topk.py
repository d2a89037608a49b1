#!/usr/bin/env python3
"""Compare the compiled and numpy top-k scoring kernels.

Usage: python benchmarks/bench_topk.py [--sizes 10000,100000,500000] [--dims 64]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from datr._kernels import HAVE_FAST_KERNEL, topk_slow

try:
    from datr._kernels import topk_fast
except ImportError:
    topk_fast = None


def bench(fn, matrix, query, k, repeats=9):
    fn(matrix, query, k)  # warm-up
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(matrix, query, k)
        times.append(time.perf_counter() - t0)
    return min(times)


def main() -> None:
    parser = argparse.ArgumentParser()
    parser.add_argument("--sizes", default="10000,100000,500000")
    parser.add_argument("--dims", default="64")
    parser.add_argument("--k", type=int, default=100)
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    impls = [("numpy", topk_slow.topk_dot)]
    if topk_fast is not None:
        impls.append(("cython", topk_fast.topk_dot))
    print(f"compiled kernel available: {HAVE_FAST_KERNEL}")
    header = f"{'n':>8} {'d':>5} {'dtype':>8}" + "".join(
        f"{name:>12}" for name, _ in impls)
    print(header)
    for n in (int(s) for s in args.sizes.split(",")):
        for d in (int(s) for s in args.dims.split(",")):
            base = rng.normal(size=(n, d))
            base /= np.linalg.norm(base, axis=1, keepdims=True)
            for dtype in (np.float64, np.float32):
                matrix = np.ascontiguousarray(base.astype(dtype))
                query = rng.normal(size=d).astype(dtype)
                cells = []
                agree = None
                for _, fn in impls:
                    ms = bench(fn, matrix, query, args.k) * 1e3
                    cells.append(f"{ms:10.2f}ms")
                    idx, _ = fn(matrix, query, args.k)
                    agree = idx if agree is None else agree
                    assert np.array_equal(agree, idx), "kernels disagree on ordering"
                print(f"{n:>8} {d:>5} {np.dtype(dtype).name:>8}" + "".join(cells))


if __name__ == "__main__":
    main()
