"""Benchmark the compiled chaos-game kernel against the pure-Python fallback.

Usage: python benchmarks/bench_ifs.py [--iters 100000] [--codes 20]
"""

import argparse
import time

import numpy as np

from fedfrac import _ifs_fallback, ifs
from fedfrac.seeding import make_rng

try:
    from fedfrac import _ifs_kernel
except ImportError:
    _ifs_kernel = None


def bench(fn, jobs, repeats=3):
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        for a, b, choices in jobs:
            fn(a, b, choices, 0.0, 0.0, 100, 1e6)
        best = min(best, time.perf_counter() - start)
    return best


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--iters", type=int, default=100_000,
                    help="chaos-game iterations per code")
    ap.add_argument("--codes", type=int, default=20)
    args = ap.parse_args()

    jobs = []
    for i in range(args.codes):
        code = ifs.sample_ifs_code(make_rng(1, i), i)
        choices = make_rng(2, i).choice(len(code.maps), size=args.iters + 100,
                                        p=code.probs).astype(np.int64)
        jobs.append((code.a_stack, code.b_stack, choices))
    total = args.codes * args.iters

    t_py = bench(_ifs_fallback.iterate_points, jobs)
    print(f"pure python : {t_py:8.3f}s  ({total / t_py / 1e6:6.2f} Mpts/s)")
    if _ifs_kernel is None:
        print("compiled kernel not available (package built without it)")
        return
    t_cy = bench(_ifs_kernel.iterate_points, jobs)
    print(f"compiled    : {t_cy:8.3f}s  ({total / t_cy / 1e6:6.2f} Mpts/s)")
    print(f"speedup     : {t_py / t_cy:8.1f}x")

    # sanity: both backends must agree bit for bit
    a, b, choices = jobs[0]
    p1, d1 = _ifs_kernel.iterate_points(a, b, choices, 0.0, 0.0, 100, 1e6)
    p2, d2 = _ifs_fallback.iterate_points(a, b, choices, 0.0, 0.0, 100, 1e6)
    assert d1 == d2 and np.array_equal(p1, p2), "backend mismatch"
    print("backends bitwise identical on the first job")


if __name__ == "__main__":
    main()
