"""Time the compiled kernels against the NumPy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Prints one line per kernel and size: best wall time of each backend and the ratio.
"""
import argparse
import timeit

import numpy as np

from coxmil import kernels


def cases(rng):
    for n in (200, 1000, 4000):
        t = rng.integers(1, n // 4, size=n).astype(float)
        e = (rng.random(n) < 0.7).astype(np.int8)
        r = rng.normal(size=n)
        yield "concordance_counts", n, (t, e, r)
    for n in (1000, 20000, 200000):
        t = rng.exponential(size=n).round(3)
        e = (rng.random(n) < 0.7).astype(np.int8)
        yield "breslow_loglik", n, (t, e, rng.normal(size=n))
    for n in (200, 1000, 5000):
        t = rng.exponential(size=n).round(2)
        e = (rng.random(n) < 0.7).astype(np.int8)
        grid = np.unique(t[e == 1])
        upto = np.searchsorted(grid, t, side="right")
        yield "logrank_best_split", n, (rng.normal(size=n), upto, e, grid.size)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if kernels.BACKEND != "cython":
        raise SystemExit("compiled extension not built; nothing to compare")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<20}{'n':>8}{'cython ms':>12}{'python ms':>12}{'speedup':>9}")
    for name, n, call_args in cases(rng):
        fn = getattr(kernels, name)
        times = {}
        for backend in ("cython", "python"):
            fn(*call_args, backend=backend)  # warm up
            times[backend] = min(timeit.repeat(lambda: fn(*call_args, backend=backend),
                                               number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<20}{n:>8}{times['cython']:>12.3f}{times['python']:>12.3f}"
              f"{times['python'] / times['cython']:>8.1f}x")


if __name__ == "__main__":
    main()
