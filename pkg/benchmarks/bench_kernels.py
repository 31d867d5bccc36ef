"""Compare the numba and numpy paths of the assembly kernels.

Usage::

    python benchmarks/bench_kernels.py [--repeat 5] [--sizes 33 65 129]

Each kernel is run once to trigger compilation, then timed ``repeat`` times;
the best time is reported together with the max difference between paths.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from fraccontrol import _kernels


def best_time(fn, repeat: int) -> float:
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_toeplitz(n: int, repeat: int) -> dict:
    rng = np.random.default_rng(n)
    coef = rng.standard_normal((n, n))
    a = _kernels.fill_block_toeplitz_numpy(coef, n)
    b = _kernels.fill_block_toeplitz_numba(coef, n)
    return {
        "kernel": "fill_block_toeplitz",
        "size": n,
        "numpy_s": best_time(lambda: _kernels.fill_block_toeplitz_numpy(coef, n), repeat),
        "numba_s": best_time(lambda: _kernels.fill_block_toeplitz_numba(coef, n), repeat),
        "max_diff": float(np.max(np.abs(a - b))),
    }


def bench_hat(K: int, repeat: int, s: float = 0.5) -> dict:
    a = _kernels.hat_integrals_2d_numpy(K, s)
    b = _kernels.hat_integrals_2d_numba(K, s)
    return {
        "kernel": "hat_integrals_2d",
        "size": K,
        "numpy_s": best_time(lambda: _kernels.hat_integrals_2d_numpy(K, s), repeat),
        "numba_s": best_time(lambda: _kernels.hat_integrals_2d_numba(K, s), repeat),
        "max_diff": float(np.max(np.abs(a - b)) / np.max(np.abs(a))),
    }


def main(argv=None) -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--sizes", type=int, nargs="+", default=[17, 33, 65])
    p.add_argument("--hat-sizes", type=int, nargs="+", default=[128, 256, 512])
    args = p.parse_args(argv)
    # warm up the jit
    _kernels.fill_block_toeplitz_numba(np.zeros((3, 3)), 3)
    _kernels.hat_integrals_2d_numba(4, 0.5)
    rows = [bench_toeplitz(n, args.repeat) for n in args.sizes]
    rows += [bench_hat(K, args.repeat) for K in args.hat_sizes]
    print(f"{'kernel':<22}{'size':>6}{'numpy [s]':>12}{'numba [s]':>12}{'speedup':>9}{'max diff':>11}")
    for r in rows:
        print(
            f"{r['kernel']:<22}{r['size']:>6}{r['numpy_s']:>12.4g}{r['numba_s']:>12.4g}"
            f"{r['numpy_s'] / r['numba_s']:>9.2f}{r['max_diff']:>11.2e}"
        )


if __name__ == "__main__":
    main()
