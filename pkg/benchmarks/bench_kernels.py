"""Compare the compiled and pure-Python per-cell kernels.

Run with ``python benchmarks/bench_kernels.py [--cells N] [--repeat R]``.
Prints best-of-R wall time per kernel and backend and the speed-up.
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from bulkiface._core import compiled_kernels, python_kernels


def _cases(m: int, rng):
    n = 3
    u = rng.uniform(0.01, 5.0, size=(m, n))
    U = rng.uniform(0.01, 5.0, size=(m, n))
    ref = np.array([1.0, 0.5, 2.0])
    alpha = np.array([[2.0, 0.0, 0.0], [0.0, 1.0, 1.0]])
    beta = np.array([[0.0, 1.0, 0.0], [1.0, 0.0, 0.0]])
    k = np.array([1.0, 0.5])
    gamma = np.array([1.0, 0.0, 1.0])
    delta = np.array([0.0, 1.0, 0.0])
    return {
        "mass_action_rates": (u, alpha, beta, k, ref),
        "polynomial_transmission": (u, U, gamma, delta, 1.0, ref, ref),
        "boltzmann_density": (u, ref, True),
        "bregman_density": (u, U, ref),
    }


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    p.add_argument("--cells", type=int, default=100_000)
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args(argv)
    if compiled_kernels is None:
        print("compiled backend not available (extension not built or disabled); nothing to compare")
        return 1
    cases = _cases(args.cells, np.random.default_rng(0))
    print(f"{'kernel':26s} {'cython [ms]':>12s} {'python [ms]':>12s} {'speed-up':>9s} {'max |diff|':>11s}")
    for name, a in cases.items():
        fc, fp = getattr(compiled_kernels, name), getattr(python_kernels, name)
        tc = min(timeit.repeat(lambda: fc(*a), number=1, repeat=args.repeat))
        tp = min(timeit.repeat(lambda: fp(*a), number=1, repeat=args.repeat))
        diff = float(np.abs(np.asarray(fc(*a)) - np.asarray(fp(*a))).max())
        print(f"{name:26s} {1e3 * tc:12.3f} {1e3 * tp:12.3f} {tp / tc:9.2f} {diff:11.2e}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
