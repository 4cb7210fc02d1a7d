"""Compiled vs numpy kernels: agreement and timing.

Run ``python benchmarks/bench_kernels.py`` after building the extension.
Prints one row per kernel and size with the best-of-repeats wall time of
each backend, the speed-up and the largest absolute disagreement.
"""
from __future__ import annotations

import argparse
import sys
import timeit

import numpy as np

from bulkcredal import _kernels_py

try:
    from bulkcredal import _kernels
except ImportError:
    _kernels = None


def _cases(rng, n, d):
    S = 30.0 + 10.0 * rng.standard_t(3, size=(n, d))
    x = np.quantile(S, 8 / 11, axis=0)
    w = np.full(n, 1.0 / n)
    XY = rng.normal(size=(n, d + 1))
    theta = rng.normal(size=d + 1)
    losses = np.ascontiguousarray((S - x).clip(0).sum(axis=1))
    s = float(losses.max() - losses.min()) + 1e-12
    return {
        "newsvendor_losses": lambda k: k.newsvendor_losses(x, S, 3.0, 8.0),
        "newsvendor_grad": lambda k: k.newsvendor_grad(x, S, 3.0, 8.0, w),
        "lad_grad": lambda k: k.lad_grad(theta, XY, w),
        "kl_dual_inner": lambda k: k.kl_dual_inner(losses, 1.0, 1e-6 * s, 10.0 * s)[0],
    }


def _best(fn, repeat):
    timer = timeit.Timer(fn)
    loops, _ = timer.autorange()
    return min(timer.repeat(repeat, loops)) / loops


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--sizes", default="1000,10000,100000")
    p.add_argument("--dim", type=int, default=5)
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    a = p.parse_args(argv)
    if _kernels is None:
        print("compiled extension not built; nothing to compare", file=sys.stderr)
        return 1
    rng = np.random.default_rng(a.seed)
    print(f"{'kernel':<20}{'n':>8}{'cython_us':>12}{'numpy_us':>12}{'speedup':>9}{'max_abs_diff':>14}")
    for n in (int(v) for v in a.sizes.split(",")):
        for name, fn in _cases(rng, n, a.dim).items():
            diff = float(np.max(np.abs(np.asarray(fn(_kernels)) - np.asarray(fn(_kernels_py)))))
            tc = _best(lambda: fn(_kernels), a.repeat)
            tp = _best(lambda: fn(_kernels_py), a.repeat)
            print(f"{name:<20}{n:>8}{tc * 1e6:>12.1f}{tp * 1e6:>12.1f}{tp / tc:>9.2f}{diff:>14.2e}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
