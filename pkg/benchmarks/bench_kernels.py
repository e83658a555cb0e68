"""Compare the numba kernels against their pure-numpy fallbacks.

Usage: python3 benchmarks/bench_kernels.py [--repeat N] [--quick]

Each kernel is called once before timing so JIT compilation is excluded.
Outputs of both variants are checked for agreement before timing.
"""

import argparse
import timeit

import numpy as np

from lowbudget import _kernels
from lowbudget.budget import uniform_bins
from lowbudget.perturbation import _affine_inverse, gaussian_kernel


def cases(quick):
    r = np.random.default_rng(0)
    m, k = (20_000, 200) if quick else (200_000, 2_000)
    scores = r.random(m)
    bins = uniform_bins(scores, k)
    yield "uniform_order", f"m={m} k={k}", (scores, bins, k), _kernels.uniform_order_numba, _kernels.uniform_order_numpy

    for h, w, c in ((28, 28, 1), (96, 96, 3)) if quick else ((28, 28, 1), (96, 96, 3), (256, 256, 3)):
        img = r.random((h, w, c))
        inv = _affine_inverse(7.0, 1.5, -0.5, 1.05, h, w)
        yield "bilinear_warp", f"{h}x{w}x{c}", (img, inv), _kernels.bilinear_warp_numba, _kernels.bilinear_warp_numpy
        weights = gaussian_kernel(1.0)
        yield "blur_axis", f"{h}x{w}x{c} r=3", (img, weights, 1), _kernels.blur_axis_numba, _kernels.blur_axis_numpy


def best_of(fn, args, repeat):
    number = 1
    while timeit.timeit(lambda: fn(*args), number=number) < 0.05:
        number *= 4
    return min(timeit.repeat(lambda: fn(*args), number=number, repeat=repeat)) / number


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--quick", action="store_true", help="smaller inputs")
    args = parser.parse_args(argv)

    print(f"{'kernel':<15}{'input':<18}{'numba [ms]':>12}{'numpy [ms]':>12}{'speedup':>10}")
    for name, label, call_args, fast, slow in cases(args.quick):
        a, b = fast(*call_args), slow(*call_args)
        if not np.allclose(a, b, rtol=0, atol=1e-12):
            raise SystemExit(f"{name} {label}: numba and numpy outputs disagree")
        t_fast = best_of(fast, call_args, args.repeat)
        t_slow = best_of(slow, call_args, args.repeat)
        print(f"{name:<15}{label:<18}{1e3 * t_fast:>12.3f}{1e3 * t_slow:>12.3f}{t_slow / t_fast:>9.1f}x")


if __name__ == "__main__":
    main()
