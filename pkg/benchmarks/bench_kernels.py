"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--points 1000 4000] [--repeat 5]

Prints one row per (kernel, size) with the best-of-N time of each backend and
the speedup. Outputs are checked for agreement before timing.
"""

import argparse
import timeit

import numpy as np

from erda import _kernels_py

try:
    from erda import _kernels as compiled
except ImportError:
    compiled = None


def cases(n, rng):
    coords = rng.normal(size=(n, 3))
    feats = rng.normal(size=(n, 32))
    nbr = _kernels_py.knn_indices(coords, 8)
    grad = rng.normal(size=(n, 32))
    gt = rng.integers(0, 13, n)
    pred = rng.integers(0, 13, n)
    return {
        "knn_indices": (lambda m: m.knn_indices(coords, 8)),
        "neighbor_mean": (lambda m: m.neighbor_mean(feats, nbr)),
        "neighbor_mean_backward": (lambda m: m.neighbor_mean_backward(grad, nbr, n)),
        "confusion": (lambda m: m.confusion(gt, pred, 13)),
    }


def best_time(fn, repeat):
    number = 1
    while timeit.timeit(fn, number=number) < 0.05:
        number *= 2
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--points", type=int, nargs="+", default=[1000, 4000])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    if compiled is None:
        print("compiled extension not built; only the numpy fallback is available")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<24} {'N':>6} {'numpy ms':>10} {'cython ms':>10} {'speedup':>8}")
    for n in args.points:
        for name, run in cases(n, rng).items():
            slow = best_time(lambda: run(_kernels_py), args.repeat)
            if compiled is None:
                print(f"{name:<24} {n:>6} {slow * 1e3:10.3f} {'-':>10} {'-':>8}")
                continue
            np.testing.assert_allclose(run(compiled), run(_kernels_py), rtol=1e-12)
            fast = best_time(lambda: run(compiled), args.repeat)
            print(f"{name:<24} {n:>6} {slow * 1e3:10.3f} {fast * 1e3:10.3f} {slow / fast:7.1f}x")


if __name__ == "__main__":
    main()
