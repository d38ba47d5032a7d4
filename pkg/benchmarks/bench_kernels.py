"""Time the compiled kernels against the numpy/Python fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Workloads match what the solver and the gap stage actually run: the
assignment-matrix projection every Block-2 step (12 x 12 rows, plus a large
batch to show scaling) and the exhaustive partition search at N = 6 and 8.
"""
import argparse
import timeit

import numpy as np

from qosclust import _fallback, available_backends


def workloads(rng):
    small = rng.normal(scale=0.5, size=(12, 12)) + np.eye(12)
    big = rng.normal(scale=2.0, size=(20_000, 12))
    return [
        ("dykstra 12x12", "dykstra_rows", (small, 1e-10, 10_000)),
        ("dykstra 20000x12", "dykstra_rows", (big, 1e-10, 10_000)),
        ("sort 20000x12", "sort_rows", (big,)),
        ("partitions N=6", "partition_search", (rng.uniform(size=1 << 6), 6, 0.1)),
        ("partitions N=8", "partition_search", (rng.uniform(size=1 << 8), 8, 0.1)),
    ]


def best_time(fn, args, repeat):
    number = 1
    while timeit.timeit(lambda: fn(*args), number=number) < 0.2 and number < 10_000:
        number *= 4
    return min(timeit.repeat(lambda: fn(*args), number=number, repeat=repeat)) / number


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    compiled = available_backends().get("cython")
    if compiled is None:
        print("compiled extension not built; only the fallback is available")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<20}{'python [ms]':>14}{'cython [ms]':>14}{'speedup':>10}")
    for label, name, a in workloads(rng):
        t_py = best_time(getattr(_fallback, name), a, args.repeat)
        if compiled is None:
            print(f"{label:<20}{t_py * 1e3:>14.3f}{'-':>14}{'-':>10}")
            continue
        ca = tuple(np.ascontiguousarray(x) if isinstance(x, np.ndarray) else x for x in a)
        t_c = best_time(getattr(compiled, name), ca, args.repeat)
        print(f"{label:<20}{t_py * 1e3:>14.3f}{t_c * 1e3:>14.3f}{t_py / t_c:>9.1f}x")


if __name__ == "__main__":
    main()
