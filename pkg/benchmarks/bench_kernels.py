"""Time each hot kernel on its numba and numpy paths.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]

The first numba call (compilation) is excluded.  Results are printed as one
line per kernel with the median wall time of each path and the speed-up.
"""

import argparse
import time

import numpy as np

from satgraph import _kernels as K
from satgraph.graph import build_graph
from satgraph.datasets import erdos_renyi_edges


def median_time(fn, args, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def cases(rng):
    g = build_graph(200, erdos_renyi_edges(200, 0.05, rng), np.ones((200, 1)))
    small = build_graph(30, erdos_renyi_edges(30, 0.15, rng), np.ones((30, 1)))
    deg = np.diff(small.indptr).astype(np.float64)
    sym = rng.standard_normal((40, 40))
    yield "segment_sum", (rng.standard_normal((20000, 16)), rng.integers(0, 500, 20000), 500)
    yield "khop_ball", (g.indptr, g.indices, 0, 3, g.num_nodes)
    yield "jacobi", (sym + sym.T, 1e-12, 100)
    yield "bottleneck", (rng.random((8, 8)),)
    yield "triangles", (g.adjacency().astype(np.bool_),)
    # sorted per-entry summation; numba's lead shrinks as n grows and is gone near n = 200
    yield "rw_return", (small.indptr, small.indices, deg, 16)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)
    if K.numba is None:
        print("numba is not installed; only the numpy path is available")
    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':<12} {'numpy [ms]':>11} {'numba [ms]':>11} {'speed-up':>9}")
    for name, kargs in cases(rng):
        np_fn = getattr(K, f"{name}_numpy")
        t_np = median_time(np_fn, kargs, args.repeat)
        if K.numba is None:
            print(f"{name:<12} {1e3 * t_np:11.3f} {'-':>11} {'-':>9}")
            continue
        nb_fn = getattr(K, f"{name}_numba")
        nb_fn(*kargs)  # compile
        t_nb = median_time(nb_fn, kargs, args.repeat)
        print(f"{name:<12} {1e3 * t_np:11.3f} {1e3 * t_nb:11.3f} {t_np / t_nb:8.1f}x")


if __name__ == "__main__":
    main()
