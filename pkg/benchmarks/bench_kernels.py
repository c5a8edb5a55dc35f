"""Compiled vs pure-Python schedule kernels.

    python benchmarks/bench_kernels.py [--repeat 3]

Times exhaustive search and batched schedule costing on the calibrated
Xavier-NX tables and checks that both backends agree bit for bit.
"""
import argparse
import time

import numpy as np

from exitdvfs import _pykernels
from exitdvfs import devmodel as dm
from exitdvfs.profiler import _tables

try:
    from exitdvfs import _kernels
except ImportError:
    _kernels = None


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--layers", type=int, default=3, help="layers for exhaustive search")
    ap.add_argument("--samples", type=int, default=20000, help="schedules for batched costing")
    args = ap.parse_args()
    if _kernels is None:
        raise SystemExit("compiled extension not built; run `pip install -e . --no-build-isolation`")

    prof, table = dm.calibrated_scenario("xavier-nx")
    tabs = _tables(prof, table, args.layers)
    full = _tables(prof, table, table.depth)
    sched = np.random.default_rng(0).integers(0, full.n_pairs, size=(args.samples, table.depth))
    budget = 1.15 * tabs.cost((tabs.max_index,) * args.layers)[1]

    cases = {
        f"brute_force {tabs.n_pairs}^{args.layers}": lambda k: k.brute_force(tabs.lat, tabs.en, tabs.rank,
                                                                           tabs.overhead, budget),
        f"batch_cost {args.samples}x{table.depth}": lambda k: k.batch_cost(sched, full.lat, full.en, full.overhead),
    }
    print(f"{'kernel':<28}{'python s':>12}{'cython s':>12}{'speedup':>10}  identical")
    for name, call in cases.items():
        tp, rp = best_of(lambda: call(_pykernels), args.repeat)
        tc, rc = best_of(lambda: call(_kernels), args.repeat)
        same = repr(rp) == repr(rc) if name.startswith("brute") else (
            list(rp[0]) == list(rc[0]) and list(rp[1]) == list(rc[1]))
        print(f"{name:<28}{tp:>12.4f}{tc:>12.4f}{tp / tc:>9.1f}x  {same}")


if __name__ == "__main__":
    main()
