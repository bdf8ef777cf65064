"""Compare the compiled and the pure-numpy simulation kernels.

Usage::

    python benchmarks/bench_kernels.py [--paths 20000] [--steps 200] [--repeat 3]

Both backends simulate the equilibrium closed loop of the generic scalar
game on the same counter-based noise; the script reports wall times and the
largest difference between the two sets of trajectories.  The compiled
backend is unavailable when STACKLQ_DISABLE_NUMBA=1 is set.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from stacklq import _numba
from stacklq.equilibrium import Direction, perturbed_system
from stacklq.filtering_sim import closed_loop_system
from stacklq.game_model import GENERIC_CID, TimeGrid
from stacklq.kernels import simulate_costs, simulate_paths
from stacklq.riccati_solvers import solve_cid


def best_of(fn, repeat):
    times = []
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--paths", type=int, default=20000)
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)

    grid = TimeGrid(1.0, args.steps)
    L = solve_cid(GENERIC_CID, grid)
    system = closed_loop_system(GENERIC_CID, L)
    ids = np.arange(args.paths, dtype=np.uint64)
    sde_c, C, W, WT = perturbed_system(system, Direction.on_state("follower", GENERIC_CID, L.dim),
                                       [-0.04, -0.02, 0.0, 0.02, 0.04])
    backends = ["numpy"] + (["numba"] if _numba.ENABLED else [])
    if _numba.ENABLED:     # compile outside the timed region
        simulate_paths(system.sde, 1, ids[:2], backend="numba")
        simulate_costs(sde_c, 1, ids[:2], C, W, WT, backend="numba")

    print(f"paths={args.paths} steps={args.steps} state_dim={system.sde.dim} "
          f"threads={_numba._numba.get_num_threads() if _numba.ENABLED else 1}")
    results = {}
    for b in backends:
        tp, (Z, _) = best_of(lambda: simulate_paths(system.sde, 1, ids, backend=b), args.repeat)
        tc, costs = best_of(lambda: simulate_costs(sde_c, 1, ids, C, W, WT, backend=b),
                            args.repeat)
        results[b] = (Z, costs)
        print(f"{b:>6}: simulate_paths {tp:8.3f} s   simulate_costs {tc:8.3f} s")
    if len(results) == 2:
        dz = np.max(np.abs(results["numba"][0] - results["numpy"][0]))
        dc = np.max(np.abs(results["numba"][1] - results["numpy"][1]))
        print(f"max |numba - numpy|: paths {dz:.3e}, costs {dc:.3e}")
    else:
        print("numba disabled; only the numpy backend was timed")


if __name__ == "__main__":
    main()
