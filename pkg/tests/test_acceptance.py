"""Acceptance criteria of the package, one test per criterion.

Every test prints a single ``criterion N: PASS|FAIL`` line with the
measured quantities and runtime, then asserts the criterion.  Run this
module on its own for a compact report::

    pytest tests/test_acceptance.py
    python3 tests/test_acceptance.py
"""

import json
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest

from stacklq.cli import main as cli_main
from stacklq.equilibrium import Direction, adjoint_residual, stationarity_test
from stacklq.filtering_sim import (closed_loop_system, nested_conditional_mc,
                                   simulate_cid_closed_loop, tower_check)
from stacklq.game_model import GENERIC_CID, CidSpec, TimeGrid, embed_cid, random_spec
from stacklq.ode import integrate_backward
from stacklq.principal_agent import (GENERIC_PA, PaParams, as_leader_system, default_directions,
                                     pa_residuals, solve_pa)
from stacklq.riccati_solvers import (attempt_general_leader_system, cid_leader_field,
                                     follower_field, residuals, solve_cid_leader_system,
                                     solve_follower_riccati)

ROOT = Path(__file__).resolve().parents[1]
EPSILONS = (-0.04, -0.02, 0.02, 0.04)
LINES: list = []   # collected for the terminal summary (see conftest.py)


def report(number, passed: bool, detail: str, seconds: float, budget: float) -> bool:
    ok = passed and seconds < budget
    line = (f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}  "
            f"[{seconds:.2f} s, budget {budget:g} s]")
    LINES.append(line)
    print(line)
    return ok


# ---------------------------------------------------------------------------
# the criteria
# ---------------------------------------------------------------------------

def criterion_1() -> bool:
    spec = CidSpec(A0=0.0, A1=0.0, A2=0.0, A3=0.0, B0=1.0, C0=0.0, Q1=0.0, N1=1.0, G1=1.0,
                   Q2=1.0, N2=1.0, G2=1.0, x0=1.0)
    grid = TimeGrid(1.0, 1000)
    solve_follower_riccati(spec, TimeGrid(1.0, 10))            # warm caches
    start = time.perf_counter()
    P = solve_follower_riccati(spec, grid)
    seconds = time.perf_counter() - start
    exact = np.array([1.0 / (2.0 - grid.time(k)) for k in range(grid.n_steps + 1)])
    err = float(np.max(np.abs(P.values[:, 0, 0] - exact)))
    return report(1, err <= 1e-8, f"max error {err:.2e} (<= 1e-8)", seconds, 0.1)


def _random_pa(rng) -> PaParams:
    return PaParams(r=float(rng.uniform(-1.0, 1.0)), B=float(rng.uniform(-1.0, 1.0)),
                    sigma=tuple(rng.uniform(0.0, 0.3, 3)),
                    sigma_bar=tuple(rng.uniform(0.0, 0.3, 3)),
                    y0=float(rng.normal()), m0=float(rng.normal()),
                    T=float(rng.uniform(0.5, 1.0)))


def criterion_2() -> bool:
    start = time.perf_counter()
    worst, count = 0.0, 0
    grid = TimeGrid(1.0, 100)
    for seed in range(10):
        spec = random_spec(np.random.default_rng(seed), n=2, control_diffusion=False,
                           control_scale=0.5)
        checks = dict(residuals(follower_field(spec), solve_follower_riccati(spec, grid), grid))
        fld = cid_leader_field(spec)
        checks.update(residuals(fld, integrate_backward(fld, grid), grid))
        p = _random_pa(np.random.default_rng(seed))
        checks.update(pa_residuals(solve_pa(p, TimeGrid(p.T, 100))))
        for value, bound in checks.values():
            worst = max(worst, value / bound)
            count += 1
    seconds = time.perf_counter() - start
    return report(2, worst <= 1.0,
                  f"{count} residuals over 10 seeds, worst residual/bound {worst:.3f} (<= 1)",
                  seconds, 5.0)


def criterion_3() -> bool:
    start = time.perf_counter()
    rng = np.random.default_rng(3)
    grid = TimeGrid(1.0, 100)
    worst = 0.0
    ok = True
    for _ in range(5):
        spec = embed_cid(CidSpec(
            A0=rng.uniform(-0.5, 0.5), A1=rng.uniform(0, 0.4), A2=rng.uniform(0, 0.4),
            A3=rng.uniform(0, 0.4), B0=rng.uniform(0.3, 1.5), C0=rng.uniform(0.3, 1.5),
            Q1=rng.uniform(0, 2), N1=rng.uniform(0.5, 2), G1=rng.uniform(0, 2),
            Q2=rng.uniform(0, 2), N2=rng.uniform(0.5, 2), G2=rng.uniform(0, 2),
            x0=rng.normal()))
        general = attempt_general_leader_system(spec, grid)
        ok = ok and general.ok
        if not general.ok:
            continue
        direct = solve_cid_leader_system(spec, None, grid)
        for g, d in zip(general.blocks, direct.blocks):
            worst = max(worst, float(np.max(np.abs(g.values - d.values))))
    seconds = time.perf_counter() - start
    return report(3, ok and worst <= 1e-6,
                  f"max componentwise difference {worst:.2e} (<= 1e-6)", seconds, 30.0)


def criterion_4() -> bool:
    start = time.perf_counter()
    L = solve_cid_leader_system(GENERIC_CID, None, TimeGrid(1.0, 100))
    system = closed_loop_system(GENERIC_CID, L)
    est = nested_conditional_mc(GENERIC_CID, None, L, "G2", 200, 200, 41, system=system)
    ens = simulate_cid_closed_loop(GENERIC_CID, None, L, 200, 41, system=system)
    rmse = float(np.sqrt(np.mean((est[:, :, 0] - ens.Xcheck[:, :, 0]) ** 2)))
    # the time-T spread of x from an independent, larger sample
    big = simulate_cid_closed_loop(GENERIC_CID, None, L, 10000, 42, system=system)
    sd = float(big.x[:, -1, 0].std(ddof=1))
    seconds = time.perf_counter() - start
    return report(4, rmse <= 0.05 * sd,
                  f"RMSE {rmse:.4f} = {rmse / sd:.3f} of sd(x(T)) {sd:.4f} (<= 0.05)",
                  seconds, 60.0)


def criterion_5() -> bool:
    start = time.perf_counter()
    gaps = []
    L = solve_cid_leader_system(GENERIC_CID, None, TimeGrid(1.0, 200))
    ens = simulate_cid_closed_loop(GENERIC_CID, None, L, 10000, 5)
    gaps.append(tower_check(ens))
    sol = solve_pa(GENERIC_PA, TimeGrid(1.0, 200))
    ens = simulate_cid_closed_loop(sol.spec, None, as_leader_system(sol), 10000, 5)
    gaps.append(tower_check(ens))
    seconds = time.perf_counter() - start
    return report(5, all(g.passed for g in gaps),
                  "max studentized gap CID {:.2f}, principal-agent {:.2f} (<= 4)".format(
                      gaps[0].max_gap, gaps[1].max_gap), seconds, 20.0)


def criterion_6() -> bool:
    start = time.perf_counter()
    grid = TimeGrid(1.0, 200)
    runs = []
    L = solve_cid_leader_system(GENERIC_CID, None, grid)
    system = closed_loop_system(GENERIC_CID, L)
    for player in ("follower", "leader"):
        d = Direction.on_state(player, GENERIC_CID, L.dim)
        runs.append((f"CID {player}", stationarity_test(GENERIC_CID, None, L, d, EPSILONS,
                                                        100000, 6, system=system)))
    sol = solve_pa(GENERIC_PA, grid)
    La = as_leader_system(sol)
    system = closed_loop_system(sol.spec, La)
    for d in default_directions():
        runs.append((f"PA {d.player}", stationarity_test(sol.spec, None, La, d, EPSILONS,
                                                         100000, 6, system=system)))
    seconds = time.perf_counter() - start
    detail = "; ".join(f"{name} |b|/se {abs(r.b) / r.se_b:.2f} a {r.a:.3g}"
                       for name, r in runs)
    return report(6, all(r.stationary and r.convex for _, r in runs), detail, seconds, 300.0)


def criterion_7() -> bool:
    start = time.perf_counter()
    L = solve_cid_leader_system(GENERIC_CID, None, TimeGrid(1.0, 100))
    res = adjoint_residual(GENERIC_CID, L, 10000, 7)
    seconds = time.perf_counter() - start
    ok = res.terminal_error <= 1e-8 and res.passed
    return report(7, ok,
                  f"terminal error {res.terminal_error:.1e} (<= 1e-8); max studentized drift "
                  f"{res.max_studentized:.1f} (<= 4); max |mean|/h {res.max_mean_over_h:.1e}",
                  seconds, 60.0)


def criterion_8() -> bool:
    start = time.perf_counter()
    identical = True
    names = []
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        for cfg_path in sorted((ROOT / "configs").glob("*.json")):
            cfg = json.loads(cfg_path.read_text())
            # shipped configs at reduced sample sizes
            if "sim" in cfg:
                cfg["sim"]["n_paths"] = 1000
            if cfg.get("perturbation"):
                cfg["perturbation"]["n_paths"] = 1000
            small = tmp / cfg_path.name
            small.write_text(json.dumps(cfg))
            outs = []
            for run in ("a", "b"):
                out = tmp / f"{cfg_path.stem}_{run}"
                if cli_main(["run", str(small), "--output-dir", str(out)]) != 0:
                    identical = False
                outs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
            identical = identical and bool(outs[0]) and outs[0] == outs[1]
            names.append(cfg_path.stem)
    seconds = time.perf_counter() - start
    return report(8, identical, f"byte-identical reruns of {', '.join(names)}", seconds, 120.0)


CRITERIA = [criterion_1, criterion_2, criterion_3, criterion_4, criterion_5, criterion_6,
            criterion_7, criterion_8]


@pytest.mark.parametrize("criterion", CRITERIA, ids=[f"criterion_{i + 1}" for i in range(8)])
def test_criterion(criterion):
    assert criterion()


if __name__ == "__main__":
    results = [c() for c in CRITERIA]
    print(f"{sum(results)}/{len(results)} criteria passed")
    sys.exit(0 if all(results) else 1)
