import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stacklq.errors import NonFinite, ValidationError
from stacklq.filtering_sim import tower_check
from stacklq.game_model import TimeGrid, validate_spec
from stacklq.principal_agent import (GENERIC_PA, PRINCIPAL_BLOCKS, PaParams, as_leader_system,
                                     build_pa_game, generic_gains, in_safe_box, pa_residuals,
                                     simulate_pa, solve_pa)
from stacklq.riccati_solvers import solve_cid, solve_follower_riccati


def params(**changes):
    data = GENERIC_PA.to_dict()
    data.update(changes)
    return PaParams.from_dict(data)


@pytest.fixture(scope="module")
def generic_solution():
    return solve_pa(GENERIC_PA, TimeGrid(1.0, 100))


# -- construction ---------------------------------------------------------------------

def test_parameters_are_validated():
    with pytest.raises(ValidationError):
        params(T=0.0)
    with pytest.raises(ValidationError):
        params(sigma=(0.1, 0.1))
    with pytest.raises(ValidationError):
        PaParams.from_dict({"r": 0.1})


def test_effort_term_vanishes_without_productivity():
    blk = build_pa_game(params(B=0.0)).blocks
    assert np.all(np.outer(blk.B_tilde, blk.B_tilde) == 0.0)
    assert np.array_equal(blk.S, np.diag([0.0, -1.0]))


def test_zero_rate_leaves_only_the_coupling_block():
    blk = build_pa_game(params(r=0.0)).blocks
    P = np.array([[0.3, 0.1], [0.1, 0.7]])
    A = blk.calA0(P)
    assert np.all(A[:2, :] == 0.0) and np.all(A[:, :2] == 0.0)
    assert np.array_equal(A[2:, 2:], blk.S @ P)


def test_leader_weight_sign_identity():
    blk = build_pa_game(GENERIC_PA).blocks
    a2, a3 = blk.alpha2, blk.alpha3
    assert np.array_equal(np.outer(a3, a3) - np.outer(a2, a2), [[0.0, 1.0], [1.0, -1.0]])
    assert np.array_equal(blk.leader_weight[:2, :2], [[0.0, 1.0], [1.0, -1.0]])


def test_game_form_only_breaks_leader_definiteness():
    # the principal's control weight is indefinite by construction; everything
    # else the generic checks look at is admissible
    spec = build_pa_game(GENERIC_PA).spec
    assert list(validate_spec(spec)) == ["N2 not positive definite"]
    assert spec.control_independent and spec.has_additive_noise


# -- Riccati systems ------------------------------------------------------------------------

def test_terminal_values(generic_solution):
    sol = generic_solution
    assert np.array_equal(sol.P[-1], np.diag([0.0, 1.0]))
    G = np.zeros((4, 4))
    G[0, 0] = 1.0
    assert np.array_equal(sol.Pcal1[-1], G)
    for Q in sol.Pcal[1:]:
        assert np.all(Q[-1] == 0.0)


def test_agent_equation_without_rate_and_productivity():
    sol = solve_pa(params(B=0.0, r=0.0), TimeGrid(1.0, 200))
    P = sol.P.values
    assert np.max(np.abs(P[:, 1, 1] - 1.0)) <= 1e-12
    assert np.all(P[:, 0, 0] == 0.0) and np.all(P[:, 0, 1] == 0.0) and np.all(P[:, 1, 0] == 0.0)


def test_residuals_within_bounds(generic_solution):
    res = pa_residuals(generic_solution)
    assert set(res) == {"P", *PRINCIPAL_BLOCKS}
    for name, (value, bound) in res.items():
        assert value <= bound, name
    fine = pa_residuals(solve_pa(GENERIC_PA, TimeGrid(1.0, 1000)))
    for name, (value, _) in fine.items():
        assert value <= 1e-6, name


def test_agent_block_matches_generic_follower_solver(generic_solution):
    sol = generic_solution
    P = solve_follower_riccati(sol.spec, sol.grid, validate=False)
    assert np.max(np.abs(P.values - sol.P.values)) <= 1e-12


def test_principal_blocks_match_generic_leader_solver(generic_solution):
    sol = generic_solution
    for method in ("direct", "engine"):
        from stacklq.riccati_solvers import solve_cid_leader_system
        L = solve_cid_leader_system(sol.spec, None, sol.grid, method=method, validate=False)
        for ours, theirs in zip(sol.Pcal, L.blocks):
            assert np.max(np.abs(ours.values - theirs.values)) <= 1e-10


def test_gain_tables_match_generic_feedback(generic_solution):
    sol = generic_solution
    ref = generic_gains(sol)
    for name, table in sol.gains.items():
        assert np.max(np.abs(table.stacked() - ref[name])) <= 1e-8, name


def test_terminal_gains(generic_solution):
    g = {name: table.at(-1) for name, table in generic_solution.gains.items()}
    # payment on the principal's own asset estimate: the first leader block
    # equals diag(1, 0, 0, 0) at the horizon and the others vanish
    assert g["s"]["y_check"] == 1.0
    assert g["d"]["y_check"] == -1.0
    # consumption equals the wealth estimate one-for-one at the horizon
    assert g["c"]["m_hat"] == 1.0
    assert all(v == 0.0 for v in g["e"].values())


def test_terminal_payment_is_the_negated_printed_combination(generic_solution):
    Q1 = generic_solution.Pcal1[-1]
    printed = -Q1[0, 0] + Q1[1, 0]
    assert printed == -1.0
    assert generic_solution.gains["s"].at(-1)["y_check"] == -printed


@settings(max_examples=15, deadline=None)
@given(st.floats(-4.0, 4.0), st.floats(-1.0, 1.0), st.floats(0.1, 1.0))
def test_safe_box_stays_finite(r, B, T):
    p = params(r=r, B=B, T=T)
    assert in_safe_box(p)
    sol = solve_pa(p, TimeGrid(T, 50))
    for path in (sol.P, *sol.Pcal):
        assert np.all(np.isfinite(path.values))
    for table in sol.gains.values():
        assert np.all(np.isfinite(table.values))


def test_fast_growth_is_reported():
    p = params(r=8.0, T=2.0)
    assert not in_safe_box(p)
    with pytest.raises(NonFinite) as info:
        solve_pa(p, TimeGrid(2.0, 400))
    assert info.value.which in PRINCIPAL_BLOCKS


def test_grid_must_match_horizon():
    with pytest.raises(ValidationError):
        solve_pa(GENERIC_PA, TimeGrid(2.0, 10))


# -- simulation -------------------------------------------------------------------------------

def test_noise_free_contract_is_deterministic():
    p = params(sigma=(0.0, 0.0, 0.0), sigma_bar=(0.0, 0.0, 0.0))
    grid = TimeGrid(1.0, 50)
    sol = solve_pa(p, grid)
    a, ca = simulate_pa(p, sol, grid, 8, 3)
    b, cb = simulate_pa(p, sol, grid, 8, 3)
    assert np.array_equal(a.stacked(), b.stacked())
    assert ca["J1"] == cb["J1"] and ca["J2"] == cb["J2"]
    for other in (a.Xhat, a.Xcheck, a.Xhatcheck):
        assert np.max(np.abs(a.X - other)) <= 1e-14
    assert np.all(a.X == a.X[:1])


def test_zero_start_has_zero_mean_asset():
    p = params(B=0.0, r=0.0, y0=0.0, m0=0.0)
    grid = TimeGrid(1.0, 50)
    ens, _ = simulate_pa(p, solve_pa(p, grid), grid, 20000, 5)
    yT = ens.x[:, -1, 0]
    assert abs(yT.mean()) <= 3.0 * yT.std(ddof=1) / np.sqrt(yT.size)


def test_simulation_reports_controls_and_preferences(generic_solution):
    grid = generic_solution.grid
    ens, costs = simulate_pa(GENERIC_PA, generic_solution, grid, 2000, 1)
    assert ens.X.shape == (2000, 101, 4)
    assert ens.u1.shape == (2000, 101, 2) and ens.u2.shape == (2000, 101, 2)
    assert tower_check(ens).passed
    # controls follow the tabulated gains
    k = 37
    s = generic_solution.gains["s"].stacked()[k] @ ens.stacked()[:, k].T
    assert np.allclose(s, ens.u2[:, k, 0], rtol=0, atol=1e-12)
    for key in ("J1", "J2"):
        assert np.isfinite(costs[key].mean) and costs[key].std_error > 0


def test_simulation_rejects_foreign_solution(generic_solution):
    with pytest.raises(ValueError):
        simulate_pa(params(r=0.1), generic_solution, generic_solution.grid, 10, 0)


def test_leader_system_view(generic_solution):
    L = as_leader_system(generic_solution)
    assert L.dim == 4 and L.follower is generic_solution.P
