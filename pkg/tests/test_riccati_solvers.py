import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stacklq import cid_model
from stacklq.errors import AssumptionViolated, NonFinite, ValidationError
from stacklq.game_model import GENERIC_CID, GameSpec, MatPath, TimeGrid, embed_cid, random_spec
from stacklq.ode import RiccatiField, integrate_backward, residual_bound, riccati_residual
from stacklq.riccati_solvers import (attempt_general_leader_system, cid_leader_field,
                                     follower_field, residuals, solve_cid, solve_cid_leader_system,
                                     solve_follower_riccati)

from conftest import cid


def scalar_field(rhs, terminal):
    return RiccatiField(lambda t, P: rhs(P), np.array([[terminal]], dtype=float))


def square_field():
    return scalar_field(lambda P: P @ P, 1.0)


# -- backward integrator ---------------------------------------------------

def test_zero_field_gives_constant_path():
    G = np.array([[2.0, 0.5], [0.5, 1.0]])
    path = integrate_backward(RiccatiField(lambda t, P: np.zeros_like(P), G), TimeGrid(1.0, 10))
    assert np.array_equal(path.values, np.broadcast_to(G, path.values.shape))
    assert riccati_residual(path, RiccatiField(lambda t, P: np.zeros_like(P), G),
                            TimeGrid(1.0, 10)) == 0.0


def test_linear_field():
    path = integrate_backward(scalar_field(lambda P: -np.ones_like(P), 2.0), TimeGrid(1.0, 7))
    assert path[0][0, 0] == pytest.approx(3.0, abs=1e-13)


def test_quadratic_field_matches_analytic_solution():
    grid = TimeGrid(1.0, 1000)
    path = integrate_backward(square_field(), grid)
    exact = 1.0 / (2.0 - grid.nodes)
    assert abs(path[0][0, 0] - 0.5) <= 1e-9
    assert np.max(np.abs(path.values[:, 0, 0] - exact)) <= 1e-9


def test_fourth_order_convergence():
    errs = [abs(integrate_backward(square_field(), TimeGrid(1.0, n))[0][0, 0] - 0.5)
            for n in (10, 20)]
    assert 12.0 <= errs[0] / errs[1] <= 20.0


def test_blow_up_is_reported():
    # P' = -P^2 with P(T) = 1 is 1 / (1 - (T - t)): it explodes at t = T - 1 = 2
    grid = TimeGrid(3.0, 3000)
    with pytest.raises(NonFinite) as info:
        integrate_backward(scalar_field(lambda P: -P @ P, 1.0), grid)
    assert 1.9 < info.value.t < 2.1


def test_residual_of_accurate_path_is_small():
    grid = TimeGrid(1.0, 1000)
    path = integrate_backward(square_field(), grid)
    assert riccati_residual(path, square_field(), grid) <= 1e-5
    assert riccati_residual(path, square_field(), grid) <= residual_bound(path, grid)


def test_residual_detects_corrupted_node():
    grid = TimeGrid(1.0, 100)
    path = integrate_backward(square_field(), grid)
    v = path.values.copy()
    v[40, 0, 0] += 1.0
    assert riccati_residual(MatPath(grid, v), square_field(), grid) >= 0.5 / grid.h


# -- follower --------------------------------------------------------------

def test_follower_analytic_case():
    spec = cid(A0=0.0, A1=0.0, A2=0.0, A3=0.0, B0=1.0, N1=1.0, Q1=0.0, G1=1.0)
    grid = TimeGrid(1.0, 1000)
    t0 = time.perf_counter()
    P = solve_follower_riccati(spec, grid)
    assert time.perf_counter() - t0 < 0.5
    assert np.max(np.abs(P.values[:, 0, 0] - 1.0 / (2.0 - grid.nodes))) <= 1e-8


def test_follower_zero_weights_give_zero():
    P = solve_follower_riccati(cid(Q1=0.0, G1=0.0), TimeGrid(1.0, 50))
    assert np.all(P.values == 0.0)


def test_follower_two_dimensional_richardson():
    z = np.zeros((2, 2))
    spec = GameSpec(n=2, k1=2, k2=1, A=(np.array([[0.0, 1.0], [0.0, 0.0]]), z, z, z),
                    B=(np.eye(2), z, z, z), C=(np.ones((2, 1)),) + (np.zeros((2, 1)),) * 3,
                    Q1=np.eye(2), N1=np.eye(2), G1=np.eye(2), Q2=np.eye(2), N2=[[1.0]],
                    G2=np.eye(2), x0=[1.0, 1.0])
    coarse = solve_follower_riccati(spec, TimeGrid(1.0, 100))[0]
    fine = solve_follower_riccati(spec, TimeGrid(1.0, 200))[0]
    assert np.max(np.abs(coarse - fine)) <= 1e-7


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_follower_symmetric_and_residual_second_order(seed):
    spec = random_spec(np.random.default_rng(seed), n=2, k1=1, k2=1, control_diffusion=False)
    fld = follower_field(spec)
    res = []
    for n_steps in (100, 200):
        grid = TimeGrid(1.0, n_steps)
        P = solve_follower_riccati(spec, grid)
        assert np.max(np.abs(P.values - np.swapaxes(P.values, 1, 2))) <= 1e-9
        res.append(residuals(fld, P, grid)["P"][0])
    # central-difference defect of an RK4 solution is O(h^2)
    assert res[1] <= 0.3 * res[0] + 1e-13


@settings(max_examples=40, deadline=None)
@given(st.floats(-1, 1), st.floats(0, 0.5), st.floats(0, 0.5), st.floats(0, 0.5),
       st.floats(0.1, 2), st.floats(0, 2), st.floats(0.2, 3), st.floats(0, 2))
def test_scalar_follower_nonnegative(a0, a1, a2, a3, b0, q1, n1, g1):
    spec = cid(A0=a0, A1=a1, A2=a2, A3=a3, B0=b0, Q1=q1, N1=n1, G1=g1)
    P = solve_follower_riccati(spec, TimeGrid(1.0, 50))
    assert np.all(P.values >= -1e-12)


def test_singular_effective_weight_rejected():
    spec = embed_cid(cid(N1=0.0))
    with pytest.raises(AssumptionViolated) as info:
        solve_follower_riccati(spec, TimeGrid(1.0, 10))
    assert info.value.which == "A2.1"


def test_invalid_spec_rejected():
    with pytest.raises(ValidationError):
        solve_follower_riccati(cid(N2=0.0), TimeGrid(1.0, 10))


# -- leader, control-independent case ----------------------------------------

def test_leader_zero_weights_leave_only_the_adjoint_block():
    # without leader weights every block vanishes except the adjoint-adjoint
    # entry of the common block, which is driven by the follower's reaction
    # to the leader's control and never touches the state (p stays 0)
    L = solve_cid(cid(Q2=0.0, G2=0.0), TimeGrid(1.0, 50))
    for block in L.blocks[:3]:
        assert np.all(block.values == 0.0)
    mask = np.ones((2, 2), dtype=bool)
    mask[1, 1] = False
    assert np.all(L.P4.values[:, mask] == 0.0)
    assert np.all(L.P4.values[:-1, 1, 1] != 0.0)


def test_leader_decoupled_case():
    spec = cid(A0=0.0, A1=0.0, A2=0.0, A3=0.0, B0=0.0, C0=0.0, Q2=1.0, G2=1.0)
    L = solve_cid(spec, TimeGrid(1.0, 100))
    assert L.P1[0][0, 0] == pytest.approx(2.0, abs=1e-12)
    for block in (L.P2, L.P3, L.P4):
        assert np.all(block.values == 0.0)


def test_generic_leader_residuals_and_richardson():
    fine_grid = TimeGrid(1.0, 3000)
    fld = cid_leader_field(GENERIC_CID)
    path = integrate_backward(fld, fine_grid)
    for name, (value, bound) in residuals(fld, path, fine_grid).items():
        assert value <= 1e-6, name
        assert value <= bound, name
    grid = TimeGrid(1.0, 100)
    coarse = solve_cid(GENERIC_CID, grid)
    fine = solve_cid(GENERIC_CID, grid.refine())
    for c, f in zip(coarse.blocks, fine.blocks):
        assert np.max(np.abs(c[0] - f[0])) <= 1e-6


def test_direct_and_engine_equations_agree(rng):
    spec = random_spec(rng, n=2, control_diffusion=False)
    grid = TimeGrid(1.0, 40)
    a = solve_cid_leader_system(spec, None, grid, method="direct")
    b = solve_cid_leader_system(spec, None, grid, method="engine")
    for x, y in zip(a.blocks, b.blocks):
        assert np.max(np.abs(x.values - y.values)) <= 1e-10


def test_hat_block_ignores_check_and_common_blocks(rng):
    spec = embed_cid(GENERIC_CID)
    P = np.array([[0.7]])
    Pcal = [rng.normal(size=(2, 2)) for _ in range(4)]
    base = cid_model.reduced_leader_rhs(spec, P, Pcal)
    other = [Pcal[0], Pcal[1], Pcal[2] + 1.0, Pcal[3] - 3.0]
    changed = cid_model.reduced_leader_rhs(spec, P, other)
    assert np.array_equal(base[1], changed[1])
    assert np.array_equal(base[0], changed[0])


def test_follower_input_must_match():
    grid = TimeGrid(1.0, 20)
    P = solve_follower_riccati(cid(G1=2.0), grid)
    with pytest.raises(ValueError):
        solve_cid_leader_system(GENERIC_CID, P, grid)
    good = solve_follower_riccati(GENERIC_CID, grid)
    L = solve_cid_leader_system(GENERIC_CID, good, grid)
    assert np.array_equal(L.follower.values, good.values)


def test_extended_model_carries_lyapunov_block():
    L = solve_cid(GENERIC_CID, TimeGrid(1.0, 20), model="extended")
    assert L.dim == 3 and L.Pi is not None


# -- general diffusion -----------------------------------------------------------

def test_general_system_reduces_to_control_independent_case(rng):
    grid = TimeGrid(1.0, 40)
    spec = embed_cid(cid(A0=rng.normal() * 0.3, A2=0.4, B0=1.3, Q2=0.5))
    general = attempt_general_leader_system(spec, grid)
    assert general.ok
    direct = solve_cid(spec, grid)
    for g, d in zip(general.blocks, direct.blocks):
        assert np.max(np.abs(g.values - d.values)) <= 1e-6


def test_general_zero_weights():
    res = attempt_general_leader_system(embed_cid(cid(Q2=0.0, G2=0.0)), TimeGrid(1.0, 20))
    assert res.ok
    assert all(np.all(b.values == 0.0) for b in res.blocks[:3])
    assert np.all(res.P4.values[:, 0, :] == 0.0) and np.all(res.P4.values[:, :, 0] == 0.0)


def test_general_failure_is_reported_not_raised():
    spec = embed_cid(cid(N1=1.0))
    z = np.zeros((1, 1))
    # diffusion B1 = 1 with N1 = -G1 makes N1 + B1^T G1 B1 singular at T
    spec = spec.replace(B=(spec.B[0], np.ones((1, 1)), z, z), N1=np.array([[-1.0]]))
    res = attempt_general_leader_system(spec, TimeGrid(1.0, 20))
    assert not res.ok
    assert isinstance(res.failure, AssumptionViolated)
    assert res.failure.node == 20
