import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stacklq import cid_model
from stacklq.errors import AssumptionViolated
from stacklq.game_model import GENERIC_CID, GameSpec, embed_cid, random_spec
from stacklq.general_assembly import (compute_sigma_chain, follower_gains_at,
                                      leader_blocks_at, leader_control_form)

from conftest import cid


def general_scalar():
    z = np.zeros((1, 1))
    m = lambda v: np.array([[v]])  # noqa: E731
    return GameSpec(n=1, k1=1, k2=1, A=(m(0.1), m(0.2), m(0.2), m(0.2)),
                    B=(m(1.0), m(0.3), z, m(0.2)), C=(m(1.0), z, m(0.3), m(0.2)),
                    Q1=m(1.0), N1=m(1.0), G1=m(1.0), Q2=m(1.0), N2=m(1.0), G2=m(1.0),
                    x0=[1.0])


def cramer_solve(A, b):
    det = np.linalg.det(A)
    out = np.empty(A.shape[1])
    for j in range(A.shape[1]):
        Aj = A.copy()
        Aj[:, j] = b
        out[j] = np.linalg.det(Aj) / det
    return out


# -- follower coefficients ----------------------------------------------------

def test_zero_solution_gives_negated_state_coefficients(rng):
    spec = random_spec(rng, n=2, control_diffusion=False)
    g = follower_gains_at(spec, np.zeros((2, 2)))
    assert np.array_equal(g.adjoint_drift, -spec.A[0].T)
    assert np.array_equal(g.adjoint_w1, -spec.A[1].T)
    assert np.array_equal(g.adjoint_w3, -spec.A[3].T)
    assert np.all(g.adjoint_leader == 0.0)


def test_scalar_feedback_of_control_independent_game():
    spec = embed_cid(cid(B0=1.5, N1=2.0))
    P = np.array([[0.8]])
    g = follower_gains_at(spec, P)
    assert g.feedback_state[0, 0] == pytest.approx(-1.5 * 0.8 / 2.0, abs=1e-15)
    assert g.feedback_adjoint[0, 0] == pytest.approx(-1.5 / 2.0, abs=1e-15)
    assert np.all(g.feedback_leader == 0.0)
    assert np.all(g.feedback_w1 == 0.0) and np.all(g.feedback_w3 == 0.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_two_by_two_inverse_matches_adjugate(seed):
    rng = np.random.default_rng(seed)
    spec = random_spec(rng, n=2, k1=2, k2=1)
    M = rng.normal(size=(2, 2))
    P = M @ M.T
    g = follower_gains_at(spec, P)
    nbar = spec.N1 + sum(spec.B[i].T @ P @ spec.B[i] for i in (1, 2, 3))
    adj = np.array([[nbar[1, 1], -nbar[0, 1]], [-nbar[1, 0], nbar[0, 0]]])
    inv = adj / (nbar[0, 0] * nbar[1, 1] - nbar[0, 1] * nbar[1, 0])
    theta = P @ spec.B[0] + sum(spec.A[i].T @ P @ spec.B[i] for i in (1, 2, 3))
    assert np.allclose(g.feedback_state, -inv @ theta.T, atol=1e-9, rtol=0)
    assert np.allclose(g.feedback_adjoint, -inv @ spec.B[0].T, atol=1e-9, rtol=0)


def test_singular_effective_weight_raises():
    spec = general_scalar().replace(N1=np.array([[-0.13]]))     # N1 + (0.3^2 + 0.2^2) * 1 = 0
    with pytest.raises(AssumptionViolated) as info:
        follower_gains_at(spec, np.array([[1.0]]), t=1.0, node=7)
    assert info.value.which == "A2.1" and info.value.node == 7


# -- leader blocks ----------------------------------------------------------------

def test_control_independent_blocks():
    spec = embed_cid(cid(A2=0.5))
    fb = leader_blocks_at(spec, np.array([[0.7]])).fbsde
    assert np.array_equal(fb.diff_x[(2, 0)], np.array([[0.5, 0.0], [0.0, 0.0]]))
    assert not fb.diff_z


def test_leader_running_weight_blocks():
    spec = random_spec(np.random.default_rng(3), n=2, control_diffusion=False)
    spec = spec.replace(Q2=np.diag([2.0, 0.0]))
    blk = leader_blocks_at(spec, np.eye(2))
    W = blk.running_weight
    assert W[0, 0] == 2.0
    W = W.copy()
    W[0, 0] = 0.0
    assert np.all(W == 0.0)


def test_leader_adjoint_weight_recomputed():
    spec = embed_cid(GENERIC_CID)
    P = 0.63
    fb = leader_blocks_at(spec, np.array([[P]])).fbsde
    # the follower's adjoint loads the leader control with P * C0
    expected = -(P * GENERIC_CID.C0) ** 2 / GENERIC_CID.N2
    assert fb.gen_x[3][1, 1] == pytest.approx(expected, abs=1e-15)


# -- martingale representation ------------------------------------------------------

def test_zero_blocks_give_zero_integrands():
    blk = leader_blocks_at(general_scalar(), np.array([[1.0]]))
    s = compute_sigma_chain(blk, [np.zeros((2, 2))] * 4)
    for i in (1, 2, 3):
        for M in s.sigma[i].values():
            assert np.all(M == 0.0)


def test_small_blocks_give_first_order_integrands(rng):
    blk = leader_blocks_at(general_scalar(), np.array([[1.0]]))
    Pcal = [1e-6 * rng.normal(size=(2, 2)) for _ in range(4)]
    s = compute_sigma_chain(blk, Pcal)
    for lam in (0, 1, 2, 3):
        sol = np.vstack([s.partial[i][lam] for i in (1, 2, 3)])
        rel = np.max(np.abs(sol - s.rhs[lam])) / np.max(np.abs(s.rhs[lam]))
        assert rel <= 1e-4


def test_step_solutions_match_cramer_rule():
    spec = general_scalar()
    blk = leader_blocks_at(spec, np.array(spec.G1))
    Pcal = [blk.fbsde.terminal, np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((2, 2))]
    s = compute_sigma_chain(blk, Pcal)
    for lam in (0, 1, 2, 3):
        A, K = s.step_matrices[lam], s.rhs[lam]
        sol = np.vstack([s.partial[i][lam] for i in (1, 2, 3)])
        oracle = np.column_stack([cramer_solve(A, K[:, c]) for c in range(K.shape[1])])
        assert np.max(np.abs(sol - oracle)) <= 1e-9 * (1.0 + np.max(np.abs(oracle)))


def test_ill_conditioned_step_is_reported():
    # At the horizon the leader block is nonnegative and the common step matrix
    # stays invertible for valid weights; a negatively scaled leader block
    # reaches the singular point, located by bisection on the determinant.
    spec = general_scalar()
    blk = leader_blocks_at(spec, np.array(spec.G1))
    Pcal = lambda a: [a * blk.fbsde.terminal] + [np.zeros((2, 2))] * 3  # noqa: E731
    det = lambda a: np.linalg.det(  # noqa: E731
        compute_sigma_chain(blk, Pcal(a), check=False).step_matrices[3])
    lo, hi = -50.0, 0.0
    assert det(lo) < 0.0 < det(hi)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if det(mid) < 0.0:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-15:
            break
    a_star = hi
    assert compute_sigma_chain(blk, Pcal(a_star), check=False).cond[3] > 1e12
    with pytest.raises(AssumptionViolated) as info:
        compute_sigma_chain(blk, Pcal(a_star), t=1.0, node=100)
    assert info.value.which == "A2.2"
    assert info.value.node == 100


def test_general_leader_feedback_collapses_to_control_independent_formula(rng):
    spec = embed_cid(GENERIC_CID)
    P = np.array([[0.9]])
    Pcal = [rng.normal(size=(2, 2)) for _ in range(4)]
    Pcal = [0.5 * (M + M.T) for M in Pcal]
    blk = leader_blocks_at(spec, P)
    s = compute_sigma_chain(blk, Pcal)
    general = leader_control_form(blk, Pcal, s, spec)
    direct = cid_model.control_forms(spec, P, Pcal, "reduced").leader
    for level in range(4):
        a = general.get(level, np.zeros((1, 2)))
        b = direct.get(level, np.zeros((1, 2)))
        assert np.max(np.abs(a - b)) <= 1e-8
