"""Coefficients of the game with control-dependent diffusion.

The follower's best response is an affine feedback on its filtered state,
its filtered adjoint ``phi_hat`` and the martingale integrands of that
adjoint.  Substituting it into the state equation yields the leader's
augmented system with forward state ``X = (x, p)`` (``p`` is the leader's
adjoint of ``phi_hat``) and backward state ``Y = (y, phi_hat)``.  This module
builds

* :class:`FollowerGains`: the follower's adjoint coefficients and feedback
  blocks at every node;
* :class:`LeaderBlocks`: the leader's augmented system as a
  :class:`~stacklq.decoupling.FilteredFBSDE` at every node;
* :class:`SigmaSet`: the martingale representation obtained by the four
  level-wise linear solves.

Sign convention: the follower's filtered adjoint satisfies

    d phi_hat = [L0 phi_hat + L1 beta1 + L3 beta3 + L4 u2_hat] dt
                + beta1 dW1 + beta3 dW3,        phi_hat(T) = 0,

with ``L0 = Theta Nbar1^-1 B0^T - A0^T``, ``Lj = Theta Nbar1^-1 Bj^T - Aj^T``
and ``L4 = Theta Nbar1^-1 Xi - P C0 - sum_i Ai^T P Ci`` where
``Theta = P B0 + sum_i Ai^T P Bi``, ``Xi = sum_i Bi^T P Ci`` and
``Nbar1 = N1 + sum_i Bi^T P Bi``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .decoupling import FilteredFBSDE, SigmaChain, project, solve_sigma, y_form
from .errors import AssumptionA21Violated
from .game_model import GameSpec, MatPath, TimeGrid

A21_TOL = 1e-10


# ---------------------------------------------------------------------------
# follower
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FollowerGainsAt:
    """Follower coefficients at a single time.

    ``feedback_*`` are the blocks of
    ``u1 = Fx x_hat + Fphi phi_hat + Fb1 beta1 + Fb3 beta3 + Fu2 u2_hat``.
    """

    effective_weight: np.ndarray
    adjoint_drift: np.ndarray
    adjoint_w1: np.ndarray
    adjoint_w3: np.ndarray
    adjoint_leader: np.ndarray
    feedback_state: np.ndarray
    feedback_adjoint: np.ndarray
    feedback_w1: np.ndarray
    feedback_w3: np.ndarray
    feedback_leader: np.ndarray

    @property
    def feedbacks(self) -> tuple:
        return (self.feedback_state, self.feedback_adjoint, self.feedback_w1,
                self.feedback_w3, self.feedback_leader)


def effective_weight(spec: GameSpec, P: np.ndarray) -> np.ndarray:
    nbar = np.array(spec.N1, dtype=float)
    for i in (1, 2, 3):
        nbar = nbar + spec.B[i].T @ P @ spec.B[i]
    return 0.5 * (nbar + nbar.T)


def check_effective_weight(nbar: np.ndarray, t: float, node=None) -> None:
    eig = np.linalg.eigvalsh(nbar)
    smallest = float(np.min(np.abs(eig)))
    if not np.all(np.isfinite(eig)) or smallest < A21_TOL:
        cond = float(np.max(np.abs(eig)) / smallest) if smallest > 0 else np.inf
        raise AssumptionA21Violated(t, node=node, condition=cond)


def follower_gains_at(spec: GameSpec, P: np.ndarray, t: float = float("nan"),
                      node=None) -> FollowerGainsAt:
    A, B, C = spec.A, spec.B, spec.C
    nbar = effective_weight(spec, P)
    check_effective_weight(nbar, t, node)
    theta = P @ B[0]
    xi = np.zeros((spec.k1, spec.k2))
    leader = -P @ C[0]
    for i in (1, 2, 3):
        theta = theta + A[i].T @ P @ B[i]
        xi = xi + B[i].T @ P @ C[i]
        leader = leader - A[i].T @ P @ C[i]
    # Nbar1^-1 applied to [Theta^T | B0^T | B1^T | B3^T | Xi] in one solve
    rhs = np.hstack([theta.T, B[0].T, B[1].T, B[3].T, xi])
    sol = np.linalg.solve(nbar, rhs)
    n, k2 = spec.n, spec.k2
    f_x, f_phi, f_b1, f_b3 = (sol[:, j * n:(j + 1) * n] for j in range(4))
    f_u2 = sol[:, 4 * n:4 * n + k2]
    return FollowerGainsAt(
        effective_weight=nbar,
        adjoint_drift=theta @ f_phi - A[0].T,
        adjoint_w1=theta @ f_b1 - A[1].T,
        adjoint_w3=theta @ f_b3 - A[3].T,
        adjoint_leader=theta @ f_u2 + leader,
        feedback_state=-f_x,
        feedback_adjoint=-f_phi,
        feedback_w1=-f_b1,
        feedback_w3=-f_b3,
        feedback_leader=-f_u2,
    )


@dataclass(frozen=True)
class FollowerGains:
    """Follower coefficients on every node of ``grid`` (see :class:`FollowerGainsAt`)."""

    grid: TimeGrid
    effective_weight: MatPath
    adjoint_drift: MatPath
    adjoint_w1: MatPath
    adjoint_w3: MatPath
    adjoint_leader: MatPath
    feedback_state: MatPath
    feedback_adjoint: MatPath
    feedback_w1: MatPath
    feedback_w3: MatPath
    feedback_leader: MatPath

    def at(self, k: int) -> FollowerGainsAt:
        return FollowerGainsAt(**{f: getattr(self, f)[k] for f in _GAIN_FIELDS})


_GAIN_FIELDS = ("effective_weight", "adjoint_drift", "adjoint_w1", "adjoint_w3",
                "adjoint_leader", "feedback_state", "feedback_adjoint",
                "feedback_w1", "feedback_w3", "feedback_leader")


def build_follower_gains(spec: GameSpec, P1: MatPath) -> FollowerGains:
    """Evaluate the follower's coefficients at every node of ``P1.grid``."""
    grid = P1.grid
    rows = [follower_gains_at(spec, P1[k], grid.time(k), node=k)
            for k in range(grid.n_steps + 1)]
    data = {f: MatPath(grid, np.array([getattr(r, f) for r in rows]))
            for f in _GAIN_FIELDS}
    return FollowerGains(grid=grid, **data)


def loadings(spec: GameSpec, g: FollowerGainsAt) -> list:
    """``L[j][k] = B_j F_k``: how each follower feedback term loads on the state.

    ``j`` runs over drift (0) and the three noises; ``k = 0..4`` over the
    feedback on (x_hat, phi_hat, beta1, beta3, u2_hat).
    """
    return [[spec.B[j] @ F for F in g.feedbacks] for j in range(4)]


# ---------------------------------------------------------------------------
# leader
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LeaderBlocksAt:
    """Leader's augmented system at one time.

    ``fbsde`` carries all block matrices; ``loadings`` the follower loadings
    ``L[j][k]``; ``initial_state`` the augmented initial value ``(x0, 0)``.
    """

    fbsde: FilteredFBSDE
    loadings: list
    gains: FollowerGainsAt
    leader_adjoint_gain: np.ndarray
    initial_state: np.ndarray

    @property
    def running_weight(self) -> np.ndarray:
        return self.fbsde.gen_x.get(0, np.zeros((self.fbsde.dim,) * 2))

    @property
    def terminal_weight(self) -> np.ndarray:
        return self.fbsde.terminal


def _put(store: dict, key, n: int, r: int, c: int, M: np.ndarray) -> None:
    if key not in store:
        store[key] = np.zeros((2 * n, 2 * n))
    store[key][r * n:(r + 1) * n, c * n:(c + 1) * n] += M


def leader_blocks_at(spec: GameSpec, P: np.ndarray, t: float = float("nan"),
                     node=None) -> LeaderBlocksAt:
    """Assemble the leader's augmented system from the follower's solution ``P``.

    Block indices: rows/columns 0 = ``x`` or ``y``, 1 = ``p`` or ``phi_hat``.
    """
    if spec.has_additive_noise and not spec.control_independent:
        raise NotImplementedError(
            "additive noise is only supported with control-independent diffusion")
    n = spec.n
    A, C = spec.A, spec.C
    g = follower_gains_at(spec, P, t, node)
    L = loadings(spec, g)
    n2 = lambda M: np.linalg.solve(spec.N2, M)  # noqa: E731  N2^-1 M
    # driver of phi_hat is -(d phi_hat drift): ell = -L
    ell0, ell1, ell3 = -g.adjoint_drift, -g.adjoint_w1, -g.adjoint_w3
    ell4 = -g.adjoint_leader
    ell_noise = {1: ell1, 3: ell3}
    V = [C[i] + L[i][4] for i in range(4)]      # C_i + L_i5
    FX, FY, FZ = {}, {}, {}
    SX, SY, SZ = {}, {}, {}
    BX, BY, BZ = {}, {}, {}

    # forward drift
    _put(FX, 0, n, 0, 0, A[0])
    _put(FX, 0, n, 1, 1, ell0.T)
    _put(FX, 1, n, 0, 0, L[0][0])
    _put(FX, 3, n, 0, 1, -V[0] @ n2(ell4.T))
    _put(FY, 0, n, 0, 1, L[0][1])
    _put(FY, 0, n, 1, 0, L[0][1].T)
    _put(FY, 2, n, 0, 0, -C[0] @ n2(C[0].T))
    _put(FY, 3, n, 0, 0, -C[0] @ n2(L[0][4].T) - L[0][4] @ n2(V[0].T))
    _put(FZ, (1, 0), n, 0, 1, L[0][2])
    _put(FZ, (3, 0), n, 0, 1, L[0][3])
    for i in (1, 2, 3):
        _put(FZ, (i, 0), n, 1, 0, L[i][1].T)
        _put(FZ, (i, 2), n, 0, 0, -C[0] @ n2(C[i].T))
        _put(FZ, (i, 3), n, 0, 0, -C[0] @ n2(L[i][4].T) - L[0][4] @ n2(V[i].T))

    # diffusion
    for i in (1, 2, 3):
        _put(SX, (i, 0), n, 0, 0, A[i])
        _put(SX, (i, 1), n, 0, 0, L[i][0])
        _put(SX, (i, 3), n, 0, 1, -V[i] @ n2(ell4.T))
        _put(SY, (i, 0), n, 0, 1, L[i][1])
        _put(SY, (i, 2), n, 0, 0, -C[i] @ n2(C[0].T))
        _put(SY, (i, 3), n, 0, 0, -C[i] @ n2(L[0][4].T) - L[i][4] @ n2(V[0].T))
        _put(SZ, (i, 1, 0), n, 0, 1, L[i][2])
        _put(SZ, (i, 3, 0), n, 0, 1, L[i][3])
        for k in (1, 2, 3):
            _put(SZ, (i, k, 2), n, 0, 0, -C[i] @ n2(C[k].T))
            _put(SZ, (i, k, 3), n, 0, 0,
                 -C[i] @ n2(L[k][4].T) - L[i][4] @ n2(V[k].T))
    for i, col in ((1, 2), (3, 3)):            # p diffuses on W1 and W3 only
        _put(SX, (i, 0), n, 1, 1, ell_noise[i].T)
        _put(SY, (i, 0), n, 1, 0, L[0][col].T)
        for k in (1, 2, 3):
            _put(SZ, (i, k, 0), n, 1, 0, L[k][col].T)

    # generator
    _put(BX, 0, n, 0, 0, spec.Q2)
    _put(BX, 3, n, 1, 1, -ell4 @ n2(ell4.T))
    _put(BY, 0, n, 0, 0, A[0].T)
    _put(BY, 0, n, 1, 1, ell0)
    _put(BY, 1, n, 0, 0, L[0][0].T)
    _put(BY, 3, n, 1, 0, -ell4 @ n2(V[0].T))
    for i in (1, 2, 3):
        _put(BZ, (i, 0), n, 0, 0, A[i].T)
        _put(BZ, (i, 1), n, 0, 0, L[i][0].T)
        _put(BZ, (i, 3), n, 1, 0, -ell4 @ n2(V[i].T))
    for i in (1, 3):
        _put(BZ, (i, 0), n, 1, 1, ell_noise[i])

    terminal = np.zeros((2 * n, 2 * n))
    terminal[:n, :n] = spec.G2
    const = {}
    if spec.has_additive_noise:
        const = {i: np.concatenate([spec.noise[i - 1], np.zeros(n)]) for i in (1, 2, 3)}
    fb = FilteredFBSDE(dim=2 * n, terminal=terminal, drift_x=FX, drift_y=FY,
                       drift_z=FZ, diff_x=SX, diff_y=SY, diff_z=SZ,
                       diff_const=const, gen_x=BX, gen_y=BY, gen_z=BZ)
    x0 = np.concatenate([spec.x0, np.zeros(n)])
    return LeaderBlocksAt(fbsde=fb, loadings=L, gains=g, leader_adjoint_gain=ell4,
                          initial_state=x0)


@dataclass(frozen=True)
class LeaderBlocks:
    """The leader's augmented system on every node."""

    grid: TimeGrid
    nodes: tuple

    def at(self, k: int) -> LeaderBlocksAt:
        return self.nodes[k]


def build_leader_blocks(spec: GameSpec, gains: FollowerGains | None, P1: MatPath) -> LeaderBlocks:
    """Assemble :class:`LeaderBlocksAt` at every node of ``P1.grid``.

    ``gains`` (if given) must come from the same ``P1``; it is recomputed per
    node and compared, so inconsistent inputs are rejected.
    """
    grid = P1.grid
    nodes = []
    for k in range(grid.n_steps + 1):
        b = leader_blocks_at(spec, P1[k], grid.time(k), node=k)
        if gains is not None and not np.allclose(
                gains.feedback_state[k], b.gains.feedback_state, rtol=1e-12, atol=1e-12):
            raise ValueError("gains were not computed from the supplied P1")
        nodes.append(b)
    return LeaderBlocks(grid=grid, nodes=tuple(nodes))


def fbsde_from_blocks(blocks: LeaderBlocksAt) -> FilteredFBSDE:
    return blocks.fbsde


# ---------------------------------------------------------------------------
# martingale representation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SigmaSet:
    """Result of the four level-wise solves at one node.

    ``partial[i][level]``: coefficient of ``X_level`` in ``(Z_i)_level``
    (the unknowns of the step for that level);
    ``sigma[i][level]``: coefficient of ``X_level`` in ``Z_i``;
    ``cond[level]``: infinity-norm condition number of the step matrix.
    """

    sigma: dict
    partial: dict
    cond: dict
    step_matrices: dict
    rhs: dict

    @classmethod
    def from_chain(cls, chain: SigmaChain, rhs: dict) -> "SigmaSet":
        return cls(sigma=chain.sigma, partial=chain.partial, cond=chain.cond,
                   step_matrices=chain.matrices, rhs=rhs)


def step_rhs(fb: FilteredFBSDE, Pcal: list) -> dict:
    """Right-hand sides of the four step systems (for oracles and reports)."""
    from .decoupling import _known_diffusion, coefficient_on
    known = _known_diffusion(fb, Pcal, y_form(Pcal))
    return {lam: np.vstack([coefficient_on(known[i], lam, fb.dim) for i in (1, 2, 3)])
            for lam in (3, 2, 1, 0)}


def compute_sigma_chain(blocks: LeaderBlocksAt, Pcal, t: float = float("nan"),
                        node=None, check: bool = True) -> SigmaSet:
    """Solve for ``Z_i = sum_m Sigma[i][m] X_m`` at one node.

    Raises :class:`~stacklq.errors.AssumptionViolated` naming the failing
    step when a step matrix has condition number above 1e12.
    """
    P = [np.asarray(M, dtype=float) for M in Pcal]
    chain = solve_sigma(blocks.fbsde, P, t=t, node=node, check=check)
    return SigmaSet.from_chain(chain, step_rhs(blocks.fbsde, P))


def leader_control_form(blocks: LeaderBlocksAt, Pcal, sigma: SigmaSet, spec: GameSpec) -> dict:
    """Leader feedback ``u2 = sum_level K[level] X_level`` from the martingale representation.

    ``u2 = -N2^-1 [C0^T y_check + L05^T y_hc + sum_i (Ci^T z_i,check
    + Li5^T z_i,hc) + ell4^T p_hc]``.
    """
    n = spec.n
    m = 2 * n
    C, L = spec.C, blocks.loadings
    Y = y_form(list(Pcal))

    def ycomp(form):
        return {k: M[:n] for k, M in form.items()}

    acc: dict = {}

    def add(level_form, M):
        for k, F in level_form.items():
            acc[k] = acc.get(k, np.zeros((spec.k2, m))) + M @ F

    add(ycomp(project(Y, 2)), C[0].T)
    add(ycomp(project(Y, 3)), L[0][4].T)
    for i in (1, 2, 3):
        Zi = sigma.sigma[i]
        add(ycomp(project(Zi, 2)), C[i].T)
        add(ycomp(project(Zi, 3)), L[i][4].T)
    p_row = np.zeros((n, m))
    p_row[:, n:] = np.eye(n)
    add({3: p_row}, blocks.leader_adjoint_gain.T)
    return {k: -np.linalg.solve(spec.N2, M) for k, M in acc.items()}
