"""Continuous-time principal-agent contract with overlapping information.

The principal's asset ``y`` and the agent's wealth ``m`` evolve as

    dy = (r y + B e - s - d) dt + sum_i sigma_i dW_i
    dm = (r m + s - c) dt       + sum_i sigma_bar_i dW_i

The agent (follower) chooses effort ``e`` and consumption ``c`` from
``(W1, W3)``; the principal (leader) chooses the payment ``s`` and its own
consumption ``d`` from ``(W2, W3)``.

In the game's standard form the state is ``X = (y, m)``, the follower's
control is ``u1 = (e, c)`` and the leader's is ``u2 = (s, d)``.  The
equilibrium equations below correspond to the control weights
``N1 = diag(-1, 1)`` and ``N2 = diag(1, -1)`` with state weights
``G1 = diag(0, 1)`` and ``G2 = diag(1, 0)`` (running and terminal); the
weights are indefinite, so the Riccati equations may blow up and every
backward integration is checked for it.

This module writes the agent's 2x2 equation and the principal's four 4x4
equations directly in the problem's own block notation, independently of
the generic machinery in :mod:`stacklq.cid_model`; tests compare the two.
Simulation and the Monte Carlo certificates reuse the generic closed loop.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .equilibrium import (CostEstimate, Direction, PerturbReport, stationarity_test,
                          summarize, trapezoid_weights)
from .errors import ValidationError
from .filtering_sim import (PathEnsemble, TowerReport, closed_loop_system,
                            simulate_cid_closed_loop, stacked_gains, tower_check)
from .game_model import CHECK, COMMON, HAT, GameSpec, MatPath, TimeGrid
from .ode import BlockLayout, RiccatiField, integrate_backward, residual_bound, riccati_residual
from .riccati_solvers import LeaderSystemCid

__all__ = [
    "PaParams", "PaBlocks", "PaGame", "GainTable", "PaSolution", "GENERIC_PA",
    "SAFE_BOX", "build_pa_game", "agent_field", "principal_field", "solve_pa",
    "pa_residuals", "simulate_pa", "preference_values", "pa_verification",
    "as_leader_system", "in_safe_box",
]

PRINCIPAL_BLOCKS = ("Pcal1", "Pcal2", "Pcal3", "Pcal4")

SAFE_BOX = {"T_max": 1.0, "B_abs_max": 1.0}
"""Parameter region in which the backward integrations are known to stay finite."""


@dataclass(frozen=True)
class PaParams:
    """Economic parameters of the contract problem."""

    r: float
    B: float
    sigma: tuple
    sigma_bar: tuple
    y0: float
    m0: float
    T: float

    def __post_init__(self):
        msgs = []
        for name in ("r", "B", "y0", "m0", "T"):
            v = getattr(self, name)
            try:
                v = float(v)
            except (TypeError, ValueError):
                msgs.append(f"{name} must be a number")
                continue
            if not np.isfinite(v):
                msgs.append(f"{name} must be finite")
            object.__setattr__(self, name, v)
        for name in ("sigma", "sigma_bar"):
            v = np.asarray(getattr(self, name), dtype=float)
            if v.shape != (3,):
                msgs.append(f"{name} must have three entries")
            elif not np.all(np.isfinite(v)):
                msgs.append(f"{name} must be finite")
            object.__setattr__(self, name, tuple(float(x) for x in np.ravel(v)))
        if not msgs and self.T <= 0:
            msgs.append("T must be positive")
        if msgs:
            raise ValidationError(msgs)

    @classmethod
    def from_dict(cls, data: dict) -> "PaParams":
        keys = ("r", "B", "sigma", "sigma_bar", "y0", "m0", "T")
        missing = [k for k in keys if k not in data]
        if missing:
            raise ValidationError([f"missing parameter {k}" for k in missing])
        return cls(**{k: data[k] for k in keys})

    def to_dict(self) -> dict:
        return {"r": self.r, "B": self.B, "sigma": list(self.sigma),
                "sigma_bar": list(self.sigma_bar), "y0": self.y0, "m0": self.m0,
                "T": self.T}


GENERIC_PA = PaParams(r=0.05, B=1.0, sigma=(0.1, 0.1, 0.1), sigma_bar=(0.1, 0.1, 0.1),
                      y0=1.0, m0=1.0, T=1.0)
"""Reference instance used by the verification suite."""


def in_safe_box(params: PaParams) -> bool:
    return params.T <= SAFE_BOX["T_max"] and abs(params.B) <= SAFE_BOX["B_abs_max"]


# ---------------------------------------------------------------------------
# block matrices
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PaBlocks:
    """Two-dimensional coefficients and the 4x4 blocks built from them.

    Time-dependent blocks take the agent's Riccati value ``P`` as argument.
    """

    r_tilde: np.ndarray
    B_tilde: np.ndarray
    alpha1: np.ndarray
    alpha2: np.ndarray
    alpha3: np.ndarray
    sigma_tilde: np.ndarray      # (3, 2): one column vector per Brownian motion
    G1: np.ndarray
    G2: np.ndarray

    @property
    def S(self) -> np.ndarray:
        """``B B^T - alpha1 alpha1^T`` (indefinite: ``diag(B^2, -1)``)."""
        return np.outer(self.B_tilde, self.B_tilde) - np.outer(self.alpha1, self.alpha1)

    @property
    def alpha2_t(self) -> np.ndarray:
        return np.concatenate([self.alpha2, np.zeros(2)])

    @property
    def alpha3_t(self) -> np.ndarray:
        return np.concatenate([self.alpha3, np.zeros(2)])

    def alpha2_bar(self, P: np.ndarray) -> np.ndarray:
        return np.concatenate([np.zeros(2), P @ self.alpha2])

    def alpha3_bar(self, P: np.ndarray) -> np.ndarray:
        return np.concatenate([np.zeros(2), P @ self.alpha3])

    @property
    def Sigma(self) -> np.ndarray:
        """``(3, 4)``: additive noise of the augmented state."""
        return np.concatenate([self.sigma_tilde, np.zeros((3, 2))], axis=1)

    @property
    def calG2(self) -> np.ndarray:
        out = np.zeros((4, 4))
        out[:2, :2] = self.G2
        return out

    @property
    def calB0(self) -> np.ndarray:
        out = np.zeros((4, 4))
        out[:2, 2:] = self.S
        out[2:, :2] = self.S
        return out

    def calA0(self, P: np.ndarray) -> np.ndarray:
        out = np.zeros((4, 4))
        out[:2, :2] = self.r_tilde
        out[2:, 2:] = self.r_tilde + self.S @ P
        return out

    def calA0_bar(self, P: np.ndarray) -> np.ndarray:
        out = np.zeros((4, 4))
        out[:2, :2] = self.S @ P
        return out

    @property
    def leader_weight(self) -> np.ndarray:
        """``alpha3_t alpha3_t^T - alpha2_t alpha2_t^T``."""
        return np.outer(self.alpha3_t, self.alpha3_t) - np.outer(self.alpha2_t, self.alpha2_t)

    def cross(self, P: np.ndarray) -> np.ndarray:
        """``alpha3_t alpha3_bar^T - alpha2_t alpha2_bar^T`` (acts on the common estimate)."""
        return (np.outer(self.alpha3_t, self.alpha3_bar(P))
                - np.outer(self.alpha2_t, self.alpha2_bar(P)))

    def cross_bar(self, P: np.ndarray) -> np.ndarray:
        """``alpha3_bar alpha3_bar^T - alpha2_bar alpha2_bar^T``."""
        return (np.outer(self.alpha3_bar(P), self.alpha3_bar(P))
                - np.outer(self.alpha2_bar(P), self.alpha2_bar(P)))


@dataclass(frozen=True)
class PaGame:
    params: PaParams
    blocks: PaBlocks
    spec: GameSpec


def build_pa_game(params: PaParams) -> PaGame:
    """Coefficients of the contract problem and the equivalent :class:`GameSpec`."""
    r, B = params.r, params.B
    blk = PaBlocks(
        r_tilde=np.diag([r, r]),
        B_tilde=np.array([B, 0.0]),
        alpha1=np.array([0.0, -1.0]),
        alpha2=np.array([-1.0, 1.0]),
        alpha3=np.array([-1.0, 0.0]),
        sigma_tilde=np.stack([np.array([s, sb]) for s, sb in zip(params.sigma, params.sigma_bar)]),
        G1=np.diag([0.0, 1.0]),
        G2=np.diag([1.0, 0.0]),
    )
    z = np.zeros((2, 2))
    spec = GameSpec(
        n=2, k1=2, k2=2,
        A=(blk.r_tilde, z, z, z),
        B=(np.column_stack([blk.B_tilde, blk.alpha1]), z, z, z),
        C=(np.column_stack([blk.alpha2, blk.alpha3]), z, z, z),
        Q1=blk.G1, N1=np.diag([-1.0, 1.0]), G1=blk.G1,
        Q2=blk.G2, N2=np.diag([1.0, -1.0]), G2=blk.G2,
        x0=np.array([params.y0, params.m0]),
        noise=tuple(blk.sigma_tilde),
    )
    return PaGame(params=params, blocks=blk, spec=spec)


# ---------------------------------------------------------------------------
# Riccati systems
# ---------------------------------------------------------------------------

def _agent_rhs(blk: PaBlocks, P: np.ndarray) -> np.ndarray:
    r = blk.r_tilde
    return -(P @ r + r.T @ P + P @ blk.S @ P.T + blk.G1)


def agent_field(blk: PaBlocks) -> RiccatiField:
    """The agent's 2x2 Riccati equation, ``P(T) = G1``."""
    return RiccatiField(lambda t, P: _agent_rhs(blk, P), blk.G1.copy(), name="P")


def _principal_rhs(blk: PaBlocks, P: np.ndarray, Q: list) -> list:
    """Derivatives of the principal's four blocks given the agent's ``P``."""
    Q1, Q2, Q3, Q4 = Q
    A = blk.calA0(P)
    Ab = blk.calA0_bar(P)
    Bc = blk.calB0
    W = blk.leader_weight
    Ct = blk.cross(P)
    Ch = Ct.T
    Cb = blk.cross_bar(P)
    M = Bc + W
    AA = A + Ab
    d1 = Q1 @ A + A.T @ Q1 + Q1 @ Bc @ Q1 + blk.calG2
    d2 = (Q2 @ AA + AA.T @ Q2 + Q1 @ Bc @ Q2 + Q2 @ Bc @ Q1 + Q2 @ Bc @ Q2
          + Q1 @ Ab + Ab.T @ Q1)
    d3 = (Q3 @ A + A.T @ Q3 + Q1 @ M @ Q3 + Q3 @ M @ Q1 + Q3 @ M @ Q3 + Q1 @ W @ Q1)
    S123 = Q1 + Q2 + Q3
    d4 = (Q4 @ (AA + Ct) + (AA.T + Ch) @ Q4
          + Q4 @ M @ S123 + S123 @ M @ Q4 + Q4 @ M @ Q4
          + Q3 @ (Ab + Ct) + (Ab.T + Ch) @ Q3
          + Q2 @ M @ Q3 + Q3 @ M @ Q2
          + (Q1 + Q2) @ Ct + Ch @ (Q1 + Q2)
          + Q1 @ W @ Q2 + Q2 @ W @ Q1 + Q2 @ W @ Q2 + Cb)
    return [-d1, -d2, -d3, -d4]


def principal_field(blk: PaBlocks) -> RiccatiField:
    """Agent and principal systems integrated jointly.

    The principal's blocks depend on the agent's ``P``; integrating them
    together gives exact RK4 stage values of ``P``.  The system is lower
    triangular (block 1; blocks 2 and 3 from 1; block 4 from all).
    """
    layout = BlockLayout([("P", (2, 2))] + [(b, (4, 4)) for b in PRINCIPAL_BLOCKS])
    term = {"P": blk.G1, "Pcal1": blk.calG2}
    for b in PRINCIPAL_BLOCKS[1:]:
        term[b] = np.zeros((4, 4))

    def rhs(t, flat):
        v = layout.unpack(flat)
        P = v["P"]
        d = _principal_rhs(blk, P, [v[b] for b in PRINCIPAL_BLOCKS])
        out = {"P": _agent_rhs(blk, P)}
        out.update(zip(PRINCIPAL_BLOCKS, d))
        return layout.pack(out)

    return RiccatiField(rhs, layout.pack(term), layout, name="principal")


# ---------------------------------------------------------------------------
# gain tables
# ---------------------------------------------------------------------------

FOLLOWER_VARS = ("y_hat", "m_hat", "p1_hat", "p2_hat",
                 "y_common", "m_common", "p1_common", "p2_common")
LEADER_VARS = ("y_check", "m_check", "p1_check", "p2_check",
               "y_common", "m_common", "p1_common", "p2_common")


@dataclass(frozen=True)
class GainTable:
    """Feedback coefficients of one control on its estimates, per node.

    ``values[k, j]`` multiplies variable ``names[j]`` at node ``k``.
    """

    control: str
    names: tuple
    values: np.ndarray

    def at(self, k: int) -> dict:
        return dict(zip(self.names, (float(v) for v in self.values[k])))

    def stacked(self, m: int = 4) -> np.ndarray:
        """Coefficients on the stacked state ``(X, X_hat, X_check, X_common)``."""
        own = HAT if self.names[0].endswith("_hat") else CHECK
        out = np.zeros((self.values.shape[0], 4 * m))
        out[:, own * m:(own + 1) * m] = self.values[:, :4]
        out[:, COMMON * m:(COMMON + 1) * m] = self.values[:, 4:]
        return out


def _gain_rows(P: np.ndarray, Q: list, B: float) -> dict:
    """Entry formulas of the four controls at one node (1-based entries ``Q[k][i, j]``)."""
    Q1, Q2, Q3, Q4 = Q

    def e(M, i, j):
        return M[i - 1, j - 1]

    # agent: coefficients on (y_hat, m_hat, p_hat) and (y_hc, m_hc, p_hc)
    eff = [B * (e(P, 1, 1) + e(Q1, 3, 1) + e(Q2, 3, 1)),
           B * (e(P, 1, 2) + e(Q1, 3, 2) + e(Q2, 3, 2)),
           B * (e(Q1, 3, 3) + e(Q2, 3, 3)),
           B * (e(Q1, 3, 4) + e(Q2, 3, 4)),
           B * (e(Q3, 3, 1) + e(Q4, 3, 1)),
           B * (e(Q3, 3, 2) + e(Q4, 3, 2)),
           B * (e(Q3, 3, 3) + e(Q4, 3, 3)),
           B * (e(Q3, 3, 4) + e(Q4, 3, 4))]
    con = [e(P, 2, 1) + e(Q1, 4, 1) + e(Q2, 4, 1),
           e(P, 2, 2) + e(Q1, 4, 2) + e(Q2, 4, 2),
           e(Q1, 4, 3) + e(Q2, 4, 3),
           e(Q1, 4, 4) + e(Q2, 4, 4),
           e(Q3, 4, 1) + e(Q4, 4, 1),
           e(Q3, 4, 2) + e(Q4, 4, 2),
           e(Q3, 4, 3) + e(Q4, 4, 3),
           e(Q3, 4, 4) + e(Q4, 4, 4)]
    # principal: s = -alpha2^T (y_check + P p_hc), d = alpha3^T (y_check + P p_hc)
    pay = [e(Q1, 1, j) - e(Q1, 2, j) + e(Q3, 1, j) - e(Q3, 2, j) for j in (1, 2, 3, 4)]
    pay += [e(Q2, 1, j) - e(Q2, 2, j) + e(Q4, 1, j) - e(Q4, 2, j) for j in (1, 2)]
    pay += [e(Q2, 1, 3) - e(Q2, 2, 3) + e(Q4, 1, 3) - e(Q4, 2, 3) + e(P, 1, 1) - e(P, 1, 2),
            e(Q2, 1, 4) - e(Q2, 2, 4) + e(Q4, 1, 4) - e(Q4, 2, 4) + e(P, 2, 1) - e(P, 2, 2)]
    dra = [-(e(Q1, 1, j) + e(Q3, 1, j)) for j in (1, 2, 3, 4)]
    dra += [-(e(Q2, 1, j) + e(Q4, 1, j)) for j in (1, 2)]
    dra += [-(e(Q2, 1, 3) + e(Q4, 1, 3) + e(P, 1, 1)),
            -(e(Q2, 1, 4) + e(Q4, 1, 4) + e(P, 2, 1))]
    return {"e": eff, "c": con, "s": pay, "d": dra}


# ---------------------------------------------------------------------------
# solution
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PaSolution:
    """Agent Riccati ``P`` (2x2), principal blocks ``Pcal1..4`` (4x4) and gains."""

    game: PaGame
    grid: TimeGrid
    P: MatPath
    Pcal1: MatPath
    Pcal2: MatPath
    Pcal3: MatPath
    Pcal4: MatPath
    gains: dict = field(repr=False)

    @property
    def Pcal(self) -> tuple:
        return (self.Pcal1, self.Pcal2, self.Pcal3, self.Pcal4)

    @property
    def spec(self) -> GameSpec:
        return self.game.spec


def solve_pa(params: PaParams, grid: TimeGrid) -> PaSolution:
    """Integrate the agent's and the principal's equations and tabulate the gains.

    Raises :class:`~stacklq.errors.NonFinite` (with the offending block)
    when any equation blows up.
    """
    if abs(grid.horizon_T - params.T) > 1e-12 * max(1.0, params.T):
        raise ValidationError([f"grid horizon {grid.horizon_T} differs from T={params.T}"])
    game = build_pa_game(params)
    fld = principal_field(game.blocks)
    parts = fld.split(integrate_backward(fld, grid))
    P = parts["P"]
    Q = [parts[b] for b in PRINCIPAL_BLOCKS]
    rows = {name: np.empty((grid.n_steps + 1, 8)) for name in ("e", "c", "s", "d")}
    for k in range(grid.n_steps + 1):
        for name, row in _gain_rows(P[k], [q[k] for q in Q], params.B).items():
            rows[name][k] = row
    gains = {name: GainTable(name, FOLLOWER_VARS if name in "ec" else LEADER_VARS, v)
             for name, v in rows.items()}
    return PaSolution(game=game, grid=grid, P=P, Pcal1=Q[0], Pcal2=Q[1], Pcal3=Q[2],
                      Pcal4=Q[3], gains=gains)


def pa_residuals(sol: PaSolution) -> dict:
    """``{block: (residual, bound)}`` for the agent path and the four principal blocks."""
    blk, grid = sol.game.blocks, sol.grid
    out = {"P": (riccati_residual(sol.P, agent_field(blk), grid), residual_bound(sol.P, grid))}
    v = sol.P.values
    Q = np.stack([q.values for q in sol.Pcal], axis=1)
    h = grid.h
    worst = np.zeros(4)
    for k in range(1, grid.n_steps):
        d = _principal_rhs(blk, v[k], list(Q[k]))
        for j in range(4):
            fd = (Q[k + 1, j] - Q[k - 1, j]) / (2.0 * h)
            worst[j] = max(worst[j], float(np.max(np.abs(fd - d[j]))))
    for j, name in enumerate(PRINCIPAL_BLOCKS):
        out[name] = (float(worst[j]), residual_bound(sol.Pcal[j], grid))
    return out


def as_leader_system(sol: PaSolution) -> LeaderSystemCid:
    """The solution in the form used by the generic simulation and tests."""
    return LeaderSystemCid(P1=sol.Pcal1, P2=sol.Pcal2, P3=sol.Pcal3, P4=sol.Pcal4,
                           grid=sol.grid, model="reduced", follower=sol.P, Pi=None,
                           spec=sol.spec)


def generic_gains(sol: PaSolution) -> dict:
    """Gain tables recomputed from the generic feedback laws (for cross-checks)."""
    L = as_leader_system(sol)
    N = sol.grid.n_steps
    U1 = np.empty((N + 1, 2, 16))
    U2 = np.empty((N + 1, 2, 16))
    for k in range(N + 1):
        U1[k], U2[k] = stacked_gains(sol.spec, L, k)
    return {"e": U1[:, 0], "c": U1[:, 1], "s": U2[:, 0], "d": U2[:, 1]}


# ---------------------------------------------------------------------------
# simulation
# ---------------------------------------------------------------------------

def preference_values(ensemble: PathEnsemble) -> dict:
    """Preferences (larger is better) of both parties along simulated paths.

    Agent:     ``1/2 E[ int (c^2 - e^2 + m^2) dt + m(T)^2 ]``
    Principal: ``1/2 E[ int (d^2 - s^2 + y^2) dt + y(T)^2 ]``
    """
    w = trapezoid_weights(ensemble.grid)
    y, m = ensemble.x[:, :, 0], ensemble.x[:, :, 1]
    e, c = ensemble.u1[:, :, 0], ensemble.u1[:, :, 1]
    s, d = ensemble.u2[:, :, 0], ensemble.u2[:, :, 1]
    agent = 0.5 * ((c ** 2 - e ** 2 + m ** 2) @ w + m[:, -1] ** 2)
    principal = 0.5 * ((d ** 2 - s ** 2 + y ** 2) @ w + y[:, -1] ** 2)
    return {"J1": summarize(agent), "J2": summarize(principal)}


def simulate_pa(params: PaParams, sol: PaSolution, grid: TimeGrid, n_paths: int,
                seed: int, path_offset: int = 0):
    """Simulate the equilibrium contract.

    Returns ``(ensemble, costs)`` where the ensemble's augmented state is
    ``(y, m, p1, p2)`` at each information level, ``u1 = (e, c)``,
    ``u2 = (s, d)``, and ``costs`` maps ``"J1"``/``"J2"`` to
    :class:`~stacklq.equilibrium.CostEstimate` preference values.
    """
    if sol.grid != grid:
        raise ValueError("solution was computed on a different grid")
    if sol.game.params != params:
        raise ValueError("solution was computed for different parameters")
    L = as_leader_system(sol)
    ens = simulate_cid_closed_loop(sol.spec, None, L, n_paths, seed, path_offset=path_offset)
    return ens, preference_values(ens)


def default_directions() -> tuple:
    """Perturbation directions of the certificates.

    The agent's consumption reacts to its own wealth estimate and the
    principal's payment to its own asset estimate; both controls carry a
    positive weight, so the perturbed cost is convex along them.
    """
    g1 = np.zeros((2, 4))
    g1[1, 1] = 1.0
    g2 = np.zeros((2, 4))
    g2[0, 0] = 1.0
    return Direction("follower", g1), Direction("leader", g2)


def pa_verification(sol: PaSolution, n_paths_tower: int, n_paths_stat: int, seed: int,
                    epsilons=(-0.04, -0.02, 0.02, 0.04)) -> dict:
    """Tower check and stationarity tests of both parties."""
    L = as_leader_system(sol)
    system = closed_loop_system(sol.spec, L)
    ens = simulate_cid_closed_loop(sol.spec, None, L, n_paths_tower, seed, system=system)
    tower: TowerReport = tower_check(ens)
    reports: dict = {}
    for direction in default_directions():
        rep: PerturbReport = stationarity_test(sol.spec, None, L, direction, epsilons,
                                               n_paths_stat, seed, system=system)
        reports[direction.player] = rep
    return {"tower": tower, "stationarity": reports}


def cost_summary(costs: dict) -> dict:
    return {k: v.to_dict() for k, v in costs.items() if isinstance(v, CostEstimate)}
