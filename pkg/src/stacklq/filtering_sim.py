"""Monte Carlo simulation of the closed loop and its filtering estimates.

The equilibrium closed loop of a control-independent game is a linear SDE
for the stacked state

    Xi = (X, X_hat, X_check, X_hatcheck),

i.e. the augmented state and its projections on the follower's, the
leader's and the common information.  Each projection is driven only by
the Brownian components its filtration contains.  Every component is
simulated on the same increments, so the estimates are pathwise
consistent with the state.

:func:`nested_conditional_mc` provides an independent check of the
projections: it keeps the observed increments of a path and averages the
state over fresh draws of the unobserved ones.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import cid_model
from .decoupling import closed_loop, solve_sigma, stacked_matrices
from .game_model import (CHECK, COMMON, FULL, HAT, LEVELS, GameSpec, InfoPattern,
                         MatPath, TimeGrid, as_game)
from .kernels import LinearSDE, simulate_group_means, simulate_paths
from .riccati_solvers import LeaderSystemCid

__all__ = [
    "ClosedLoopSystem", "PathEnsemble", "TowerReport", "closed_loop_system",
    "simulate_cid_closed_loop", "nested_conditional_mc", "tower_check",
    "projection_correlations",
]


@dataclass(frozen=True)
class ClosedLoopSystem:
    """Linear SDE of the stacked state plus the feedback matrices.

    ``follower_gain[k]`` (k1 x 4m) and ``leader_gain[k]`` (k2 x 4m) map the
    stacked state at node ``k`` to the equilibrium controls.
    """

    spec: GameSpec
    leader: LeaderSystemCid
    sde: LinearSDE
    follower_gain: np.ndarray
    leader_gain: np.ndarray
    chains: list = field(repr=False)

    @property
    def grid(self) -> TimeGrid:
        return self.sde.grid

    @property
    def m(self) -> int:
        return self.leader.dim

    def block(self, level: int) -> slice:
        return slice(level * self.m, (level + 1) * self.m)


def node_fbsde(L: LeaderSystemCid, k: int):
    """Leader forward-backward system frozen at node ``k``."""
    Pi = L.Pi[k] if L.Pi is not None else None
    return cid_model.leader_fbsde(L.spec, L.follower[k], L.model, Pi)


def stacked_gains(spec: GameSpec, L: LeaderSystemCid, k: int):
    m = L.dim
    Pi = L.Pi[k] if L.Pi is not None else None
    forms = cid_model.control_forms(spec, L.follower[k], L.at(k), L.model, Pi)
    U1 = np.zeros((spec.k1, 4 * m))
    U2 = np.zeros((spec.k2, 4 * m))
    for level, M in forms.follower.items():
        U1[:, level * m:(level + 1) * m] += M
    for level, M in forms.leader.items():
        U2[:, level * m:(level + 1) * m] += M
    return U1, U2


def closed_loop_system(spec, L: LeaderSystemCid) -> ClosedLoopSystem:
    """Assemble the stacked closed loop from the solved Riccati systems.

    Coefficients are evaluated at the left node of every step (the Riccati
    solutions live on the simulation grid, so no interpolation is needed).
    """
    spec = as_game(spec)
    grid = L.grid
    N, m = grid.n_steps, L.dim
    D = np.empty((N, 4 * m, 4 * m))
    G = np.empty((N, 3, 4 * m, 4 * m))
    s = None
    U1 = np.empty((N + 1, spec.k1, 4 * m))
    U2 = np.empty((N + 1, spec.k2, 4 * m))
    chains = []
    for k in range(N + 1):
        fb = node_fbsde(L, k)
        Pk = L.at(k)
        chain = solve_sigma(fb, Pk, t=grid.time(k), node=k, check=False)
        chains.append(chain)
        U1[k], U2[k] = stacked_gains(spec, L, k)
        if k == N:
            break
        Dk, Gk, sk = stacked_matrices(closed_loop(fb, Pk, chain), m)
        D[k] = Dk
        G[k] = Gk[1:]
        s = sk[1:]
    z0 = np.zeros(4 * m)
    x0 = np.zeros(m)
    x0[:spec.n] = spec.x0
    for level in LEVELS:
        z0[level * m:(level + 1) * m] = x0
    sde = LinearSDE(grid, D, G, s, z0)
    return ClosedLoopSystem(spec=spec, leader=L, sde=sde, follower_gain=U1,
                            leader_gain=U2, chains=chains)


@dataclass
class PathEnsemble:
    """Simulated closed-loop paths.

    Arrays have shape ``(n_paths, n_steps + 1, .)``; increments have shape
    ``(n_paths, n_steps, 3)`` with columns ``dW1, dW2, dW3``.
    """

    grid: TimeGrid
    seed: int
    path_ids: np.ndarray
    X: np.ndarray
    Xhat: np.ndarray
    Xcheck: np.ndarray
    Xhatcheck: np.ndarray
    u1: np.ndarray
    u2: np.ndarray
    dW: np.ndarray
    n: int

    @property
    def n_paths(self) -> int:
        return self.X.shape[0]

    @property
    def dW1(self) -> np.ndarray:
        return self.dW[:, :, 0]

    @property
    def dW2(self) -> np.ndarray:
        return self.dW[:, :, 1]

    @property
    def dW3(self) -> np.ndarray:
        return self.dW[:, :, 2]

    @property
    def x(self) -> np.ndarray:
        """Physical state (top block of the augmented state)."""
        return self.X[:, :, :self.n]

    def level(self, level: int) -> np.ndarray:
        return (self.X, self.Xhat, self.Xcheck, self.Xhatcheck)[level]

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.X, self.Xhat, self.Xcheck, self.Xhatcheck], axis=2)


def _check_inputs(spec: GameSpec, P: MatPath | None, L: LeaderSystemCid) -> None:
    if P is None:
        return
    if P.grid != L.grid:
        raise ValueError("P and the leader system live on different grids")
    if L.follower is not None and not np.array_equal(P.values, L.follower.values):
        scale = 1.0 + L.follower.max_norm()
        if np.max(np.abs(P.values - L.follower.values)) > 1e-10 * scale:
            raise ValueError("P is not the follower solution used by the leader system")


def simulate_cid_closed_loop(spec, P: MatPath | None, L: LeaderSystemCid, n_paths: int,
                             seed: int, path_offset: int = 0,
                             system: ClosedLoopSystem | None = None) -> PathEnsemble:
    """Euler-Maruyama simulation of the equilibrium closed loop.

    Paths ``path_offset .. path_offset + n_paths - 1`` of the counter-based
    generator are used, so any subset of paths can be regenerated exactly.
    """
    spec = as_game(spec)
    _check_inputs(spec, P, L)
    system = system or closed_loop_system(spec, L)
    ids = np.arange(path_offset, path_offset + n_paths, dtype=np.uint64)
    Z, dW = simulate_paths(system.sde, seed, ids)
    u1 = np.einsum("kad,nkd->nka", system.follower_gain, Z)
    u2 = np.einsum("kad,nkd->nka", system.leader_gain, Z)
    m = system.m
    return PathEnsemble(grid=L.grid, seed=int(seed), path_ids=ids,
                        X=Z[:, :, :m], Xhat=Z[:, :, m:2 * m],
                        Xcheck=Z[:, :, 2 * m:3 * m], Xhatcheck=Z[:, :, 3 * m:],
                        u1=u1, u2=u2, dW=dW, n=spec.n)


_WHICH_LEVEL = {"F": FULL, "G1": HAT, "G2": CHECK, "G1G2": COMMON}


def nested_conditional_mc(spec, P: MatPath | None, L: LeaderSystemCid, which: str,
                          n_outer: int, n_inner: int, seed: int,
                          info: InfoPattern | None = None, path_offset: int = 0,
                          system: ClosedLoopSystem | None = None) -> np.ndarray:
    """Brute-force estimate of ``E[X(t) | observed noise]`` along outer paths.

    Outer path ``o`` uses the same observed increments as path
    ``path_offset + o`` of :func:`simulate_cid_closed_loop` with the same
    seed; the unobserved components are redrawn ``n_inner`` times.  Returns
    ``(n_outer, n_steps + 1, m)``.  With every component observed the
    estimate is the path itself.
    """
    spec = as_game(spec)
    _check_inputs(spec, P, L)
    info = info or InfoPattern.canonical()
    observed = info.observed(which)
    system = system or closed_loop_system(spec, L)
    mask = [c + 1 in observed for c in range(3)]
    if all(mask):
        n_inner = 1
    ids = np.arange(path_offset, path_offset + n_outer, dtype=np.uint64)
    return simulate_group_means(system.sde, seed, ids, n_inner, mask, np.arange(system.m))


# ---------------------------------------------------------------------------
# tower property
# ---------------------------------------------------------------------------

TOWER_PAIRS = (("X", "Xhat"), ("X", "Xcheck"), ("Xhat", "Xhatcheck"))


@dataclass
class TowerReport:
    """Studentized mean gaps per node for the three projection pairs.

    ``gaps[pair]`` has one value per node (maximum over components); a node
    is flagged when any gap exceeds ``threshold``.
    """

    gaps: dict
    threshold: float
    flags: dict

    @property
    def max_gap(self) -> float:
        return float(max(np.max(g) for g in self.gaps.values()))

    @property
    def n_flags(self) -> int:
        return int(sum(len(f) for f in self.flags.values()))

    @property
    def passed(self) -> bool:
        return self.n_flags == 0

    def to_dict(self) -> dict:
        return {"threshold": self.threshold, "max_gap": self.max_gap,
                "n_flags": self.n_flags, "pass": self.passed,
                "max_gap_by_pair": {f"{a}-{b}": float(np.max(g))
                                    for (a, b), g in self.gaps.items()}}


def studentized_gap(a: np.ndarray, b: np.ndarray, rel_floor: float = 1e-12) -> np.ndarray:
    """``|mean(a - b)| / SE`` over axis 0 using paired differences.

    Differences below ``rel_floor * (1 + max|a|)`` are round-off and count
    as zero; the standard error is floored at the same level so that
    path-independent differences do not divide by zero.
    """
    floor = rel_floor * (1.0 + np.max(np.abs(a)))
    d = a - b
    d = np.where(np.abs(d) <= floor, 0.0, d)
    n = d.shape[0]
    mean = d.mean(axis=0)
    se = d.std(axis=0, ddof=1) / np.sqrt(n)
    return np.abs(mean) / np.maximum(se, floor)


def tower_check(ensemble: PathEnsemble, threshold: float = 4.0) -> TowerReport:
    """Check ``E[X] = E[X_hat] = E[X_check]`` and ``E[X_hat] = E[X_hatcheck]`` per node."""
    if ensemble.n_paths < 100:
        raise ValueError("tower_check needs at least 100 paths")
    gaps, flags = {}, {}
    for a, b in TOWER_PAIRS:
        g = studentized_gap(getattr(ensemble, a), getattr(ensemble, b)).max(axis=1)
        gaps[(a, b)] = g
        flags[(a, b)] = [int(k) for k in np.flatnonzero(g > threshold)]
    return TowerReport(gaps=gaps, threshold=threshold, flags=flags)


def projection_correlations(ensemble: PathEnsemble, node: int = -1, component: int = 0):
    """Correlations of ``x`` with its projections at one node, with standard errors.

    Returns ``{name: (corr, se)}`` for the hat, check and common projections.
    """
    x = ensemble.X[:, node, component]
    n = x.size
    out = {}
    for name in ("Xhat", "Xcheck", "Xhatcheck"):
        y = getattr(ensemble, name)[:, node, component]
        if np.std(x) == 0 or np.std(y) == 0:
            out[name] = (1.0 if np.array_equal(x, y) else 0.0, 0.0)
            continue
        r = float(np.corrcoef(x, y)[0, 1])
        out[name] = (r, (1.0 - r * r) / np.sqrt(n - 1))
    return out
