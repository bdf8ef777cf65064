"""Equilibrium strategies, cost evaluation and Monte Carlo certificates.

Stationarity is tested by perturbing one player's equilibrium control along
a feedback direction built from that player's own filtered state and
measuring the cost on common random numbers:

* follower: ``u1 = u1* + eps * delta X_hat`` with the leader's control
  process frozen;
* leader: ``u2 = u2* + eps * delta X_check`` with the follower responding
  optimally.  The follower's response is affine in ``eps``; its adjoint
  correction solves a linear backward equation, represented like the
  leader's adjoint as ``U = sum_j Ucal_j X_j`` with ``Ucal`` integrated
  backward jointly with the Riccati systems.

All perturbed copies are appended to the equilibrium closed loop and
simulated as one linear SDE, so every ``eps`` sees the same noise.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import cid_model
from .decoupling import (FilteredFBSDE, closed_loop, generator, riccati_rhs,
                         solve_sigma, z_matrix)
from .errors import DegenerateFit
from .filtering_sim import (ClosedLoopSystem, PathEnsemble, closed_loop_system,
                            node_fbsde, simulate_cid_closed_loop)
from .game_model import (CHECK, COMMON, FULL, HAT, LEVELS, NOISES, GameSpec, MatPath,
                         TimeGrid, as_game, meet)
from .kernels import LinearSDE, simulate_costs
from .ode import BlockLayout, RiccatiField, integrate_backward
from .riccati_solvers import LEVEL_BLOCKS, LeaderSystemCid, cid_leader_field

__all__ = [
    "StrategyCid", "build_strategies_cid", "CostEstimate", "evaluate_cost",
    "Direction", "PerturbReport", "stationarity_test", "solve_response",
    "ReconstructedAdjoint", "reconstruct_adjoint", "AdjointResidual",
    "adjoint_residual",
]


# ---------------------------------------------------------------------------
# strategies
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StrategyCid:
    """Feedback gains of both players.

    ``u1 = follower_gain_hat X_hat + follower_gain_cross X_hatcheck`` and
    ``u2 = leader_gain_check X_check + leader_gain_cross X_hatcheck``.
    """

    follower_gain_hat: MatPath
    follower_gain_cross: MatPath
    leader_gain_check: MatPath
    leader_gain_cross: MatPath

    def controls(self, ensemble: PathEnsemble):
        """Recompute ``(u1, u2)`` from the estimates stored in an ensemble."""
        u1 = (np.einsum("kad,nkd->nka", self.follower_gain_hat.values, ensemble.Xhat)
              + np.einsum("kad,nkd->nka", self.follower_gain_cross.values, ensemble.Xhatcheck))
        u2 = (np.einsum("kad,nkd->nka", self.leader_gain_check.values, ensemble.Xcheck)
              + np.einsum("kad,nkd->nka", self.leader_gain_cross.values, ensemble.Xhatcheck))
        return u1, u2


def build_strategies_cid(spec, P: MatPath | None, L: LeaderSystemCid) -> StrategyCid:
    """Gain paths of the equilibrium feedback laws."""
    spec = as_game(spec)
    if P is not None and P.grid != L.grid:
        raise ValueError("P and the leader system live on different grids")
    P = L.follower if L.follower is not None else P
    gains = {"fh": [], "fc": [], "lc": [], "lx": []}
    for k in range(L.grid.n_steps + 1):
        Pi = L.Pi[k] if L.Pi is not None else None
        f = cid_model.control_forms(spec, P[k], L.at(k), L.model, Pi)
        gains["fh"].append(f.follower[HAT])
        gains["fc"].append(f.follower[COMMON])
        gains["lc"].append(f.leader[CHECK])
        gains["lx"].append(f.leader[COMMON])
    g = L.grid
    return StrategyCid(*(MatPath(g, np.array(gains[k])) for k in ("fh", "fc", "lc", "lx")))


# ---------------------------------------------------------------------------
# costs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CostEstimate:
    mean: float
    std_error: float
    n_paths: int

    def to_dict(self) -> dict:
        return {"mean": self.mean, "std_error": self.std_error, "n_paths": self.n_paths}


def _weights(spec: GameSpec, who: str):
    if who == "follower":
        return spec.Q1, spec.N1, spec.G1
    if who == "leader":
        return spec.Q2, spec.N2, spec.G2
    raise ValueError("who must be 'follower' or 'leader'")


def trapezoid_weights(grid: TimeGrid) -> np.ndarray:
    w = np.full(grid.n_steps + 1, grid.h)
    w[0] = w[-1] = 0.5 * grid.h
    return w


def path_costs(x: np.ndarray, u: np.ndarray, Q, N, G, grid: TimeGrid) -> np.ndarray:
    """Per-path ``1/2 int (x'Qx + u'Nu) dt + 1/2 x(T)'G x(T)`` (trapezoidal rule)."""
    run = np.einsum("nka,ab,nkb->nk", x, Q, x) + np.einsum("nka,ab,nkb->nk", u, N, u)
    return 0.5 * run @ trapezoid_weights(grid) + 0.5 * np.einsum(
        "na,ab,nb->n", x[:, -1], G, x[:, -1])


def summarize(samples: np.ndarray) -> CostEstimate:
    n = samples.size
    se = 0.0
    if n > 1 and np.any(samples != samples.flat[0]):
        se = float(samples.std(ddof=1) / np.sqrt(n))
    return CostEstimate(mean=float(samples.mean()), std_error=se, n_paths=int(n))


def evaluate_cost(ensemble: PathEnsemble, who: str, spec) -> CostEstimate:
    """Monte Carlo estimate of a player's cost on the physical state."""
    spec = as_game(spec)
    Q, N, G = _weights(spec, who)
    u = ensemble.u1 if who == "follower" else ensemble.u2
    return summarize(path_costs(ensemble.x, u, Q, N, G, ensemble.grid))


# ---------------------------------------------------------------------------
# follower response to a leader perturbation
# ---------------------------------------------------------------------------

def _response_generator(spec: GameSpec, model: str, P: np.ndarray, Pi, delta: np.ndarray,
                        level: int):
    """Linear generator of the follower's adjoint correction ``U``.

    Only the follower's backward components (rows/columns of the psi block,
    and of the nu block in the extended model) are populated.  The forcing
    is the image of the leader's control perturbation ``delta X_level``.
    """
    n = spec.n
    A, C0 = spec.A, spec.C[0]
    S1, _ = cid_model.control_products(spec)
    K = A[0] - S1 @ P
    if model == "reduced":
        nb = 2
        gen_y = {FULL: cid_model.blocks(n, nb, {(1, 1): K.T})}
        gen_z = {(1, FULL): cid_model.blocks(n, nb, {(1, 1): A[1].T}),
                 (3, FULL): cid_model.blocks(n, nb, {(1, 1): A[3].T})}
    else:
        nb = 3
        gen_y = {FULL: cid_model.blocks(n, nb, {(1, 1): K.T, (2, 2): A[0].T})}
        gen_z = {(1, FULL): cid_model.blocks(n, nb, {(1, 1): A[1].T, (2, 2): A[1].T}),
                 (2, FULL): cid_model.blocks(n, nb, {(2, 2): A[2].T}),
                 (2, HAT): cid_model.blocks(n, nb, {(1, 2): A[2].T}),
                 (3, FULL): cid_model.blocks(n, nb, {(1, 1): A[3].T, (2, 2): A[3].T})}
    m = nb * n

    def rows(slot, M):
        out = np.zeros((m, m))
        out[slot * n:(slot + 1) * n] = M
        return out

    common = meet(level, HAT)
    gen_x = {common: rows(1, P @ C0 @ delta)}
    if model == "extended":
        gen_x[level] = gen_x.get(level, np.zeros((m, m))) + rows(2, Pi @ C0 @ delta)
        gen_x[common] = gen_x[common] - rows(2, Pi @ C0 @ delta)
    return gen_x, gen_y, gen_z


def response_fbsde(spec: GameSpec, model: str, P, Pi, loop, delta, level) -> FilteredFBSDE:
    gen_x, gen_y, gen_z = _response_generator(spec, model, P, Pi, delta, level)
    m = delta.shape[1]
    diff_x = {}
    for i in (1, 2, 3):
        for l, M in loop.diff[(i, FULL)].items():
            diff_x[(i, l)] = M
    return FilteredFBSDE(dim=m, terminal=np.zeros((m, m)), drift_x=dict(loop.drift[FULL]),
                         diff_x=diff_x, gen_x=gen_x, gen_y=gen_y, gen_z=gen_z)


RESPONSE_BLOCKS = ("U_full", "U_hat", "U_check", "U_common")


def solve_response(spec, L: LeaderSystemCid, delta: np.ndarray, level: int = CHECK) -> list:
    """Coefficients ``Ucal_0..3`` of the follower's adjoint correction.

    ``delta`` (k2 x m) acts on the leader's projection ``X_level``.  The
    equation is integrated jointly with the follower and leader systems, so
    the stage values it uses are exact.
    """
    spec = as_game(spec)
    if spec.has_additive_noise and any(np.any(spec.A[i]) for i in (1, 2, 3)):
        raise NotImplementedError("additive noise with state-dependent diffusion")
    if level not in (CHECK, COMMON):
        raise ValueError("the leader's direction must act on the check or common level")
    model = L.model
    base = cid_leader_field(spec, model)
    m = L.dim
    layout = BlockLayout([(b, base.layout.shapes[b]) for b in base.layout.names]
                         + [(b, (m, m)) for b in RESPONSE_BLOCKS])
    nbase = base.terminal.size
    term = np.concatenate([base.terminal, np.zeros(4 * m * m)])

    def rhs(t, flat):
        head = base.layout.unpack(flat[:nbase])
        P = head["P"]
        Pi = head.get("Pi")
        Pcal = [head[b] for b in LEVEL_BLOCKS]
        fb = cid_model.leader_fbsde(spec, P, model, Pi)
        loop = closed_loop(fb, Pcal, solve_sigma(fb, Pcal, check=False))
        fbU = response_fbsde(spec, model, P, Pi, loop, delta, level)
        U = [flat[nbase + j * m * m: nbase + (j + 1) * m * m].reshape(m, m) for j in LEVELS]
        dU, _ = riccati_rhs(fbU, U, t=t, check=False)
        return np.concatenate([base(t, flat[:nbase])] + [d.ravel() for d in dU])

    path = integrate_backward(RiccatiField(rhs, term, layout, name="response"), L.grid)
    lead = np.array([L.at(k) for k in range(L.grid.n_steps + 1)])
    parts = {b: path.values[:, nbase + j * m * m: nbase + (j + 1) * m * m].reshape(-1, m, m)
             for j, b in enumerate(RESPONSE_BLOCKS)}
    again = np.stack([path.values[:, layout.slices[b]].reshape(-1, m, m)
                      for b in LEVEL_BLOCKS], axis=1)
    if np.max(np.abs(again - lead)) > 1e-10 * (1.0 + np.max(np.abs(lead))):
        raise ValueError("leader system does not match this spec")
    return [MatPath(L.grid, parts[b]) for b in RESPONSE_BLOCKS]


# ---------------------------------------------------------------------------
# stationarity test
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Direction:
    """Feedback perturbation ``eps * gain @ X_level`` of one player's control.

    ``gain`` is ``k x m`` (constant in time); ``level`` must be observable
    by the player (hat/common for the follower, check/common for the leader).
    """

    player: str
    gain: np.ndarray
    level: int | None = None

    def __post_init__(self):
        if self.player not in ("follower", "leader"):
            raise ValueError("player must be 'follower' or 'leader'")
        lvl = self.level
        if lvl is None:
            lvl = HAT if self.player == "follower" else CHECK
        allowed = (HAT, COMMON) if self.player == "follower" else (CHECK, COMMON)
        if lvl not in allowed:
            raise ValueError(f"level {lvl} is not observable by the {self.player}")
        object.__setattr__(self, "level", lvl)
        object.__setattr__(self, "gain", np.atleast_2d(np.asarray(self.gain, dtype=float)))

    @classmethod
    def on_state(cls, player: str, spec, m: int, component: int = 0, control: int = 0,
                 scale: float = 1.0) -> "Direction":
        """Unit feedback from one physical-state component to one control."""
        spec = as_game(spec)
        k = spec.k1 if player == "follower" else spec.k2
        g = np.zeros((k, m))
        g[control, component] = scale
        return cls(player, g)


@dataclass
class PerturbReport:
    player: str
    epsilons: list
    J_means: list
    J_ses: list
    a: float
    b: float
    c: float
    se_b: float
    se_a: float
    J0: float
    convexity: list = field(default_factory=list)
    n_paths: int = 0

    @property
    def roundoff(self) -> float:
        """Slope size indistinguishable from floating-point noise in the costs."""
        scale = max([abs(j) for j in self.J_means] + [abs(self.J0)])
        return 1e-12 * scale / max(abs(e) for e in self.epsilons)

    @property
    def stationary(self) -> bool:
        return abs(self.b) <= max(3.0 * self.se_b, self.roundoff)

    @property
    def convex(self) -> bool:
        return self.a > 0.0

    @property
    def convexity_ok(self) -> bool:
        return all(c["value"] >= -3.0 * c["se"] for c in self.convexity)

    @property
    def passed(self) -> bool:
        return self.stationary and self.convex

    def to_dict(self) -> dict:
        return {"player": self.player, "epsilons": list(self.epsilons),
                "J_means": list(self.J_means), "J_ses": list(self.J_ses),
                "fit": {"a": self.a, "b": self.b, "c": self.c, "se_b": self.se_b,
                        "se_a": self.se_a},
                "J0": self.J0, "convexity": self.convexity,
                "n_paths": self.n_paths, "pass": self.passed}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _level_matrix(rows: int, m: int, level: int, M: np.ndarray) -> np.ndarray:
    out = np.zeros((rows, 4 * m))
    out[:, level * m:(level + 1) * m] = M
    return out


def _project_columns(U: np.ndarray, m: int, level: int) -> np.ndarray:
    """Coefficients of the projection on ``level`` of a form on the stacked state."""
    out = np.zeros_like(U)
    for l in LEVELS:
        t = meet(l, level)
        out[..., t * m:(t + 1) * m] += U[..., l * m:(l + 1) * m]
    return out


def _hat_adjoint_rows(blocks_k: list, n: int, m: int) -> np.ndarray:
    """Rows mapping the stacked state to the psi block of ``sum_j B_j X_meet(j, hat)``."""
    out = np.zeros((n, 4 * m))
    for j in LEVELS:
        lv = meet(j, HAT)
        out[:, lv * m:(lv + 1) * m] += blocks_k[j][n:2 * n]
    return out


def perturbed_system(system: ClosedLoopSystem, direction: Direction, epsilons,
                     response: list | None = None):
    """Augmented linear SDE and cost outputs for a set of perturbation sizes.

    Returns ``(sde, C, W, WT)`` for :func:`stacklq.kernels.simulate_costs`.
    """
    spec, L = system.spec, system.leader
    n, m, N = spec.n, system.m, system.grid.n_steps
    E = len(epsilons)
    base = system.sde
    d0 = 4 * m
    A = spec.A
    B0, C0 = spec.B[0], spec.C[0]
    noise = np.array(spec.noise)
    leader = direction.player == "leader"
    per = 2 * n if leader else n
    d = d0 + E * per
    D = np.zeros((N, d, d))
    G = np.zeros((N, 3, d, d))
    s = np.zeros((3, d))
    D[:, :d0, :d0] = base.D
    G[:, :, :d0, :d0] = base.G
    s[:, :d0] = base.s
    k_ctrl = spec.k2 if leader else spec.k1
    q = n + k_ctrl
    C = np.zeros((N + 1, E * q, d))
    Qw, Nw, Gw = _weights(spec, direction.player)
    W = np.zeros((E, E * q, E * q))
    WT = np.zeros((E, E * q, E * q))
    Delta = _level_matrix(k_ctrl, m, direction.level, direction.gain)
    if leader:
        N1inv_B0T = np.linalg.solve(spec.N1, B0.T)
        U2hat = _project_columns(system.leader_gain, m, HAT)
        Delta_hat = _project_columns(Delta, m, HAT)
    for e, eps in enumerate(epsilons):
        ix = slice(d0 + e * per, d0 + e * per + n)
        W[e, e * q:e * q + n, e * q:e * q + n] = Qw
        W[e, e * q + n:(e + 1) * q, e * q + n:(e + 1) * q] = Nw
        WT[e, e * q:e * q + n, e * q:e * q + n] = Gw
        if leader:
            ih = slice(ix.stop, ix.stop + n)
        for k in range(N + 1):
            U1, U2 = system.follower_gain[k], system.leader_gain[k]
            if leader:
                Psi = _hat_adjoint_rows(L.at(k), n, m) + eps * _hat_adjoint_rows(
                    [r[k] for r in response], n, m)
                u2 = U2 + eps * Delta
                u2_hat = U2hat[k] + eps * Delta_hat
                # u1 = -N1^-1 B0^T (P x_hat_eps + Psi Xi)
                u1_state = -N1inv_B0T @ Psi
                u1_own = -N1inv_B0T @ L.follower[k]
                ctrl = u2
            else:
                u1 = U1 + eps * Delta
                ctrl = u1
            C[k, e * q:e * q + n, ix] = np.eye(n)
            C[k, e * q + n:(e + 1) * q, :d0] = ctrl
            if k == N:
                continue
            if leader:
                D[k, ix, ix] = A[0]
                D[k, ix, ih] = B0 @ u1_own
                D[k, ix, :d0] = B0 @ u1_state + C0 @ u2
                D[k, ih, ih] = A[0] + B0 @ u1_own
                D[k, ih, :d0] = B0 @ u1_state + C0 @ u2_hat
                for c, i in enumerate((1, 2, 3)):
                    G[k, c, ix, ix] = A[i]
                    if i in NOISES[HAT]:
                        G[k, c, ih, ih] = A[i]
            else:
                D[k, ix, ix] = A[0]
                D[k, ix, :d0] = B0 @ u1 + C0 @ U2
                for c, i in enumerate((1, 2, 3)):
                    G[k, c, ix, ix] = A[i]
        for c, i in enumerate((1, 2, 3)):
            s[c, ix] = noise[i - 1]
            if leader and i in NOISES[HAT]:
                s[c, ih] = noise[i - 1]
    z0 = np.zeros(d)
    z0[:d0] = base.z0
    for e in range(E):
        z0[d0 + e * per:d0 + e * per + n] = spec.x0
        if leader:
            z0[d0 + e * per + n:d0 + (e + 1) * per] = spec.x0
    return LinearSDE(base.grid, D, G, s, z0), C, W, WT


def quadratic_fit(epsilons, costs: np.ndarray):
    """Least-squares ``J(eps) = a eps^2 + b eps + c`` per path.

    Returns ``(coef_mean, coef_se)`` for ``(a, b, c)``.
    """
    eps = np.asarray(epsilons, dtype=float)
    V = np.stack([eps ** 2, eps, np.ones_like(eps)], axis=1)
    coef = np.linalg.lstsq(V, costs.T, rcond=None)[0]        # (3, n_paths)
    n = costs.shape[0]
    return coef.mean(axis=1), coef.std(axis=1, ddof=1) / np.sqrt(n)


def stationarity_test(spec, P: MatPath | None, L: LeaderSystemCid, direction: Direction,
                      epsilons, n_paths: int, seed: int,
                      system: ClosedLoopSystem | None = None,
                      chunk: int = 20000) -> PerturbReport:
    """First-order optimality check of one player along ``direction``.

    Costs of ``u* + eps * direction`` for every ``eps`` (and for ``eps = 0``)
    are computed path by path on common random numbers; the per-path
    quadratic fits are averaged.  Raises :class:`DegenerateFit` when the
    costs do not depend on ``eps`` at all.
    """
    spec = as_game(spec)
    if P is not None and L.follower is not None and P.grid != L.grid:
        raise ValueError("P and the leader system live on different grids")
    eps = [float(e) for e in epsilons]
    if len(eps) < 3:
        raise ValueError("at least three perturbation sizes are needed for a quadratic fit")
    system = system or closed_loop_system(spec, L)
    response = None
    if direction.player == "leader":
        response = solve_response(spec, L, direction.gain, direction.level)
    all_eps = eps + ([0.0] if 0.0 not in eps else [])
    sde, C, W, WT = perturbed_system(system, direction, all_eps, response)
    costs = np.empty((n_paths, len(all_eps)))
    for start in range(0, n_paths, chunk):
        ids = np.arange(start, min(n_paths, start + chunk), dtype=np.uint64)
        costs[start:start + ids.size] = simulate_costs(sde, seed, ids, C, W, WT)
    idx = [all_eps.index(e) for e in eps]
    Jeps = costs[:, idx]
    J0 = costs[:, all_eps.index(0.0)]
    if np.all(Jeps == Jeps[:, :1]):
        raise DegenerateFit("the cost does not depend on the perturbation size")
    (a, b, c), (se_a, se_b, _) = quadratic_fit(eps, Jeps)
    convexity = []
    for e in sorted({abs(x) for x in eps if x != 0.0}):
        if e in eps and -e in eps:
            v = costs[:, all_eps.index(e)] + costs[:, all_eps.index(-e)] - 2.0 * J0
            st = summarize(v)
            convexity.append({"eps": e, "value": st.mean, "se": st.std_error})
    stats = [summarize(Jeps[:, j]) for j in range(len(eps))]
    return PerturbReport(player=direction.player, epsilons=eps,
                         J_means=[s.mean for s in stats], J_ses=[s.std_error for s in stats],
                         a=float(a), b=float(b), c=float(c), se_b=float(se_b),
                         se_a=float(se_a), J0=float(J0.mean()), convexity=convexity,
                         n_paths=int(n_paths))


# ---------------------------------------------------------------------------
# adjoint reconstruction
# ---------------------------------------------------------------------------

@dataclass
class ReconstructedAdjoint:
    """Leader adjoint ``Y`` and martingale integrands ``Z1..Z3`` along paths.

    Arrays have shape ``(n_paths, n_steps + 1, m)``.
    """

    Y: np.ndarray
    Z1: np.ndarray
    Z2: np.ndarray
    Z3: np.ndarray
    terminal_error: float

    @property
    def Z(self):
        return (self.Z1, self.Z2, self.Z3)


def _y_rows(Pk: list, m: int) -> np.ndarray:
    return np.hstack([Pk[j] for j in LEVELS])


def reconstruct_adjoint(ensemble: PathEnsemble, spec, L: LeaderSystemCid,
                        system: ClosedLoopSystem | None = None) -> ReconstructedAdjoint:
    """Evaluate the decoupling ansatz on simulated paths.

    ``Y = P1 X + P2 X_hat + P3 X_check + P4 X_hatcheck`` and
    ``Z_i = sum_l Sigma_il X_l`` (plus the additive part), node by node.
    """
    spec = as_game(spec)
    system = system or closed_loop_system(spec, L)
    Xi = ensemble.stacked()
    Nn = L.grid.n_steps + 1
    Ymat = np.array([_y_rows(L.at(k), L.dim) for k in range(Nn)])
    Y = np.einsum("kad,nkd->nka", Ymat, Xi)
    Zs = []
    for i in (1, 2, 3):
        Zm = np.array([z_matrix(system.chains[k], i) for k in range(Nn)])
        Z = np.einsum("kad,nkd->nka", Zm, Xi)
        const = np.array([system.chains[k].const.get(i, np.zeros(L.dim)) for k in range(Nn)])
        Zs.append(Z + const[None])
    term = L.P1[-1]
    err = float(np.max(np.abs(Y[:, -1] - ensemble.X[:, -1] @ term.T))) if Y.size else 0.0
    return ReconstructedAdjoint(Y=Y, Z1=Zs[0], Z2=Zs[1], Z3=Zs[2], terminal_error=err)


@dataclass
class AdjointResidual:
    """Per-step Euler residual of the backward equation of ``Y``.

    ``mean``/``se`` have shape ``(n_steps, m)``; ``studentized`` is the
    per-step maximum over components of ``|mean| / se``.
    """

    mean: np.ndarray
    se: np.ndarray
    studentized: np.ndarray
    terminal_error: float
    n_paths: int
    h: float
    threshold: float = 4.0

    @property
    def max_studentized(self) -> float:
        return float(np.max(self.studentized))

    @property
    def max_mean_over_h(self) -> float:
        return float(np.max(np.abs(self.mean)) / self.h)

    @property
    def passed(self) -> bool:
        return self.max_studentized <= self.threshold

    def to_dict(self) -> dict:
        return {"max_studentized": self.max_studentized,
                "max_mean_over_h": self.max_mean_over_h,
                "terminal_error": self.terminal_error, "n_paths": self.n_paths,
                "threshold": self.threshold, "pass": self.passed}


def _generator_rows(system: ClosedLoopSystem, k: int) -> np.ndarray:
    L = system.leader
    m = system.m
    gen = generator(node_fbsde(L, k), L.at(k), system.chains[k])
    out = np.zeros((m, 4 * m))
    for l, M in gen.items():
        out[:, l * m:(l + 1) * m] += M
    return out


def adjoint_residual(spec, L: LeaderSystemCid, n_paths: int, seed: int,
                     chunk: int = 2000, threshold: float = 4.0,
                     system: ClosedLoopSystem | None = None) -> AdjointResidual:
    """Euler consistency of the reconstructed adjoint.

    For every step ``R_k = Y_{k+1} - Y_k + h g_k - sum_i Z_{i,k} dW_{i,k}``,
    where ``g_k`` is the generator of the backward equation evaluated on the
    simulated state.  The drift is zero in continuous time, so the per-step
    means of ``R`` must vanish up to the scheme's O(h^2) local error.
    Paths are processed in chunks and only running sums are kept.
    """
    spec = as_game(spec)
    system = system or closed_loop_system(spec, L)
    grid = L.grid
    N, h = grid.n_steps, grid.h
    gen = np.array([_generator_rows(system, k) for k in range(N)])
    s1 = s2 = None
    worst = 0.0
    for start in range(0, n_paths, chunk):
        ens = simulate_cid_closed_loop(spec, None, L, min(chunk, n_paths - start), seed,
                                       path_offset=start, system=system)
        adj = reconstruct_adjoint(ens, spec, L, system)
        worst = max(worst, adj.terminal_error)
        Xi = ens.stacked()
        drift = np.einsum("kad,nkd->nka", gen, Xi[:, :-1])
        mart = sum(Zi[:, :-1] * ens.dW[:, :, c:c + 1] for c, Zi in enumerate(adj.Z))
        R = adj.Y[:, 1:] - adj.Y[:, :-1] + h * drift - mart
        if s1 is None:
            s1 = R.sum(axis=0)
            s2 = (R ** 2).sum(axis=0)
        else:
            s1 += R.sum(axis=0)
            s2 += (R ** 2).sum(axis=0)
    mean = s1 / n_paths
    var = np.maximum(s2 / n_paths - mean ** 2, 0.0) * n_paths / (n_paths - 1)
    se = np.sqrt(var / n_paths)
    floor = 1e-14 * (1.0 + np.max(np.abs(mean)))
    stud = (np.abs(mean) / np.maximum(se, floor)).max(axis=1)
    return AdjointResidual(mean=mean, se=se, studentized=stud, terminal_error=worst,
                           n_paths=int(n_paths), h=h, threshold=threshold)
