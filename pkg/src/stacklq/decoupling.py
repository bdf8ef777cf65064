"""Decoupling of linear forward-backward systems with filtered coefficients.

A :class:`FilteredFBSDE` describes a linear system

    dX  = [ sum_l Fx[l] X_l + Fy[l] Y_l + sum_i Fz[i,l] (Z_i)_l ] dt
          + sum_i [ sum_l Sx[i,l] X_l + Sy[i,l] Y_l
                    + sum_k Sz[i,k,l] (Z_k)_l + s_i ] dW_i
    -dY = [ sum_l Bx[l] X_l + By[l] Y_l + sum_i Bz[i,l] (Z_i)_l ] dt
          - sum_i Z_i dW_i,                        Y(T) = G X(T),

where ``V_l`` denotes the projection of ``V`` on information level ``l``
(see :mod:`stacklq.game_model`).  The decoupling ansatz

    Y_k = sum_j Pcal_j X_{meet(j, k)}

turns the system into four matrix Riccati equations for ``Pcal_0..3``
(full, hat, check, common).  The martingale integrands are linear in the
projected states, ``Z_i = sum_m Sigma[i, m] X_m``, and are obtained from
four block-linear solves, one per information level, coarsest first.

Linear forms over levels are represented as ``dict[level, matrix]`` giving
the coefficient of ``X_level``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np

from .errors import AssumptionViolated
from .game_model import LEVELS, NOISES, meet

Form = Dict[int, np.ndarray]

COND_LIMIT = 1e12
STEP_ORDER = (3, 2, 1, 0)
"""Levels solved by the four linear steps, in order (common, check, hat, full)."""
STEP_ASSUMPTION = {3: "A2.2", 2: "A2.3", 1: "A2.4", 0: "A2.5"}


def _acc(form: Form, level: int, M: np.ndarray) -> None:
    if level in form:
        form[level] = form[level] + M
    else:
        form[level] = M


def project(form: Form, level: int) -> Form:
    """Projection of a linear form in ``X_m`` onto ``level``."""
    out: Form = {}
    for m, M in form.items():
        _acc(out, meet(m, level), M)
    return out


def left(M: np.ndarray, form: Form) -> Form:
    return {m: M @ F for m, F in form.items()}


def add_into(acc: Form, form: Form) -> None:
    for m, M in form.items():
        _acc(acc, m, M)


def coefficient_on(form: Form, level: int, dim: int) -> np.ndarray:
    """Coefficient of ``X_level`` after projecting the form onto ``level``."""
    out = np.zeros((dim, dim))
    for m, M in form.items():
        if meet(m, level) == level:
            out = out + M
    return out


def _nz(M) -> bool:
    return M is not None and bool(np.any(M))


@dataclass
class FilteredFBSDE:
    """Coefficient dictionaries of a filtered linear FBSDE (see module doc).

    Keys: ``drift_x[l]``, ``drift_y[l]``, ``drift_z[(i, l)]``,
    ``diff_x[(i, l)]``, ``diff_y[(i, l)]``, ``diff_z[(i, k, l)]``,
    ``diff_const[i]``, ``gen_x[l]``, ``gen_y[l]``, ``gen_z[(i, l)]``.
    Zero entries may be omitted.
    """

    dim: int
    terminal: np.ndarray
    drift_x: dict = field(default_factory=dict)
    drift_y: dict = field(default_factory=dict)
    drift_z: dict = field(default_factory=dict)
    diff_x: dict = field(default_factory=dict)
    diff_y: dict = field(default_factory=dict)
    diff_z: dict = field(default_factory=dict)
    diff_const: dict = field(default_factory=dict)
    gen_x: dict = field(default_factory=dict)
    gen_y: dict = field(default_factory=dict)
    gen_z: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("drift_x", "drift_y", "drift_z", "diff_x", "diff_y",
                     "diff_z", "diff_const", "gen_x", "gen_y", "gen_z"):
            d = getattr(self, name)
            setattr(self, name, {k: np.asarray(v, dtype=float)
                                 for k, v in d.items() if _nz(v)})
        uses_z = bool(self.drift_z or self.diff_z or self.gen_z)
        if self.diff_const and uses_z:
            raise NotImplementedError(
                "additive noise combined with martingale-dependent coefficients "
                "would need an affine ansatz")

    @property
    def implicit_z(self) -> bool:
        return bool(self.diff_z)


@dataclass
class SigmaChain:
    """Martingale representation ``Z_i = sum_m sigma[i][m] X_m``.

    ``partial[i][l]`` is the coefficient of ``X_l`` in ``(Z_i)_l`` computed
    by step ``l``; ``cond[l]`` the infinity-norm condition number of that
    step's block matrix.
    """

    sigma: dict
    partial: dict
    cond: dict
    matrices: dict
    const: dict


def y_form(P: list) -> Form:
    return {j: P[j] for j in LEVELS}


def _known_diffusion(fb: FilteredFBSDE, P: list, Y: Form) -> Dict[int, Form]:
    """``sum_j Pcal_j * (Z-free part of the diffusion of X_j)`` per noise."""
    out: Dict[int, Form] = {}
    for i in (1, 2, 3):
        acc: Form = {}
        for j in LEVELS:
            if i not in NOISES[j]:
                continue
            dj: Form = {}
            for (ii, l), M in fb.diff_x.items():
                if ii == i:
                    _acc(dj, meet(l, j), M)
            for (ii, l), M in fb.diff_y.items():
                if ii == i:
                    add_into(dj, left(M, project(Y, meet(l, j))))
            add_into(acc, left(P[j], dj))
        out[i] = acc
    return out


def solve_sigma(fb: FilteredFBSDE, P: list, t: float = float("nan"),
                node=None, check: bool = True) -> SigmaChain:
    """Solve for the martingale integrands level by level.

    For level ``l`` the unknowns are ``c[i] = coefficient of X_l in (Z_i)_l``
    (i = 1, 2, 3) and satisfy ``(I - M_l) c = K_l``.  Levels are processed
    common, check, hat, full; the per-level coefficients are recovered from
    the partial sums at the end.
    """
    m = fb.dim
    Y = y_form(P)
    known = _known_diffusion(fb, P, Y)
    partial = {i: {} for i in (1, 2, 3)}
    cond = {}
    mats = {}
    for lam in STEP_ORDER:
        K = np.vstack([coefficient_on(known[i], lam, m) for i in (1, 2, 3)])
        if not fb.diff_z:
            sol = K
            cond[lam] = 1.0
            mats[lam] = np.eye(3 * m)
        else:
            A = np.eye(3 * m)
            for (i, k, l), S in fb.diff_z.items():
                for j in LEVELS:
                    if i not in NOISES[j]:
                        continue
                    if meet(meet(lam, l), j) != lam:
                        continue
                    A[(i - 1) * m:i * m, (k - 1) * m:k * m] -= P[j] @ S
            mats[lam] = A
            c = np.linalg.cond(A, np.inf)
            cond[lam] = float(c) if np.isfinite(c) else np.inf
            if check and cond[lam] > COND_LIMIT:
                raise AssumptionViolated(t, STEP_ASSUMPTION[lam], node=node,
                                         condition=cond[lam])
            sol = np.linalg.solve(A, K)
        for i in (1, 2, 3):
            partial[i][lam] = sol[(i - 1) * m:i * m]
    sigma = {}
    for i in (1, 2, 3):
        c = partial[i]
        sigma[i] = {0: c[0], 1: c[1] - c[0], 2: c[2] - c[0],
                    3: c[3] - c[1] - c[2] + c[0]}
    const = {}
    for i, s in fb.diff_const.items():
        const[i] = sum(P[j] @ s for j in LEVELS if i in NOISES[j])
    return SigmaChain(sigma=sigma, partial=partial, cond=cond, matrices=mats,
                      const=const)


def z_form(chain: SigmaChain, i: int) -> Form:
    return dict(chain.sigma[i])


@dataclass
class ClosedLoop:
    """Closed-loop coefficients of the four projected states.

    ``drift[k]`` is a linear form giving ``d X_k`` drift; ``diff[(i, k)]``
    the W_i diffusion of ``X_k`` (only for noises observed at level ``k``);
    ``const[i]`` the additive diffusion vector.
    """

    drift: dict
    diff: dict
    const: dict


def closed_loop(fb: FilteredFBSDE, P: list, chain: SigmaChain | None = None) -> ClosedLoop:
    if chain is None:
        chain = solve_sigma(fb, P, check=False)
    Y = y_form(P)
    Z = {i: chain.sigma[i] for i in (1, 2, 3)}
    drift = {}
    for k in LEVELS:
        acc: Form = {}
        for l, M in fb.drift_x.items():
            _acc(acc, meet(l, k), M)
        for l, M in fb.drift_y.items():
            add_into(acc, left(M, project(Y, meet(l, k))))
        for (i, l), M in fb.drift_z.items():
            add_into(acc, left(M, project(Z[i], meet(l, k))))
        drift[k] = acc
    diff = {}
    for k in LEVELS:
        for i in NOISES[k]:
            acc = {}
            for (ii, l), M in fb.diff_x.items():
                if ii == i:
                    _acc(acc, meet(l, k), M)
            for (ii, l), M in fb.diff_y.items():
                if ii == i:
                    add_into(acc, left(M, project(Y, meet(l, k))))
            for (ii, kk, l), M in fb.diff_z.items():
                if ii == i:
                    add_into(acc, left(M, project(Z[kk], meet(l, k))))
            diff[(i, k)] = acc
    return ClosedLoop(drift=drift, diff=diff, const=dict(fb.diff_const))


def generator(fb: FilteredFBSDE, P: list, chain: SigmaChain) -> Form:
    Y = y_form(P)
    gen: Form = {}
    for l, M in fb.gen_x.items():
        _acc(gen, l, M)
    for l, M in fb.gen_y.items():
        add_into(gen, left(M, project(Y, l)))
    for (i, l), M in fb.gen_z.items():
        add_into(gen, left(M, project(chain.sigma[i], l)))
    return gen


def riccati_rhs(fb: FilteredFBSDE, P: list, t: float = float("nan"),
                node=None, check: bool = True):
    """Time derivatives of ``Pcal_0..3`` for the decoupling ansatz.

    Matching drifts in ``dY_k = -gen_k dt + ...`` gives
    ``dPcal_k/dt = -gen_k - [sum_j Pcal_j drift_j]_k``.
    Returns ``(derivatives, chain)``.
    """
    chain = solve_sigma(fb, P, t=t, node=node, check=check)
    loop = closed_loop(fb, P, chain)
    gen = generator(fb, P, chain)
    lhs: Form = {}
    for j in LEVELS:
        add_into(lhs, left(P[j], loop.drift[j]))
    m = fb.dim
    zero = np.zeros((m, m))
    dP = [-(gen.get(k, zero) + lhs.get(k, zero)) for k in LEVELS]
    return dP, chain


def stacked_matrices(loop: ClosedLoop, dim: int):
    """Dense matrices of the stacked state ``(X_full, X_hat, X_check, X_common)``.

    Returns ``(D, G, s)`` with drift ``D``, diffusion matrices ``G[i]`` and
    additive vectors ``s[i]`` (i = 1, 2, 3, index 0 unused).
    """
    m = dim
    D = np.zeros((4 * m, 4 * m))
    G = np.zeros((4, 4 * m, 4 * m))
    s = np.zeros((4, 4 * m))
    for k in LEVELS:
        for l, M in loop.drift[k].items():
            D[k * m:(k + 1) * m, l * m:(l + 1) * m] += M
        for i in NOISES[k]:
            for l, M in loop.diff[(i, k)].items():
                G[i, k * m:(k + 1) * m, l * m:(l + 1) * m] += M
            if i in loop.const:
                s[i, k * m:(k + 1) * m] += loop.const[i]
    return D, G, s


def y_matrix(P: list) -> np.ndarray:
    """Rows mapping the stacked state to ``Y`` (full-level adjoint)."""
    return np.hstack([P[k] for k in LEVELS])


def z_matrix(chain: SigmaChain, i: int) -> np.ndarray:
    return np.hstack([chain.sigma[i][k] for k in LEVELS])
