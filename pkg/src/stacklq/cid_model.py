"""Leader systems for games whose diffusion does not involve the controls.

Two formulations of the leader's augmented forward-backward system are
provided.

``"reduced"``
    Augmented state ``X = (x, p)`` and adjoint ``Y = (y, psi_hat)``, where
    ``psi_hat`` is the follower's filtered adjoint and ``p`` its leader-side
    adjoint.  This is the classical formulation; it treats the follower's
    value function as if the W2 channel were observed by the follower.

``"extended"``
    Augmented state ``X = (x, p, q)`` and adjoint ``Y = (y, psi_hat, nu)``.
    The follower's Riccati equation uses the full-information Lyapunov
    solution ``Pi`` for the unobserved W2 channel and carries the extra
    adjoint ``nu`` for the part of the leader's control the follower cannot
    predict.  It coincides with ``"reduced"`` whenever ``A2 = 0``.

Both are expressed as :class:`~stacklq.decoupling.FilteredFBSDE` objects so
the generic decoupling engine can produce the Riccati systems, closed loops
and strategies.  A hand-written right-hand side of the reduced system is
provided as an independent check of the engine.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .decoupling import FilteredFBSDE, project, y_form
from .game_model import GameSpec

MODELS = ("reduced", "extended")


def check_model(model: str) -> str:
    if model not in MODELS:
        raise ValueError(f"model must be one of {MODELS}, got {model!r}")
    return model


def is_cid(spec: GameSpec) -> bool:
    return spec.control_independent


def blocks(n: int, nb: int, entries: dict) -> np.ndarray:
    """Dense ``(nb*n) x (nb*n)`` matrix from ``{(row_block, col_block): M}``."""
    out = np.zeros((nb * n, nb * n))
    for (r, c), M in entries.items():
        out[r * n:(r + 1) * n, c * n:(c + 1) * n] += M
    return out


@dataclass(frozen=True)
class CidCoefficients:
    """Derived matrices at one time node.

    ``S1 = B0 N1^-1 B0^T``, ``S2 = C0 N2^-1 C0^T`` and the follower's
    closed-loop drift ``K = A0 - S1 P``.
    """

    A: tuple
    S1: np.ndarray
    S2: np.ndarray
    K: np.ndarray
    P: np.ndarray
    Q2: np.ndarray
    G2: np.ndarray


def control_products(spec: GameSpec):
    B0, C0 = spec.B[0], spec.C[0]
    S1 = B0 @ np.linalg.solve(spec.N1, B0.T)
    S2 = C0 @ np.linalg.solve(spec.N2, C0.T)
    return 0.5 * (S1 + S1.T), 0.5 * (S2 + S2.T)


def coefficients(spec: GameSpec, P: np.ndarray) -> CidCoefficients:
    S1, S2 = control_products(spec)
    return CidCoefficients(A=spec.A, S1=S1, S2=S2, K=spec.A[0] - S1 @ P, P=P,
                           Q2=spec.Q2, G2=spec.G2)


# ---------------------------------------------------------------------------
# follower equations
# ---------------------------------------------------------------------------

def follower_rhs_reduced(spec: GameSpec, P: np.ndarray) -> np.ndarray:
    """dP/dt of the follower's Riccati equation (control-dependent diffusion allowed).

    ``dP/dt = -[P A0 + A0^T P + sum_i Ai^T P Ai + Q1 - Theta Nbar1^-1 Theta^T]``
    with ``Theta = P B0 + sum_i Ai^T P Bi`` and ``Nbar1 = N1 + sum_i Bi^T P Bi``.
    """
    return follower_rhs_factory(spec)(P)


def follower_rhs_factory(spec: GameSpec):
    """Precompiled form of :func:`follower_rhs_reduced` (skips zero coefficients)."""
    A, B = spec.A, spec.B
    A0, A0T, Q1 = A[0], A[0].T, spec.Q1
    noise_A = [(A[i], A[i].T) for i in (1, 2, 3) if np.any(A[i])]
    if spec.control_independent:
        S1, _ = control_products(spec)

        def rhs(P):
            out = P @ A0 + A0T @ P + Q1 - P @ S1 @ P
            for Ai, AiT in noise_A:
                out = out + AiT @ P @ Ai
            return -out
        return rhs
    N1, B0 = spec.N1, B[0]
    terms = [(A[i], A[i].T, B[i], B[i].T) for i in (1, 2, 3)]

    def rhs(P):
        theta = P @ B0
        nbar = np.array(N1, dtype=float)
        lin = P @ A0 + A0T @ P + Q1
        for Ai, AiT, Bi, BiT in terms:
            lin = lin + AiT @ P @ Ai
            theta = theta + AiT @ P @ Bi
            nbar = nbar + BiT @ P @ Bi
        return -(lin - theta @ np.linalg.solve(nbar, theta.T))
    return rhs


def lyapunov_rhs(spec: GameSpec, Pi: np.ndarray) -> np.ndarray:
    """Full-information Lyapunov equation of the uncontrolled error dynamics."""
    A = spec.A
    out = Pi @ A[0] + A[0].T @ Pi + spec.Q1
    for i in (1, 2, 3):
        out = out + A[i].T @ Pi @ A[i]
    return -out


def follower_rhs_extended(spec: GameSpec, P: np.ndarray, Pi: np.ndarray) -> np.ndarray:
    """Follower's Riccati equation when the W2 channel is unobserved (CID only)."""
    A = spec.A
    S1, _ = control_products(spec)
    out = (P @ A[0] + A[0].T @ P + A[1].T @ P @ A[1] + A[3].T @ P @ A[3]
           + A[2].T @ Pi @ A[2] + spec.Q1 - P @ S1 @ P)
    return -out


# ---------------------------------------------------------------------------
# leader forward-backward systems
# ---------------------------------------------------------------------------

def reduced_fbsde(spec: GameSpec, P: np.ndarray) -> FilteredFBSDE:
    """Leader system with ``X = (x, p)``, ``Y = (y, psi_hat)``."""
    n = spec.n
    c = coefficients(spec, P)
    A, S1, S2, K = c.A, c.S1, c.S2, c.K
    calA = {0: blocks(n, 2, {(0, 0): A[0], (1, 1): K}),
            1: blocks(n, 2, {(0, 0): A[1], (1, 1): A[1]}),
            2: blocks(n, 2, {(0, 0): A[2]}),
            3: blocks(n, 2, {(0, 0): A[3], (1, 1): A[3]})}
    const = {i: np.concatenate([spec.noise[i - 1], np.zeros(n)]) for i in (1, 2, 3)}
    return FilteredFBSDE(
        dim=2 * n,
        terminal=blocks(n, 2, {(0, 0): c.G2}),
        drift_x={0: calA[0],
                 1: blocks(n, 2, {(0, 0): -S1 @ P}),
                 3: blocks(n, 2, {(0, 1): -S2 @ P})},
        drift_y={0: blocks(n, 2, {(0, 1): -S1, (1, 0): -S1}),
                 2: blocks(n, 2, {(0, 0): -S2})},
        diff_x={(i, 0): calA[i] for i in (1, 2, 3)},
        diff_const=const,
        gen_x={0: blocks(n, 2, {(0, 0): c.Q2}),
               3: blocks(n, 2, {(1, 1): -P @ S2 @ P})},
        gen_y={0: calA[0].T,
               1: blocks(n, 2, {(0, 0): -P @ S1}),
               3: blocks(n, 2, {(1, 0): -P @ S2})},
        gen_z={(i, 0): calA[i].T for i in (1, 2, 3)},
    )


def extended_fbsde(spec: GameSpec, P: np.ndarray, Pi: np.ndarray) -> FilteredFBSDE:
    """Leader system with ``X = (x, p, q)``, ``Y = (y, psi_hat, nu)``."""
    n = spec.n
    c = coefficients(spec, P)
    A, S1, S2, K = c.A, c.S1, c.S2, c.K
    sx = {(1, 0): blocks(n, 3, {(0, 0): A[1], (1, 1): A[1], (2, 2): A[1]}),
          (2, 0): blocks(n, 3, {(0, 0): A[2], (2, 2): A[2]}),
          (2, 1): blocks(n, 3, {(2, 1): A[2]}),
          (3, 0): blocks(n, 3, {(0, 0): A[3], (1, 1): A[3], (2, 2): A[3]})}
    const = {i: np.concatenate([spec.noise[i - 1], np.zeros(2 * n)]) for i in (1, 2, 3)}
    PiS2Pi = Pi @ S2 @ Pi
    return FilteredFBSDE(
        dim=3 * n,
        terminal=blocks(n, 3, {(0, 0): c.G2}),
        drift_x={0: blocks(n, 3, {(0, 0): A[0], (1, 1): K, (2, 2): A[0]}),
                 1: blocks(n, 3, {(0, 0): -S1 @ P}),
                 2: blocks(n, 3, {(0, 2): -S2 @ Pi}),
                 3: blocks(n, 3, {(0, 1): -S2 @ P, (0, 2): S2 @ Pi})},
        drift_y={0: blocks(n, 3, {(0, 1): -S1, (1, 0): -S1}),
                 2: blocks(n, 3, {(0, 0): -S2})},
        diff_x=sx,
        diff_const=const,
        gen_x={0: blocks(n, 3, {(0, 0): c.Q2}),
               2: blocks(n, 3, {(2, 2): -PiS2Pi}),
               3: blocks(n, 3, {(1, 1): -P @ S2 @ P, (2, 2): PiS2Pi})},
        gen_y={0: blocks(n, 3, {(0, 0): A[0].T, (1, 1): K.T, (2, 2): A[0].T}),
               1: blocks(n, 3, {(0, 0): -P @ S1}),
               2: blocks(n, 3, {(2, 0): -Pi @ S2}),
               3: blocks(n, 3, {(1, 0): -P @ S2, (2, 0): Pi @ S2})},
        gen_z={(1, 0): sx[(1, 0)].T, (2, 0): sx[(2, 0)].T,
               (2, 1): blocks(n, 3, {(1, 2): A[2].T}),
               (3, 0): sx[(3, 0)].T},
    )


def leader_fbsde(spec: GameSpec, P: np.ndarray, model: str, Pi: np.ndarray | None = None):
    if check_model(model) == "reduced":
        return reduced_fbsde(spec, P)
    return extended_fbsde(spec, P, Pi)


# ---------------------------------------------------------------------------
# hand-written reduced system (independent of the generic engine)
# ---------------------------------------------------------------------------

def reduced_leader_rhs(spec: GameSpec, P: np.ndarray, Pcal: list) -> list:
    """Derivatives of the four reduced leader blocks, written out explicitly.

    The system is lower triangular: the full block uses only itself, the
    hat and check blocks use the full block and themselves, the common
    block uses all four.
    """
    n = spec.n
    c = coefficients(spec, P)
    A, S1, S2, K = c.A, c.S1, c.S2, c.K
    A0c = blocks(n, 2, {(0, 0): A[0], (1, 1): K})
    Ac = [None,
          blocks(n, 2, {(0, 0): A[1], (1, 1): A[1]}),
          blocks(n, 2, {(0, 0): A[2]}),
          blocks(n, 2, {(0, 0): A[3], (1, 1): A[3]})]
    B0c = blocks(n, 2, {(0, 1): -S1, (1, 0): -S1})
    Bbar0 = blocks(n, 2, {(0, 0): -S1 @ P})
    C0c = blocks(n, 2, {(0, 0): -S2})
    Ctil0 = blocks(n, 2, {(0, 1): -S2 @ P})
    Chat0 = blocks(n, 2, {(1, 0): -P @ S2})
    Cbar0 = blocks(n, 2, {(1, 1): -P @ S2 @ P})
    Q2c = blocks(n, 2, {(0, 0): c.Q2})
    P0, P1, P2, P3 = Pcal
    S = P0 + P1 + P2 + P3

    def quad(M, idx):
        return sum(Ac[i].T @ M @ Ac[i] for i in idx)

    # closed-loop drift coefficients D[j][k]: coefficient of X_k in dX_j
    D00 = A0c + B0c @ P0
    D01 = Bbar0 + B0c @ P1
    D02 = B0c @ P2 + C0c @ (P0 + P2)
    D03 = Ctil0 + B0c @ P3 + C0c @ (P1 + P3)
    D11 = A0c + Bbar0 + B0c @ (P0 + P1)
    D13 = Ctil0 + B0c @ (P2 + P3) + C0c @ S
    D22 = A0c + (B0c + C0c) @ (P0 + P2)
    D23 = Bbar0 + Ctil0 + (B0c + C0c) @ (P1 + P3)
    D33 = A0c + Bbar0 + Ctil0 + (B0c + C0c) @ S

    g0 = Q2c + A0c.T @ P0 + quad(P0, (1, 2, 3))
    g1 = A0c.T @ P1 + Bbar0.T @ (P0 + P1) + quad(P1, (1, 3))
    g2 = A0c.T @ P2 + quad(P2, (2, 3))
    g3 = A0c.T @ P3 + Bbar0.T @ (P2 + P3) + Chat0 @ S + Cbar0 + quad(P3, (3,))

    d0 = -(g0 + P0 @ D00)
    d1 = -(g1 + P0 @ D01 + P1 @ D11)
    d2 = -(g2 + P0 @ D02 + P2 @ D22)
    d3 = -(g3 + P0 @ D03 + P1 @ D13 + P2 @ D23 + P3 @ D33)
    return [d0, d1, d2, d3]


# ---------------------------------------------------------------------------
# feedback strategies
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ControlForms:
    """Controls as linear forms of the projected augmented states.

    ``follower[level]`` (k1 x m) acts on ``X_level`` for levels hat/common;
    ``leader[level]`` (k2 x m) for levels check/common.
    """

    follower: dict
    leader: dict


def control_forms(spec: GameSpec, P: np.ndarray, Pcal: list, model: str,
                  Pi: np.ndarray | None = None) -> ControlForms:
    """Feedback laws of both players at one node.

    Follower: ``u1 = -N1^-1 [B0^T P x_hat + B0^T psi_hat]``.
    Leader:   ``u2 = -N2^-1 C0^T [y_check + P p_hc (+ Pi (q_check - q_hc))]``.
    """
    n = spec.n
    nb = 2 if check_model(model) == "reduced" else 3
    m = nb * n
    B0, C0 = spec.B[0], spec.C[0]

    def row(slot, M):
        out = np.zeros((M.shape[0], m))
        out[:, slot * n:(slot + 1) * n] = M
        return out

    Y = y_form(Pcal)
    Yhat = project(Y, 1)
    Ycheck = project(Y, 2)
    f_hat = row(0, B0.T @ P) + row(1, B0.T) @ Yhat.get(1, np.zeros((m, m)))
    f_cross = row(1, B0.T) @ Yhat.get(3, np.zeros((m, m)))
    l_check = row(0, C0.T) @ Ycheck.get(2, np.zeros((m, m)))
    l_cross = row(0, C0.T) @ Ycheck.get(3, np.zeros((m, m))) + row(1, C0.T @ P)
    if nb == 3:
        l_check = l_check + row(2, C0.T @ Pi)
        l_cross = l_cross - row(2, C0.T @ Pi)
    sol1 = lambda M: -np.linalg.solve(spec.N1, M)  # noqa: E731
    sol2 = lambda M: -np.linalg.solve(spec.N2, M)  # noqa: E731
    return ControlForms(follower={1: sol1(f_hat), 3: sol1(f_cross)},
                        leader={2: sol2(l_check), 3: sol2(l_cross)})
