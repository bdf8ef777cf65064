"""Data model of the leader-follower game and its information structure.

The state is driven by three independent Brownian motions ``W1, W2, W3``.
The follower observes ``(W1, W3)``, the leader ``(W2, W3)``; ``W3`` is the
shared channel.  Every process appearing in the solvers is projected on one
of four *information levels*:

=========  =================  ==================================
level      noises             meaning
=========  =================  ==================================
``FULL``   W1, W2, W3         the full filtration
``HAT``    W1, W3             follower's estimate  (x-hat)
``CHECK``  W2, W3             leader's estimate    (x-check)
``COMMON`` W3                 common estimate      (x-hat-check)
=========  =================  ==================================

Projecting a level-``j`` quantity onto level ``k`` lands on ``meet(j, k)``,
the level whose noise set is the intersection.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

FULL, HAT, CHECK, COMMON = 0, 1, 2, 3
LEVELS = (FULL, HAT, CHECK, COMMON)
LEVEL_NAMES = ("full", "hat", "check", "common")
NOISES = {FULL: (1, 2, 3), HAT: (1, 3), CHECK: (2, 3), COMMON: (3,)}

_MEET = np.array(
    [[0, 1, 2, 3],
     [1, 1, 3, 3],
     [2, 3, 2, 3],
     [3, 3, 3, 3]],
    dtype=np.int64,
)

PSD_TOL = 1e-10
PD_TOL = 1e-10
SYM_TOL = 1e-12


def meet(a: int, b: int) -> int:
    """Level generated by the noises common to levels ``a`` and ``b``."""
    return int(_MEET[a, b])


def is_coarser_or_equal(a: int, b: int) -> bool:
    """True when level ``a`` carries no more information than level ``b``."""
    return meet(a, b) == a


def observes(level: int, noise: int) -> bool:
    return noise in NOISES[level]


def _frozen(a, ndim=None) -> np.ndarray:
    arr = np.array(a, dtype=float)
    if ndim == 2 and arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif ndim == 1 and arr.ndim == 0:
        arr = arr.reshape(1)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t_k = k T / n_steps`` on ``[0, T]``."""

    horizon_T: float
    n_steps: int

    def __post_init__(self):
        if not np.isfinite(self.horizon_T) or self.horizon_T <= 0:
            raise ValueError("horizon_T must be a positive finite number")
        if int(self.n_steps) != self.n_steps or self.n_steps < 2:
            raise ValueError("n_steps must be an integer >= 2")
        object.__setattr__(self, "n_steps", int(self.n_steps))
        object.__setattr__(self, "horizon_T", float(self.horizon_T))

    @property
    def h(self) -> float:
        return self.horizon_T / self.n_steps

    @property
    def nodes(self) -> np.ndarray:
        t = np.arange(self.n_steps + 1, dtype=float) * self.h
        t[-1] = self.horizon_T
        return t

    def time(self, k: int) -> float:
        if k == self.n_steps:
            return self.horizon_T
        return k * self.h

    def refine(self, factor: int = 2) -> "TimeGrid":
        return TimeGrid(self.horizon_T, self.n_steps * factor)


@dataclass(frozen=True)
class MatPath:
    """Matrix-valued function sampled on every node of a :class:`TimeGrid`.

    ``values`` has shape ``(n_steps + 1, *shape)``.
    """

    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape[0] != self.grid.n_steps + 1:
            raise ValueError(
                f"expected {self.grid.n_steps + 1} nodes, got {v.shape[0]}")
        if not np.all(np.isfinite(v)):
            raise ValueError("MatPath values must be finite")
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def shape(self) -> tuple:
        return self.values.shape[1:]

    def __getitem__(self, k):
        return self.values[k]

    def __len__(self):
        return self.values.shape[0]

    def at(self, t: float) -> np.ndarray:
        """Linear interpolation between nodes."""
        g = self.grid
        s = min(max(t / g.h, 0.0), float(g.n_steps))
        k = min(int(np.floor(s)), g.n_steps - 1)
        w = s - k
        return (1.0 - w) * self.values[k] + w * self.values[k + 1]

    def max_norm(self) -> float:
        return float(np.max(np.abs(self.values))) if self.values.size else 0.0


@dataclass(frozen=True)
class InfoPattern:
    """Which Brownian components each player observes."""

    follower_observes: frozenset = frozenset({1, 3})
    leader_observes: frozenset = frozenset({2, 3})

    def __post_init__(self):
        for name in ("follower_observes", "leader_observes"):
            s = frozenset(getattr(self, name))
            if not s <= {1, 2, 3}:
                raise ValueError(f"{name} must be a subset of {{1, 2, 3}}")
            object.__setattr__(self, name, s)

    @classmethod
    def canonical(cls) -> "InfoPattern":
        return cls()

    @classmethod
    def full(cls) -> "InfoPattern":
        return cls(frozenset({1, 2, 3}), frozenset({1, 2, 3}))

    def observed(self, which: str) -> frozenset:
        """Noise set behind ``which`` in {"G1", "G2", "G1G2", "F"}."""
        if which == "G1":
            return self.follower_observes
        if which == "G2":
            return self.leader_observes
        if which in ("G1G2", "G1∩G2", "common"):
            return self.follower_observes & self.leader_observes
        if which == "F":
            return frozenset({1, 2, 3})
        raise ValueError(f"unknown filtration {which!r}")


@dataclass(frozen=True)
class GameSpec:
    """Constant-coefficient linear-quadratic leader-follower game.

    State:  ``dx = (A0 x + B0 u1 + C0 u2) dt
    + sum_i (Ai x + Bi u1 + Ci u2 + noise_i) dWi``.

    Follower cost ``J1 = 1/2 E[int <Q1 x,x> + <N1 u1,u1> dt + <G1 x(T),x(T)>]``;
    leader cost ``J2`` likewise with ``Q2, N2, G2``.

    ``noise`` holds optional additive diffusion vectors (one per Brownian
    motion); they default to zero.
    """

    n: int
    k1: int
    k2: int
    A: tuple
    B: tuple
    C: tuple
    Q1: np.ndarray
    N1: np.ndarray
    G1: np.ndarray
    Q2: np.ndarray
    N2: np.ndarray
    G2: np.ndarray
    x0: np.ndarray
    noise: tuple = field(default=None)

    def __post_init__(self):
        object.__setattr__(self, "A", tuple(_frozen(a, 2) for a in self.A))
        object.__setattr__(self, "B", tuple(_frozen(b, 2) for b in self.B))
        object.__setattr__(self, "C", tuple(_frozen(c, 2) for c in self.C))
        for name in ("Q1", "N1", "G1", "Q2", "N2", "G2"):
            object.__setattr__(self, name, _frozen(getattr(self, name), 2))
        object.__setattr__(self, "x0", _frozen(self.x0, 1))
        if self.noise is None:
            noise = tuple(_frozen(np.zeros(self.n)) for _ in range(3))
        else:
            noise = tuple(_frozen(s, 1) for s in self.noise)
        object.__setattr__(self, "noise", noise)

    @property
    def control_independent(self) -> bool:
        """True when no control enters the diffusion coefficients."""
        return all(not np.any(self.B[i]) and not np.any(self.C[i])
                   for i in (1, 2, 3))

    @property
    def has_additive_noise(self) -> bool:
        return any(np.any(s) for s in self.noise)

    def replace(self, **changes) -> "GameSpec":
        data = {k: getattr(self, k) for k in (
            "n", "k1", "k2", "A", "B", "C", "Q1", "N1", "G1", "Q2", "N2",
            "G2", "x0", "noise")}
        data.update(changes)
        return GameSpec(**data)


@dataclass(frozen=True)
class CidSpec:
    """Scalar game whose diffusion coefficients do not involve the controls."""

    A0: float
    A1: float
    A2: float
    A3: float
    B0: float
    C0: float
    Q1: float
    N1: float
    G1: float
    Q2: float
    N2: float
    G2: float
    x0: float

    def __post_init__(self):
        for k, v in self.__dict__.items():
            if not np.isfinite(v):
                raise ValueError(f"{k} must be finite")
            object.__setattr__(self, k, float(v))

    def problems(self) -> list:
        out = []
        for name in ("Q1", "G1", "Q2", "G2"):
            if getattr(self, name) < 0:
                out.append(f"{name} negative")
        if self.N1 == 0:
            out.append("N1 is zero")
        if self.N2 == 0:
            out.append("N2 is zero")
        return out


@dataclass(frozen=True)
class ValidationReport:
    messages: tuple = ()

    @property
    def ok(self) -> bool:
        return not self.messages

    def __bool__(self):
        return self.ok

    def __iter__(self):
        return iter(self.messages)

    def __contains__(self, text):
        return any(text in m for m in self.messages)


def _check_shape(msgs, name, M, shape):
    if M.shape != shape:
        msgs.append(f"dimension mismatch: {name} has shape {M.shape}, expected {shape}")
        return False
    return True


def _check_sym(msgs, name, M):
    if not np.all(np.isfinite(M)):
        msgs.append(f"{name} has non-finite entries")
        return False
    if np.max(np.abs(M - M.T), initial=0.0) > SYM_TOL:
        msgs.append(f"{name} not symmetric")
        return False
    return True


def validate_spec(spec: GameSpec) -> ValidationReport:
    """Check dimensions, symmetry and definiteness of every coefficient.

    Never raises; returns a report listing each violated invariant.
    """
    msgs: list = []
    n, k1, k2 = spec.n, spec.k1, spec.k2
    for name, v in (("n", n), ("k1", k1), ("k2", k2)):
        if int(v) != v or v < 1:
            msgs.append(f"dimension mismatch: {name} must be a positive integer")
    if msgs:
        return ValidationReport(tuple(msgs))
    for name, mats, cols in (("A", spec.A, n), ("B", spec.B, k1), ("C", spec.C, k2)):
        if len(mats) != 4:
            msgs.append(f"dimension mismatch: {name} must hold four matrices")
            continue
        for i, M in enumerate(mats):
            _check_shape(msgs, f"{name}{i}", M, (n, cols))
            if not np.all(np.isfinite(M)):
                msgs.append(f"{name}{i} has non-finite entries")
    for name in ("Q1", "G1", "Q2", "G2"):
        M = getattr(spec, name)
        if _check_shape(msgs, name, M, (n, n)) and _check_sym(msgs, name, M):
            if np.linalg.eigvalsh(M).min() < -PSD_TOL:
                msgs.append(f"{name} not nonnegative definite")
    if _check_shape(msgs, "N1", spec.N1, (k1, k1)) and _check_sym(msgs, "N1", spec.N1):
        pass  # invertibility of the effective weight is checked at solve time
    if _check_shape(msgs, "N2", spec.N2, (k2, k2)) and _check_sym(msgs, "N2", spec.N2):
        if np.linalg.eigvalsh(spec.N2).min() < PD_TOL:
            msgs.append("N2 not positive definite")
    _check_shape(msgs, "x0", spec.x0, (n,))
    if len(spec.noise) != 3:
        msgs.append("dimension mismatch: noise must hold three vectors")
    else:
        for i, s in enumerate(spec.noise, start=1):
            _check_shape(msgs, f"noise{i}", s, (n,))
    return ValidationReport(tuple(msgs))


def embed_cid(spec: CidSpec) -> GameSpec:
    """One-dimensional :class:`GameSpec` equivalent to a scalar CID game."""
    z = np.zeros((1, 1))
    m = lambda v: np.array([[v]], dtype=float)  # noqa: E731
    return GameSpec(
        n=1, k1=1, k2=1,
        A=(m(spec.A0), m(spec.A1), m(spec.A2), m(spec.A3)),
        B=(m(spec.B0), z, z, z),
        C=(m(spec.C0), z, z, z),
        Q1=m(spec.Q1), N1=m(spec.N1), G1=m(spec.G1),
        Q2=m(spec.Q2), N2=m(spec.N2), G2=m(spec.G2),
        x0=np.array([spec.x0]),
    )


def as_game(spec) -> GameSpec:
    """Accept either a :class:`CidSpec` or a :class:`GameSpec`."""
    if isinstance(spec, CidSpec):
        return embed_cid(spec)
    if isinstance(spec, GameSpec):
        return spec
    raise TypeError(f"expected CidSpec or GameSpec, got {type(spec).__name__}")


def random_spec(rng: np.random.Generator, n: int = 2, k1: int = 1, k2: int = 1,
                scale: float = 0.3, control_diffusion: bool = True,
                control_scale: float = 1.0) -> GameSpec:
    """Random well-posed spec (positive weights, small coefficients).

    ``scale`` multiplies the state coefficients and the control loadings of
    the diffusions, ``control_scale`` the drift loadings ``B0`` and ``C0``.
    """
    def sym_psd(k):
        M = rng.normal(size=(k, k)) * 0.5
        return M @ M.T + 0.1 * np.eye(k)

    A = tuple(rng.normal(size=(n, n)) * scale for _ in range(4))
    if control_diffusion:
        B = tuple(rng.normal(size=(n, k1)) * (control_scale if i == 0 else scale)
                  for i in range(4))
        C = tuple(rng.normal(size=(n, k2)) * (control_scale if i == 0 else scale)
                  for i in range(4))
    else:
        B = (rng.normal(size=(n, k1)) * control_scale,) + tuple(np.zeros((n, k1)) for _ in range(3))
        C = (rng.normal(size=(n, k2)) * control_scale,) + tuple(np.zeros((n, k2)) for _ in range(3))
    return GameSpec(n=n, k1=k1, k2=k2, A=A, B=B, C=C,
                    Q1=sym_psd(n), N1=sym_psd(k1) + np.eye(k1), G1=sym_psd(n),
                    Q2=sym_psd(n), N2=sym_psd(k2) + np.eye(k2), G2=sym_psd(n),
                    x0=rng.normal(size=n))


GENERIC_CID = CidSpec(A0=0.1, A1=0.2, A2=0.2, A3=0.2, B0=1.0, C0=1.0,
                      Q1=1.0, N1=1.0, G1=1.0, Q2=1.0, N2=1.0, G2=1.0, x0=1.0)
"""The generic scalar test game used throughout the verification suite."""


def stack_levels(blocks: Sequence[np.ndarray]) -> np.ndarray:
    return np.concatenate([np.asarray(b, dtype=float) for b in blocks])
