"""Backward RK4 integration of matrix ODEs given as fields of named blocks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import NonFinite
from .game_model import MatPath, TimeGrid

BLOWUP = 1e12


class BlockLayout:
    """Packs a dict of named arrays into one flat state vector and back."""

    def __init__(self, blocks: Sequence[tuple]):
        self.names = [name for name, _ in blocks]
        self.shapes = {name: tuple(shape) for name, shape in blocks}
        self.slices = {}
        offset = 0
        for name in self.names:
            size = int(np.prod(self.shapes[name]))
            self.slices[name] = slice(offset, offset + size)
            offset += size
        self.size = offset

    def pack(self, values: Mapping[str, np.ndarray]) -> np.ndarray:
        out = np.empty(self.size)
        for name in self.names:
            out[self.slices[name]] = np.asarray(values[name], dtype=float).ravel()
        return out

    def unpack(self, flat: np.ndarray) -> dict:
        return {name: flat[..., self.slices[name]].reshape(
            flat.shape[:-1] + self.shapes[name]) for name in self.names}

    def block_of(self, index: int) -> str:
        for name in self.names:
            s = self.slices[name]
            if s.start <= index < s.stop:
                return name
        raise IndexError(index)


@dataclass
class RiccatiField:
    """Right-hand side ``dP/dt = rhs(t, P)`` with terminal value ``P(T)``.

    The state may be a single matrix or a stack of named blocks described by
    ``layout``; in that case ``rhs`` receives and returns flat vectors.
    """

    rhs: Callable[[float, np.ndarray], np.ndarray]
    terminal: np.ndarray
    layout: BlockLayout | None = None
    name: str = "P"

    def __post_init__(self):
        self.terminal = np.asarray(self.terminal, dtype=float)

    def __call__(self, t: float, state: np.ndarray) -> np.ndarray:
        return self.rhs(t, state)

    def which(self, bad: np.ndarray) -> str:
        if self.layout is None:
            return self.name
        idx = int(np.flatnonzero(np.asarray(bad).ravel())[0])
        return self.layout.block_of(idx)

    def split(self, path: MatPath) -> dict:
        """Split a stacked solution into one :class:`MatPath` per block."""
        if self.layout is None:
            return {self.name: path}
        parts = self.layout.unpack(path.values)
        return {k: MatPath(path.grid, v) for k, v in parts.items()}


def _check(field: RiccatiField, t: float, v: np.ndarray) -> None:
    if np.abs(v).max() <= BLOWUP:      # False for NaN as well
        return
    bad = ~np.isfinite(v) | (np.abs(v) > BLOWUP)
    raise NonFinite(t, which=field.which(bad))


def integrate_backward(field: RiccatiField, grid: TimeGrid) -> MatPath:
    """Classical RK4 from ``T`` down to ``0`` with the grid step.

    The terminal node holds ``field.terminal`` bit-exactly.  Any stage value
    or slope that is non-finite or exceeds 1e12 in magnitude raises
    :class:`NonFinite` with the stage time and the offending block.
    """
    h = grid.h
    N = grid.n_steps
    y = np.array(field.terminal, dtype=float)
    out = np.empty((N + 1,) + y.shape)
    out[N] = y
    f = field.rhs
    _check(field, grid.horizon_T, f(grid.horizon_T, y))
    for k in range(N, 0, -1):
        t = grid.time(k)
        tm = t - 0.5 * h
        k1 = f(t, y)
        _check(field, t, k1)
        y2 = y - 0.5 * h * k1
        _check(field, tm, y2)
        k2 = f(tm, y2)
        _check(field, tm, k2)
        y3 = y - 0.5 * h * k2
        _check(field, tm, y3)
        k3 = f(tm, y3)
        _check(field, tm, k3)
        y4 = y - h * k3
        _check(field, t - h, y4)
        k4 = f(grid.time(k - 1), y4)
        _check(field, t - h, k4)
        y = y - (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        _check(field, grid.time(k - 1), y)
        out[k - 1] = y
    return MatPath(grid, out)


def riccati_residual(path: MatPath, field: RiccatiField, grid: TimeGrid) -> float:
    """Max over interior nodes of the sup-norm defect of a claimed solution.

    Uses the central difference ``(P[k+1] - P[k-1]) / 2h`` against
    ``field(t_k, P[k])``.
    """
    v = path.values
    h = grid.h
    worst = 0.0
    for k in range(1, grid.n_steps):
        d = (v[k + 1] - v[k - 1]) / (2.0 * h) - field.rhs(grid.time(k), v[k])
        worst = max(worst, float(np.max(np.abs(d))))
    return worst


def residual_bound(path: MatPath, grid: TimeGrid) -> float:
    """Acceptance bound ``10 h^2 (1 + max node norm)^2``."""
    return 10.0 * grid.h ** 2 * (1.0 + path.max_norm()) ** 2
