"""Euler-Maruyama kernels for time-varying linear SDEs.

The simulated system is

    Z_{k+1} = Z_k + h D_k Z_k + sum_c (G_{k,c} Z_k + s_c) dW_c(k),   c = 0, 1, 2,

with coefficients frozen on each step (left-point rule).  All Brownian
increments come from :mod:`stacklq.rng`, so trajectories are reproducible
and independent of the order in which they are computed.

Two interchangeable backends exist: compiled numba kernels working on
sparse (COO) coefficient patterns, and vectorised numpy code.  The backend
is chosen at import time (see :mod:`stacklq._numba`); both produce the same
trajectories up to floating-point summation order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _numba
from ._numba import njit, prange
from .errors import NonFinite
from .game_model import TimeGrid
from .rng import brownian_increments, normal_component, normals_block

BLOWUP = 1e12
CHUNK = 4096


@dataclass(frozen=True)
class LinearSDE:
    """Coefficients of a linear SDE on ``grid``.

    ``D``: ``(n_steps, d, d)``; ``G``: ``(n_steps, 3, d, d)``; ``s``: ``(3, d)``;
    ``z0``: ``(d,)``.
    """

    grid: TimeGrid
    D: np.ndarray
    G: np.ndarray
    s: np.ndarray
    z0: np.ndarray

    def __post_init__(self):
        N, d = self.grid.n_steps, self.z0.shape[0]
        if self.D.shape != (N, d, d) or self.G.shape != (N, 3, d, d) or self.s.shape != (3, d):
            raise ValueError("inconsistent LinearSDE shapes")

    @property
    def dim(self) -> int:
        return self.z0.shape[0]

    def coo(self):
        """Sparse patterns (union over time) of the drift, diffusion and additive terms."""
        dr, dc = np.nonzero(np.any(self.D != 0.0, axis=0))
        dv = np.ascontiguousarray(self.D[:, dr, dc])
        gn, gr, gc = [], [], []
        for c in range(3):
            r, cc = np.nonzero(np.any(self.G[:, c] != 0.0, axis=0))
            gn.append(np.full(r.size, c))
            gr.append(r)
            gc.append(cc)
        gn, gr, gc = (np.concatenate(a).astype(np.int64) for a in (gn, gr, gc))
        gv = np.ascontiguousarray(self.G[:, gn, gr, gc])
        sn, sr = np.nonzero(self.s)
        sv = self.s[sn, sr].copy()
        return (dr.astype(np.int64), dc.astype(np.int64), dv, gn, gr, gc, gv,
                sn.astype(np.int64), sr.astype(np.int64), sv)


# ---------------------------------------------------------------------------
# numba kernels
# ---------------------------------------------------------------------------

@njit(cache=True)
def _increments(seed, path, k, streams_row, sqrt_h, dw):
    if streams_row[0] == streams_row[1] and streams_row[1] == streams_row[2]:
        z0, z1, z2, _ = normals_block(seed, path, k, streams_row[0])
        dw[0] = sqrt_h * z0
        dw[1] = sqrt_h * z1
        dw[2] = sqrt_h * z2
    else:
        for c in range(3):
            dw[c] = sqrt_h * normal_component(seed, path, k, streams_row[c], c)


@njit(cache=True)
def _advance(z, znew, k, h, dw, dr, dc, dv, gn, gr, gc, gv, sn, sr, sv):
    for r in range(z.size):
        znew[r] = z[r]
    for e in range(dr.size):
        znew[dr[e]] += h * dv[k, e] * z[dc[e]]
    for e in range(gr.size):
        znew[gr[e]] += gv[k, e] * z[gc[e]] * dw[gn[e]]
    for e in range(sr.size):
        znew[sr[e]] += sv[e] * dw[sn[e]]
    ok = True
    for r in range(z.size):
        a = abs(znew[r])
        if not (a <= BLOWUP):
            ok = False
    return ok


@njit(cache=True, parallel=True)
def _paths_kernel(z0, n_steps, h, seed, path_ids, streams, dr, dc, dv, gn, gr, gc, gv,
                  sn, sr, sv, out_z, out_dw, status):
    n = path_ids.size
    d = z0.size
    sqrt_h = np.sqrt(h)
    for p in prange(n):
        z = z0.copy()
        znew = np.empty(d)
        dw = np.empty(3)
        out_z[p, 0, :] = z
        status[p] = -1
        for k in range(n_steps):
            _increments(seed, path_ids[p], k, streams[p], sqrt_h, dw)
            out_dw[p, k, :] = dw
            ok = _advance(z, znew, k, h, dw, dr, dc, dv, gn, gr, gc, gv, sn, sr, sv)
            z, znew = znew, z
            out_z[p, k + 1, :] = z
            if not ok:
                status[p] = k + 1
                break


@njit(cache=True, parallel=True)
def _group_mean_kernel(z0, n_steps, h, seed, outer_ids, n_inner, observed, select,
                       dr, dc, dv, gn, gr, gc, gv, sn, sr, sv, out, status):
    n_outer = outer_ids.size
    d = z0.size
    q = select.size
    sqrt_h = np.sqrt(h)
    for o in prange(n_outer):
        acc = np.zeros((n_steps + 1, q))
        z = np.empty(d)
        znew = np.empty(d)
        dw = np.empty(3)
        streams = np.zeros(3, dtype=np.uint64)
        status[o] = -1
        for j in range(n_inner):
            for c in range(3):
                streams[c] = np.uint64(0) if observed[c] else np.uint64(1 + j)
            for r in range(d):
                z[r] = z0[r]
            for a in range(q):
                acc[0, a] += z[select[a]]
            for k in range(n_steps):
                _increments(seed, outer_ids[o], k, streams, sqrt_h, dw)
                ok = _advance(z, znew, k, h, dw, dr, dc, dv, gn, gr, gc, gv, sn, sr, sv)
                for r in range(d):
                    z[r] = znew[r]
                for a in range(q):
                    acc[k + 1, a] += z[select[a]]
                if not ok:
                    status[o] = k + 1
                    break
        for k in range(n_steps + 1):
            for a in range(q):
                out[o, k, a] = acc[k, a] / n_inner


@njit(cache=True)
def _quad_costs(y, W, scale, costs):
    n_costs = W.shape[0]
    q = y.size
    for e in range(n_costs):
        acc = 0.0
        for a in range(q):
            if y[a] == 0.0:
                continue
            row = 0.0
            for b in range(q):
                row += W[e, a, b] * y[b]
            acc += y[a] * row
        costs[e] += 0.5 * scale * acc


@njit(cache=True, parallel=True)
def _cost_kernel(z0, n_steps, h, seed, path_ids, dr, dc, dv, gn, gr, gc, gv, sn, sr, sv,
                 C, W, WT, costs, status):
    n = path_ids.size
    d = z0.size
    q = C.shape[1]
    sqrt_h = np.sqrt(h)
    for p in prange(n):
        z = z0.copy()
        znew = np.empty(d)
        dw = np.empty(3)
        y = np.empty(q)
        streams = np.zeros(3, dtype=np.uint64)
        status[p] = -1
        for k in range(n_steps + 1):
            for a in range(q):
                s_ = 0.0
                for r in range(d):
                    s_ += C[k, a, r] * z[r]
                y[a] = s_
            w = 0.5 * h if (k == 0 or k == n_steps) else h
            _quad_costs(y, W, w, costs[p])
            if k == n_steps:
                _quad_costs(y, WT, 1.0, costs[p])
                break
            _increments(seed, path_ids[p], k, streams, sqrt_h, dw)
            ok = _advance(z, znew, k, h, dw, dr, dc, dv, gn, gr, gc, gv, sn, sr, sv)
            z, znew = znew, z
            if not ok:
                status[p] = k + 1
                break


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------

def _np_step(sde: LinearSDE, Z: np.ndarray, k: int, dw: np.ndarray) -> np.ndarray:
    h = sde.grid.h
    out = Z + h * (Z @ sde.D[k].T)
    for c in range(3):
        out = out + dw[:, c:c + 1] * (Z @ sde.G[k, c].T + sde.s[c])
    return out


def _np_bad(Z: np.ndarray) -> np.ndarray:
    return ~(np.abs(Z) <= BLOWUP).all(axis=1)


def _raise_status(status: np.ndarray, ids, grid: TimeGrid) -> None:
    bad = np.flatnonzero(status >= 0)
    if bad.size:
        p = int(bad[0])
        raise NonFinite(grid.time(int(status[p])), which="state", path=int(ids[p]))


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

def _as_ids(path_ids) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(path_ids, dtype=np.uint64))


def simulate_paths(sde: LinearSDE, seed: int, path_ids, streams=None,
                   backend: str | None = None):
    """Full trajectories ``(n, n_steps + 1, d)`` and increments ``(n, n_steps, 3)``."""
    ids = _as_ids(path_ids)
    n, N, d = ids.size, sde.grid.n_steps, sde.dim
    if streams is None:
        streams = np.zeros((n, 3), dtype=np.uint64)
    streams = np.ascontiguousarray(np.asarray(streams, dtype=np.uint64))
    backend = backend or _numba.backend_name()
    if backend == "numba":
        out_z = np.empty((n, N + 1, d))
        out_dw = np.empty((n, N, 3))
        status = np.empty(n, dtype=np.int64)
        _paths_kernel(sde.z0.astype(float), N, sde.grid.h, np.uint64(seed), ids, streams,
                      *sde.coo(), out_z, out_dw, status)
        _raise_status(status, ids, sde.grid)
        return out_z, out_dw
    dW = brownian_increments(seed, ids, N, sde.grid.h, streams)
    out_z = np.empty((n, N + 1, d))
    Z = np.broadcast_to(sde.z0, (n, d)).astype(float)
    out_z[:, 0] = Z
    for k in range(N):
        Z = _np_step(sde, Z, k, dW[:, k])
        out_z[:, k + 1] = Z
        bad = _np_bad(Z)
        if bad.any():
            status = np.where(bad, k + 1, -1)
            _raise_status(status, ids, sde.grid)
    return out_z, dW


def simulate_group_means(sde: LinearSDE, seed: int, outer_ids, n_inner: int,
                         observed, select, backend: str | None = None) -> np.ndarray:
    """Average of ``Z[select]`` over ``n_inner`` resamplings of the unobserved noises.

    For outer trajectory ``o`` the observed components use stream 0 of path
    ``outer_ids[o]``; unobserved component ``c`` of inner sample ``j`` uses
    stream ``1 + j``.  Returns ``(n_outer, n_steps + 1, len(select))``.
    """
    ids = _as_ids(outer_ids)
    observed = np.array([bool(observed[c]) for c in range(3)])
    select = np.ascontiguousarray(np.asarray(select, dtype=np.int64))
    n_outer, N = ids.size, sde.grid.n_steps
    backend = backend or _numba.backend_name()
    if backend == "numba":
        out = np.empty((n_outer, N + 1, select.size))
        status = np.empty(n_outer, dtype=np.int64)
        _group_mean_kernel(sde.z0.astype(float), N, sde.grid.h, np.uint64(seed), ids,
                           int(n_inner), observed, select, *sde.coo(), out, status)
        _raise_status(status, ids, sde.grid)
        return out
    out = np.zeros((n_outer, N + 1, select.size))
    per_chunk = max(1, CHUNK // max(1, n_inner))
    for start in range(0, n_outer, per_chunk):
        block = ids[start:start + per_chunk]
        rep = np.repeat(block, n_inner)
        j = np.tile(np.arange(n_inner, dtype=np.uint64), block.size)
        streams = np.zeros((rep.size, 3), dtype=np.uint64)
        for c in range(3):
            if not observed[c]:
                streams[:, c] = 1 + j
        Z, _ = simulate_paths(sde, seed, rep, streams, backend="numpy")
        sel = Z[:, :, select].reshape(block.size, n_inner, N + 1, select.size)
        out[start:start + block.size] = sel.sum(axis=1) / n_inner
    return out


def simulate_costs(sde: LinearSDE, seed: int, path_ids, C: np.ndarray, W: np.ndarray,
                   WT: np.ndarray, backend: str | None = None) -> np.ndarray:
    """Per-path quadratic costs.

    With outputs ``y_k = C[k] Z_k`` the cost ``e`` of a path is the
    trapezoidal sum of ``1/2 y_k^T W[e] y_k`` plus ``1/2 y_N^T WT[e] y_N``.
    Returns ``(n, n_costs)``.
    """
    ids = _as_ids(path_ids)
    n, N = ids.size, sde.grid.n_steps
    h = sde.grid.h
    C = np.ascontiguousarray(C, dtype=float)
    W = np.ascontiguousarray(W, dtype=float)
    WT = np.ascontiguousarray(WT, dtype=float)
    backend = backend or _numba.backend_name()
    if backend == "numba":
        costs = np.zeros((n, W.shape[0]))
        status = np.empty(n, dtype=np.int64)
        _cost_kernel(sde.z0.astype(float), N, h, np.uint64(seed), ids, *sde.coo(),
                     C, W, WT, costs, status)
        _raise_status(status, ids, sde.grid)
        return costs
    costs = np.zeros((n, W.shape[0]))
    for start in range(0, n, CHUNK):
        block = ids[start:start + CHUNK]
        dW = brownian_increments(seed, block, N, h)
        Z = np.broadcast_to(sde.z0, (block.size, sde.dim)).astype(float)
        acc = np.zeros((block.size, W.shape[0]))
        for k in range(N + 1):
            y = Z @ C[k].T
            w = 0.5 * h if k in (0, N) else h
            acc += 0.5 * w * np.einsum("na,eab,nb->ne", y, W, y)
            if k == N:
                acc += 0.5 * np.einsum("na,eab,nb->ne", y, WT, y)
                break
            Z = _np_step(sde, Z, k, dW[:, k])
            bad = _np_bad(Z)
            if bad.any():
                _raise_status(np.where(bad, k + 1, -1), block, sde.grid)
        costs[start:start + block.size] = acc
    return costs
