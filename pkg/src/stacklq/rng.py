"""Counter-based normal variates (Philox4x64-10 + Box-Muller).

Every Brownian increment is a pure function of
``(seed, path, step, component, stream)``:

* key     = ``(seed, path)``
* counter = ``(step, 0, 0, stream)``

One Philox block yields four 64-bit words, turned into four standard normals
by two Box-Muller transforms; components 0, 1, 2 of a block drive W1, W2, W3.
``stream`` 0 is the primary noise; nested Monte Carlo uses streams ``1 + j``
to resample unobserved components.  The block function matches
``numpy.random.Philox`` (see the tests), which serves as the reference.

Two implementations are provided: a scalar one compiled with numba (used
inside the simulation kernels) and a vectorised numpy one.
"""

from __future__ import annotations

import numpy as np

from ._numba import njit

M0 = np.uint64(0xD2E7470EE14C6C93)
M1 = np.uint64(0xCA5A826395121157)
W0 = np.uint64(0x9E3779B97F4A7C15)
W1 = np.uint64(0xBB67AE8584CAA73B)
MASK32 = np.uint64(0xFFFFFFFF)
S32 = np.uint64(32)
S11 = np.uint64(11)
ROUNDS = 10
TWO_M53 = 2.0 ** -53
TWO_PI = 2.0 * np.pi


@njit(cache=True)
def _mulhilo(a, b):
    lo = a * b
    a_lo = a & MASK32
    a_hi = a >> S32
    b_lo = b & MASK32
    b_hi = b >> S32
    p0 = a_lo * b_lo
    p1 = a_lo * b_hi
    p2 = a_hi * b_lo
    p3 = a_hi * b_hi
    mid = (p0 >> S32) + (p1 & MASK32) + (p2 & MASK32)
    hi = p3 + (p1 >> S32) + (p2 >> S32) + (mid >> S32)
    return hi, lo


@njit(cache=True)
def philox_block(k0, k1, c0, c1, c2, c3):
    """Philox4x64-10 of one counter under one key (all uint64)."""
    for r in range(ROUNDS):
        if r > 0:
            k0 = k0 + W0
            k1 = k1 + W1
        hi0, lo0 = _mulhilo(M0, c0)
        hi1, lo1 = _mulhilo(M1, c2)
        c0, c1, c2, c3 = hi1 ^ c1 ^ k0, lo1, hi0 ^ c3 ^ k1, lo0
    return c0, c1, c2, c3


@njit(cache=True)
def _box_muller(wa, wb):
    u1 = (np.float64(wa >> S11) + 1.0) * TWO_M53
    u2 = np.float64(wb >> S11) * TWO_M53
    r = np.sqrt(-2.0 * np.log(u1))
    return r * np.cos(TWO_PI * u2), r * np.sin(TWO_PI * u2)


@njit(cache=True)
def normals_block(seed, path, step, stream):
    """Four standard normals for ``(seed, path, step, stream)``."""
    w0, w1, w2, w3 = philox_block(np.uint64(seed), np.uint64(path), np.uint64(step),
                                  np.uint64(0), np.uint64(0), np.uint64(stream))
    z0, z1 = _box_muller(w0, w1)
    z2, z3 = _box_muller(w2, w3)
    return z0, z1, z2, z3


@njit(cache=True)
def normal_component(seed, path, step, stream, comp):
    z0, z1, z2, z3 = normals_block(seed, path, step, stream)
    if comp == 0:
        return z0
    if comp == 1:
        return z1
    if comp == 2:
        return z2
    return z3


# ---------------------------------------------------------------------------
# numpy implementation
# ---------------------------------------------------------------------------

def _mulhilo_np(a, b):
    lo = a * b
    a_lo, a_hi = a & MASK32, a >> S32
    b_lo, b_hi = b & MASK32, b >> S32
    p0, p1, p2, p3 = a_lo * b_lo, a_lo * b_hi, a_hi * b_lo, a_hi * b_hi
    mid = (p0 >> S32) + (p1 & MASK32) + (p2 & MASK32)
    hi = p3 + (p1 >> S32) + (p2 >> S32) + (mid >> S32)
    return hi, lo


def philox_blocks_np(k0, k1, c0, c1, c2, c3) -> np.ndarray:
    """Vectorised Philox4x64-10; arguments broadcast; returns ``(..., 4)`` uint64."""
    k0, k1, c0, c1, c2, c3 = np.broadcast_arrays(
        *(np.asarray(v, dtype=np.uint64) for v in (k0, k1, c0, c1, c2, c3)))
    k0, k1 = k0.copy(), k1.copy()
    with np.errstate(over="ignore"):
        for r in range(ROUNDS):
            if r > 0:
                k0 = k0 + W0
                k1 = k1 + W1
            hi0, lo0 = _mulhilo_np(M0, c0)
            hi1, lo1 = _mulhilo_np(M1, c2)
            c0, c1, c2, c3 = hi1 ^ c1 ^ k0, lo1, hi0 ^ c3 ^ k1, lo0
    return np.stack([c0, c1, c2, c3], axis=-1)


def _box_muller_np(wa, wb):
    u1 = ((wa >> S11).astype(np.float64) + 1.0) * TWO_M53
    u2 = (wb >> S11).astype(np.float64) * TWO_M53
    r = np.sqrt(-2.0 * np.log(u1))
    return r * np.cos(TWO_PI * u2), r * np.sin(TWO_PI * u2)


def normals_np(seed, path, step, stream) -> np.ndarray:
    """Vectorised :func:`normals_block`; returns ``(..., 4)`` float64."""
    w = philox_blocks_np(seed, path, step, 0, 0, stream)
    z0, z1 = _box_muller_np(w[..., 0], w[..., 1])
    z2, z3 = _box_muller_np(w[..., 2], w[..., 3])
    return np.stack([z0, z1, z2, z3], axis=-1)


def brownian_increments(seed: int, paths, n_steps: int, h: float,
                        streams=None) -> np.ndarray:
    """Increments ``(len(paths), n_steps, 3)`` of (W1, W2, W3).

    ``streams`` (shape ``(len(paths), 3)``) selects the stream per component;
    default all zeros.
    """
    paths = np.asarray(paths, dtype=np.uint64)
    if streams is None:
        streams = np.zeros((paths.size, 3), dtype=np.uint64)
    streams = np.asarray(streams, dtype=np.uint64)
    steps = np.arange(n_steps, dtype=np.uint64)
    out = np.empty((paths.size, n_steps, 3))
    sq = np.sqrt(h)
    if np.all(streams == streams[:, :1]):
        z = normals_np(np.uint64(seed), paths[:, None], steps[None, :], streams[:, :1])
        out[:] = sq * z[..., :3]
        return out
    for c in range(3):
        z = normals_np(np.uint64(seed), paths[:, None], steps[None, :], streams[:, c:c + 1])
        out[:, :, c] = sq * z[..., c]
    return out
