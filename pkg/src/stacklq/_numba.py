"""Optional numba acceleration.

Set ``STACKLQ_DISABLE_NUMBA=1`` to run the pure-numpy code paths instead of
the compiled kernels (useful for debugging and for benchmarking).  When
numba is disabled or unavailable, :func:`njit` returns the function
unchanged and :data:`prange` is :func:`range`.
"""

from __future__ import annotations

import os

DISABLED = os.environ.get("STACKLQ_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes")

try:  # pragma: no cover - depends on the environment
    import numba as _numba
except ImportError:  # pragma: no cover
    _numba = None

ENABLED = (_numba is not None) and not DISABLED

if ENABLED and _numba.config.THREADING_LAYER == "default":  # pragma: no cover
    # skip the TBB probe (old system TBB versions only produce warnings)
    try:
        import numba.np.ufunc.omppool  # noqa: F401
        _numba.config.THREADING_LAYER = "omp"
    except ImportError:
        _numba.config.THREADING_LAYER = "workqueue"


def njit(*args, **kwargs):
    """``numba.njit`` when enabled, otherwise a no-op decorator."""
    if ENABLED:
        return _numba.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda f: f


if ENABLED:
    prange = _numba.prange
else:
    prange = range


def set_threads(n: int | None) -> None:
    """Limit the number of worker threads used by parallel kernels."""
    if n is None or not ENABLED:
        return
    n = max(1, min(int(n), _numba.config.NUMBA_NUM_THREADS))
    _numba.set_num_threads(n)


def backend_name() -> str:
    return "numba" if ENABLED else "numpy"
