"""Numba switch.

Set ``SONGREASON_DISABLE_NUMBA=1`` to run every kernel through its numpy
fallback. The flag is read once, at import time.
"""

import os

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

NUMBA_DISABLED = os.environ.get("SONGREASON_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes"}
USE_NUMBA = numba is not None and not NUMBA_DISABLED


def jit(func):
    """Compile ``func`` with ``numba.njit(cache=True)``; raises if numba is missing."""
    if numba is None:
        raise RuntimeError("numba is not installed")
    return numba.njit(cache=True)(func)


def select(loop_impl, numpy_impl):
    """Pick the compiled loop kernel or the numpy fallback per the env flag."""
    if USE_NUMBA:
        return jit(loop_impl)
    return numpy_impl
