"""Switch between numba-compiled kernels and their pure-numpy twins.

Set ``CANNYEDIT_PURE_NUMPY=1`` before import to force the numpy path (also
used automatically when numba cannot be imported).
"""
from __future__ import annotations

import os

_FORCE_NUMPY = os.environ.get("CANNYEDIT_PURE_NUMPY", "").strip().lower() in {"1", "true", "yes"}

try:
    import numba as _numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    _numba = None

USE_NUMBA = _numba is not None and not _FORCE_NUMPY


def njit(fn):
    """``numba.njit(cache=True)`` when available, identity otherwise."""
    if _numba is None:
        return fn
    return _numba.njit(cache=True)(fn)


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
