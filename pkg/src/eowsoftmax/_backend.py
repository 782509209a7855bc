"""Numba availability and the env switch that forces the numpy fallback.

Set ``EOWSOFTMAX_DISABLE_NUMBA=1`` to run every kernel through its pure-numpy
twin. The flag is read at import time; :func:`set_backend` overrides it at
runtime (used by tests and the benchmark).
"""

import os

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

_disabled = os.environ.get("EOWSOFTMAX_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}
_active = "numpy" if (numba is None or _disabled) else "numba"


def njit(fn):
    if numba is None:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)


def active() -> str:
    return _active


def set_backend(name: str) -> str:
    """Select ``"numba"`` or ``"numpy"``; returns the previous backend."""
    global _active
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and numba is None:
        raise RuntimeError("numba is not installed")
    prev, _active = _active, name
    return prev


def resolve(backend=None) -> str:
    if backend is None:
        return _active
    if backend not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {backend!r}")
    return backend
