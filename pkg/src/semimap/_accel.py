"""Numba availability switch.

Hot kernels are written once as plain Python loops and compiled with
``numba.njit`` when numba imports and ``SEMIMAP_DISABLE_NUMBA`` is unset.
Every compiled kernel has a vectorised numpy twin in :mod:`semimap.kernels`;
the flag picks which one the public wrappers dispatch to.
"""
from __future__ import annotations

import os

_FLAG = "SEMIMAP_DISABLE_NUMBA"


def _env_disabled() -> bool:
    return os.environ.get(_FLAG, "").strip().lower() in {"1", "true", "yes", "on"}


try:
    if _env_disabled():
        raise ImportError("numba disabled via " + _FLAG)
    import numba as _nb

    HAS_NUMBA = True
except ImportError:
    _nb = None
    HAS_NUMBA = False


def njit(func):
    """Compile ``func`` in nopython mode, or return it unchanged."""
    if HAS_NUMBA:
        return _nb.njit(cache=True, fastmath=False)(func)
    return func


_use_numba = HAS_NUMBA


def use_numba() -> bool:
    return _use_numba


def set_use_numba(flag: bool) -> bool:
    """Toggle kernel dispatch at runtime; returns the previous setting.

    Turning numba on is a no-op when it is unavailable.
    """
    global _use_numba
    prev = _use_numba
    _use_numba = bool(flag) and HAS_NUMBA
    return prev
