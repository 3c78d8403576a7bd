"""Numba acceleration plumbing.

Hot kernels are written twice: an ``@njit`` version and a pure-numpy
fallback. Which one runs is decided once at import time: numba is used
when it is importable and the ``VICT_PURE_NUMPY`` environment variable
is not set to a truthy value. Both paths are importable directly so the
benchmark (and tests) can compare them in one process.
"""

import os

_TRUTHY = {"1", "true", "yes", "on"}


def _forced_pure_numpy() -> bool:
    return os.environ.get("VICT_PURE_NUMPY", "").strip().lower() in _TRUTHY


try:
    import numba as _numba

    HAVE_NUMBA = True
except ImportError:
    _numba = None
    HAVE_NUMBA = False

NUMBA_ENABLED = HAVE_NUMBA and not _forced_pure_numpy()


def njit(*args, **kwargs):
    """``numba.njit`` when acceleration is active, identity otherwise."""
    if NUMBA_ENABLED:
        return _numba.njit(*args, **kwargs)
    if args and callable(args[0]) and not kwargs:
        return args[0]

    def decorate(func):
        return func

    return decorate


def set_num_threads(n: int) -> None:
    """Pin the numba threading layer; no-op on the numpy fallback.

    Clamped to the pool numba launched with, so asking for more threads
    than the machine has is not an error.
    """
    if NUMBA_ENABLED and n > 0:
        _numba.set_num_threads(min(n, _numba.config.NUMBA_NUM_THREADS))


def active_backend() -> str:
    return "numba" if NUMBA_ENABLED else "numpy"
