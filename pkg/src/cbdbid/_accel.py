"""Numba switch shared by the hot kernels.

Set ``CBDBID_DISABLE_NUMBA=1`` to force the pure-numpy code paths. Both paths
must return bit-identical results; the kernels module tests that.
"""
import os

DISABLE_ENV = "CBDBID_DISABLE_NUMBA"


def _numba_wanted():
    return os.environ.get(DISABLE_ENV, "").strip().lower() not in {"1", "true", "yes", "on"}


try:
    import numba as _nb
except ImportError:  # pragma: no cover - numba is a hard dependency, but stay importable
    _nb = None

HAVE_NUMBA = _nb is not None
USE_NUMBA = HAVE_NUMBA and _numba_wanted()


def njit(fn):
    """``numba.njit(cache=True)`` when numba is usable, identity otherwise."""
    if _nb is None:
        return fn
    return _nb.njit(cache=True, nogil=True)(fn)
