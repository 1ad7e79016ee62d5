"""Numba switch.

Set ``FRACSED_DISABLE_NUMBA=1`` to run every kernel through its pure-numpy
twin. Both paths are always importable so they can be benchmarked and
cross-checked against each other.
"""
import os

_FLAG = os.environ.get("FRACSED_DISABLE_NUMBA", "").strip().lower()

try:
    import numba
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and _FLAG not in ("1", "true", "yes", "on")


def njit(func=None, **kwargs):
    """``numba.njit`` when numba is importable, identity otherwise."""
    kwargs.setdefault("cache", True)
    if not HAVE_NUMBA:
        if func is not None:
            return func
        return lambda f: f
    if func is not None:
        return numba.njit(**kwargs)(func)
    return numba.njit(**kwargs)
