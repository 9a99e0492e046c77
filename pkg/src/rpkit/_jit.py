"""Numba switch.

Hot kernels are written twice: once as a plain loop compiled with ``numba.njit``
and once as vectorised numpy. ``RPKIT_DISABLE_NUMBA=1`` (or a missing numba
install) selects the numpy path everywhere.
"""
import os

_FLAG = os.environ.get("RPKIT_DISABLE_NUMBA", "").strip().lower()

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and _FLAG not in ("1", "true", "yes", "on")


def njit(*args, **kwargs):
    """``numba.njit`` when numba is usable, identity decorator otherwise."""
    if not HAVE_NUMBA:
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda f: f
    kwargs.setdefault("cache", False)
    return numba.njit(*args, **kwargs)
