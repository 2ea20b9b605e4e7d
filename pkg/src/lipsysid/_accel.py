"""Numba switch.

Set ``LIPSYSID_DISABLE_NUMBA=1`` to run every kernel on its pure-numpy /
interpreted path. The flag is read once at import time.
"""
import os

_FLAG = "LIPSYSID_DISABLE_NUMBA"

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

NUMBA_ENABLED = numba is not None and os.environ.get(_FLAG, "").strip().lower() not in (
    "1",
    "true",
    "yes",
)


def njit(*args, **kwargs):
    """``numba.njit`` when enabled, identity otherwise."""
    kwargs.setdefault("cache", True)

    def wrap(fn):
        if NUMBA_ENABLED:
            return numba.njit(**kwargs)(fn)
        return fn

    if len(args) == 1 and callable(args[0]):
        return wrap(args[0])
    return wrap
