"""Numba switch.

Set ``METRIC_OOD_NUMBA=0`` to force the pure-numpy kernels. When numba is
missing the numpy path is used silently.
"""

import os

_flag = os.environ.get("METRIC_OOD_NUMBA", "1").strip().lower()
_wanted = _flag not in ("0", "false", "no", "off")

try:
    if not _wanted:
        raise ImportError
    from numba import njit as _njit
except ImportError:
    _njit = None

USE_NUMBA = _njit is not None


def njit(*args, **kwargs):
    """``numba.njit(cache=True)`` or an identity decorator."""
    if _njit is None:
        if args and callable(args[0]):
            return args[0]
        return lambda f: f
    kwargs.setdefault("cache", True)
    return _njit(*args, **kwargs)
