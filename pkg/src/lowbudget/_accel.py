"""Optional numba acceleration.

Set ``LOWBUDGET_NUMBA=0`` to force the pure-numpy kernels. The flag is read
once at import time.
"""

import os

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False


def _flag_enabled(value):
    return value.strip().lower() not in ("0", "false", "no", "off")


USE_NUMBA = HAVE_NUMBA and _flag_enabled(os.environ.get("LOWBUDGET_NUMBA", "1"))


def njit(func):
    """``numba.njit(cache=True)`` when numba is importable, else the plain function."""
    if not HAVE_NUMBA:
        return func
    return numba.njit(cache=True)(func)
