"""Backend selection for the hot kernels.

Every kernel in :mod:`voxcrf.kernels` has a numba implementation and a
vectorised numpy implementation.  The numba path is used when numba is
importable and ``VOXCRF_DISABLE_NUMBA`` is unset (or ``0``).
"""
import os

_flag = os.environ.get("VOXCRF_DISABLE_NUMBA", "0").strip().lower()
_disabled = _flag not in ("", "0", "false", "no", "off")

try:
    import numba

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    NUMBA_AVAILABLE = False

USE_NUMBA = NUMBA_AVAILABLE and not _disabled


def njit(*args, **kwargs):
    """``numba.njit`` when numba is importable, identity otherwise.

    Compilation is lazy, so decorating is cheap even when the numpy path is
    active.
    """
    if NUMBA_AVAILABLE:
        kwargs.setdefault("cache", True)
        return numba.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda fn: fn


def backend_name():
    return "numba" if USE_NUMBA else "numpy"
