"""Backend selection for the hot kernels.

Set ``COSAL_DISABLE_NUMBA=1`` to force the pure-numpy path. The numba path is
used when numba imports cleanly and the flag is unset.
"""
import os

_FLAG = os.environ.get("COSAL_DISABLE_NUMBA", "").strip().lower()

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba ships with the package deps
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and _FLAG not in ("1", "true", "yes", "on")
BACKEND = "numba" if USE_NUMBA else "numpy"


def njit(fn):
    """``numba.njit(cache=True)`` when numba is importable, identity otherwise.

    The compiled function is always built (if possible) so benchmarks can
    compare both paths regardless of ``USE_NUMBA``.
    """
    if not HAVE_NUMBA:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)
