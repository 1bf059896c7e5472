"""Backend selection for the compiled kernels.

Set ``OMAR_NUMBA=0`` in the environment to run every hot kernel through its
pure-numpy path instead of the numba-compiled one. The choice is made once,
at import time.
"""

import os

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("OMAR_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")


def njit(fn):
    """Compile ``fn`` with numba when available; otherwise return it unchanged."""
    if not HAVE_NUMBA:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)


def backend_name():
    return "numba" if USE_NUMBA else "numpy"


def set_threads(n):
    if HAVE_NUMBA and n and n > 0:
        numba.set_num_threads(min(int(n), numba.config.NUMBA_NUM_THREADS))


def jitable(fn):
    """Mark a helper as callable both from Python and from compiled kernels."""
    if not HAVE_NUMBA:
        return fn
    from numba.extending import register_jitable

    return register_jitable(fn)
