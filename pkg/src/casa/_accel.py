"""JIT switch for the hot loops.

Set ``CASA_DISABLE_NUMBA=1`` before import to route every kernel through its
pure-numpy implementation.  Numba being absent has the same effect.
"""
import os

_FLAG = os.environ.get("CASA_DISABLE_NUMBA", "").strip().lower()

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

NUMBA_AVAILABLE = numba is not None
USE_NUMBA = NUMBA_AVAILABLE and _FLAG not in ("1", "true", "yes", "on")


def njit(fn):
    """Compile ``fn`` in nopython mode when numba is available.

    The undecorated function is kept as ``fn.py_func`` either way, so tests
    can run the loop body interpreted.
    """
    if not NUMBA_AVAILABLE:
        fn.py_func = fn
        return fn
    return numba.njit(cache=True)(fn)


def backend_name():
    return "numba" if USE_NUMBA else "numpy"
