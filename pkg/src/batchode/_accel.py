"""Numba toggle.

Set ``BATCHODE_DISABLE_NUMBA=1`` before import to run every kernel through
its pure-numpy twin instead of the compiled loop version.
"""
import os

try:
    import numba
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dependency in CI
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("BATCHODE_DISABLE_NUMBA", "0") not in ("1", "true", "yes")


def njit(fn):
    """Compile ``fn`` when numba is usable, else return it untouched."""
    if HAVE_NUMBA:
        return numba.njit(cache=True, nogil=True)(fn)
    return fn


def select(compiled, fallback):
    return compiled if USE_NUMBA else fallback


def backend_name():
    return "numba" if USE_NUMBA else "numpy"
