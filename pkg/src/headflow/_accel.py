"""numba switch.

Set ``HEADFLOW_DISABLE_NUMBA=1`` to force the pure-numpy kernels. The flag is
read once at import time.
"""
import importlib.util
import os

_flag = os.environ.get("HEADFLOW_DISABLE_NUMBA", "").strip().lower()
DISABLED = _flag not in ("", "0", "false", "no")

HAVE_NUMBA = importlib.util.find_spec("numba") is not None

USE_NUMBA = HAVE_NUMBA and not DISABLED

numba_opts = {
    "nopython": True,
    "nogil": True,
    "cache": True,
    "fastmath": False,
    "boundscheck": False,
    "error_model": "numpy",
}


def njit(fn):
    """Compile ``fn`` with numba when available, else return it untouched."""
    if not HAVE_NUMBA:
        return fn
    import numba

    return numba.jit(**numba_opts)(fn)
