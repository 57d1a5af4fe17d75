"""Select the kernel backend.

Hot loops are compiled with numba when it is importable. Setting
``VITLAB_DISABLE_NUMBA=1`` forces the pure-numpy path, which is also used
automatically when numba is missing.
"""
import os
import warnings

_DISABLED = os.environ.get("VITLAB_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes")

try:
    if _DISABLED:
        raise ImportError("disabled by VITLAB_DISABLE_NUMBA")
    from numba import njit

    HAVE_NUMBA = True
except ImportError as exc:
    if not _DISABLED:
        warnings.warn(f"numba unavailable ({exc}); using numpy kernels")
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda f: f


def backend_name() -> str:
    return "numba" if HAVE_NUMBA else "numpy"
