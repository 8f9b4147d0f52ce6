"""Optional numba acceleration.

The hot per-cell kernels in :mod:`twopressure._kernels` come in two
flavours: an njit-compiled loop and a vectorized numpy fallback.  Which
one is used is decided once, at import time:

* ``TWOPRESSURE_NUMBA=0`` (or ``off``/``false``/``no``) forces the
  numpy fallback even when numba is installed.
* otherwise numba is used if it can be imported.

``njit`` below is either the real decorator or a pass-through, so the
kernel source can be written once and compiled conditionally.
"""

import os

_flag = os.environ.get("TWOPRESSURE_NUMBA", "auto").strip().lower()

if _flag in ("0", "off", "false", "no"):
    HAVE_NUMBA = False
else:
    try:
        import numba  # noqa: F401

        HAVE_NUMBA = True
    except ImportError:  # pragma: no cover - numba is a hard dep, but stay import-safe
        HAVE_NUMBA = False

if HAVE_NUMBA:
    from numba import njit
else:

    def njit(*args, **kwargs):
        # identity decorator, mirrors numba.njit's two call forms
        if args and callable(args[0]):
            return args[0]
        return lambda func: func


def backend():
    """Name of the active kernel backend, ``"numba"`` or ``"numpy"``."""
    return "numba" if HAVE_NUMBA else "numpy"
