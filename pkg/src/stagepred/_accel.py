"""Backend selection for the hot numeric kernels.

Set ``STAGEPRED_NUMPY=1`` (or uninstall numba) to force the pure-numpy path.
"""
import os

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

_FORCE_NUMPY = os.environ.get("STAGEPRED_NUMPY", "").strip().lower() in ("1", "true", "yes")

USE_NUMBA = numba is not None and not _FORCE_NUMPY


if numba is not None:
    njit = numba.njit(cache=True, nogil=True)
else:  # pragma: no cover
    def njit(fn):
        return fn


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"
