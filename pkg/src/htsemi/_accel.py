"""Optional numba acceleration.

Set ``HTSEMI_NO_NUMBA=1`` to force the pure-numpy code paths.
"""
import os

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

USE_NUMBA = numba is not None and os.environ.get("HTSEMI_NO_NUMBA", "").lower() not in (
    "1",
    "true",
    "yes",
)


def optional_njit(*args, **kwargs):
    """Compile with ``numba.njit`` when enabled, otherwise return the function untouched."""

    def decorator(func):
        if USE_NUMBA:
            return numba.njit(*args, **kwargs)(func)
        return func

    return decorator


if USE_NUMBA:
    prange = numba.prange
else:
    prange = range


def set_threads(n: int) -> None:
    """Set the numba worker count; a no-op on the numpy path."""
    if USE_NUMBA and n is not None and n > 0:
        numba.set_num_threads(min(int(n), numba.config.NUMBA_NUM_THREADS))
