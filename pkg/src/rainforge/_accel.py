"""Optional numba acceleration.

Set ``RAINFORGE_NO_NUMBA=1`` before import to force the pure-numpy kernels.
``set_enabled`` flips the dispatch at runtime (used by tests and the benchmark).
"""
import os

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is an optional speedup
    numba = None
    HAVE_NUMBA = False

_env_off = os.environ.get("RAINFORGE_NO_NUMBA", "").strip().lower() in ("1", "true", "yes", "on")
_enabled = HAVE_NUMBA and not _env_off


def optional_njit(*args, **kwargs):
    """``numba.njit`` when numba is importable, identity otherwise."""

    def decorator(func):
        if HAVE_NUMBA:
            return numba.njit(*args, **kwargs)(func)
        return func

    return decorator


def enabled():
    return _enabled


def set_enabled(flag):
    """Route kernels through numba (True) or numpy (False). Returns the previous value."""
    global _enabled
    prev = _enabled
    _enabled = bool(flag) and HAVE_NUMBA
    return prev
