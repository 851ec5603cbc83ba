"""Optional numba acceleration.

Kernels in :mod:`mdgnn.kernels` come in two flavours: a loop-based
version compiled with ``numba.njit`` and a vectorised numpy version.
Setting ``MDGNN_DISABLE_NUMBA=1`` (or running without numba installed)
selects the numpy path everywhere.
"""

import os

_FALSY = {"", "0", "false", "no", "off"}


def _env_disabled() -> bool:
    return os.environ.get("MDGNN_DISABLE_NUMBA", "").strip().lower() not in _FALSY


try:  # pragma: no cover - import guard
    import numba as _numba
except ImportError:  # pragma: no cover
    _numba = None

HAVE_NUMBA = _numba is not None
USE_NUMBA = HAVE_NUMBA and not _env_disabled()


def njit(*args, **kwargs):
    """``numba.njit`` with caching on, or a no-op decorator without numba."""
    if not HAVE_NUMBA:
        if len(args) == 1 and callable(args[0]):
            return args[0]
        return lambda fn: fn
    kwargs.setdefault("cache", True)
    kwargs.setdefault("error_model", "numpy")
    return _numba.njit(*args, **kwargs)
