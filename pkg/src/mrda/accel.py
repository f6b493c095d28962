"""Backend switch for the numeric hot loops.

Kernels in this package are written twice: a numba ``@njit`` version and a
pure-numpy version.  Which one runs is decided by ``MRDA_DISABLE_JIT``
(``1``/``true`` selects numpy) at import time and can be flipped at runtime
with :func:`enable_jit` / :func:`disable_jit`, which is what the benchmark
script does.
"""

import os

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

_ENV_FLAG = "MRDA_DISABLE_JIT"

ENABLE_JIT = HAVE_NUMBA and os.environ.get(_ENV_FLAG, "").lower() not in ("1", "true", "yes")


def njit(*args, **kwargs):
    """``numba.njit`` when numba is importable, identity decorator otherwise."""
    if HAVE_NUMBA:
        return numba.njit(*args, **kwargs)
    if args and callable(args[0]):
        return args[0]
    return lambda fn: fn


def enable_jit():
    """Route dispatching kernels to their numba versions."""
    global ENABLE_JIT
    if not HAVE_NUMBA:
        raise RuntimeError("numba is not installed")
    ENABLE_JIT = True


def disable_jit():
    """Route dispatching kernels to their pure-numpy versions."""
    global ENABLE_JIT
    ENABLE_JIT = False


def jit_enabled():
    return ENABLE_JIT
