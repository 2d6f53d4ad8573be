"""Numba acceleration switch.

Kernels in :mod:`patchforge.kernels` come in two flavours: a loop kernel
compiled with ``numba.njit`` and a vectorised pure-numpy twin. Which one
backs the public name is decided here, once, at import time:

* ``PATCHFORGE_DISABLE_NUMBA=1`` (or numba missing) selects the numpy path;
* anything else selects the JIT path.

Both paths consume any randomness as pre-drawn arrays, so they produce
bit-identical results and can be benchmarked against each other
(``patchforge bench-kernels``).
"""

import os


def _env_disabled() -> bool:
    return os.environ.get("PATCHFORGE_DISABLE_NUMBA", "0") not in ("", "0")


try:
    if _env_disabled():
        raise ImportError("numba disabled by PATCHFORGE_DISABLE_NUMBA")
    from numba import njit  # noqa: F401

    JIT_ENABLED = True
except ImportError:
    JIT_ENABLED = False

    def njit(*args, **kwargs):
        """Identity stand-in for ``numba.njit`` when JIT is off."""
        if args and callable(args[0]):
            return args[0]

        def wrap(func):
            return func

        return wrap
