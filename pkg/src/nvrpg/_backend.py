"""Kernel backend selection.

Set ``NVRPG_BACKEND=numpy`` to force the vectorized numpy kernels even when
numba is importable.  The choice can also be flipped at runtime with
:func:`set_backend`, which is what the parity tests and the benchmark do.
"""

import os

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

HAVE_NUMBA = numba is not None

_active = "numpy"


def njit(fn):
    if HAVE_NUMBA:
        return numba.njit(cache=True, nogil=True)(fn)
    return fn


def set_backend(name: str) -> None:
    global _active
    name = name.lower()
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}; expected 'numba' or 'numpy'")
    if name == "numba" and not HAVE_NUMBA:
        raise ValueError("numba backend requested but numba is not installed")
    _active = name


def get_backend() -> str:
    return _active


def _initial() -> str:
    requested = os.environ.get("NVRPG_BACKEND", "numba").strip().lower()
    if requested == "numpy" or not HAVE_NUMBA:
        return "numpy"
    if requested != "numba":
        raise ValueError(f"NVRPG_BACKEND must be 'numba' or 'numpy', got {requested!r}")
    return "numba"


_active = _initial()
