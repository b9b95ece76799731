"""Backend switch for the hot kernels.

Set ``SPLITCOMP_DISABLE_NUMBA=1`` before import to run every kernel through
its pure-numpy path. :func:`set_backend` flips the switch at runtime, which
is what the benchmark and the parity tests use.
"""

from __future__ import annotations

import os

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

_ENV_FLAG = "SPLITCOMP_DISABLE_NUMBA"

_use_numba = HAVE_NUMBA and os.environ.get(_ENV_FLAG, "").strip().lower() not in (
    "1",
    "true",
    "yes",
    "on",
)


def njit(*args, **kwargs):
    """``numba.njit`` with ``cache=True`` that degrades to identity without numba."""
    kwargs.setdefault("cache", True)
    if not HAVE_NUMBA:
        if args and callable(args[0]):
            return args[0]
        return lambda fn: fn
    return numba.njit(*args, **kwargs)


def use_numba() -> bool:
    return _use_numba


def backend() -> str:
    return "numba" if _use_numba else "numpy"


def set_backend(name: str) -> None:
    """Select ``"numba"`` or ``"numpy"`` for all subsequent kernel calls."""
    global _use_numba
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not importable in this environment")
    _use_numba = name == "numba"
