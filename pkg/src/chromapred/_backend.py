"""Kernel backend selection.

Set ``CHROMAPRED_BACKEND=numpy`` to force the pure-numpy kernels, or
``CHROMAPRED_BACKEND=numba`` to require numba. Unset means numba when it
imports, numpy otherwise. The choice is fixed at import time.
"""
from __future__ import annotations

import os

ENV_VAR = "CHROMAPRED_BACKEND"

try:
    import numba  # noqa: F401

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False


def requested_backend() -> str:
    value = os.environ.get(ENV_VAR, "").strip().lower()
    if value in ("", "auto"):
        return "numba" if HAS_NUMBA else "numpy"
    if value not in ("numba", "numpy"):
        raise ValueError(f"{ENV_VAR} must be 'numba' or 'numpy', got {value!r}")
    if value == "numba" and not HAS_NUMBA:
        raise ImportError(f"{ENV_VAR}=numba but numba is not installed")
    return value


BACKEND = requested_backend()
