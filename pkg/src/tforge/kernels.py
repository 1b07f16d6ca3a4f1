"""Selects the compiled dithering kernel when available, else the numpy one.

Set ``TF_PURE_PYTHON=1`` to force the fallback.
"""
import os

import numpy as np

from . import _dither_py

BACKEND = "python"
_impl = _dither_py.floyd_steinberg

if os.environ.get("TF_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _dither

        _impl = _dither.floyd_steinberg
        BACKEND = "cython"
    except ImportError:
        pass


def floyd_steinberg(planes: np.ndarray, levels: int, backend: str | None = None) -> np.ndarray:
    """Dither a copy of ``planes`` (P, H, W) to ``levels`` values per channel."""
    work = np.ascontiguousarray(planes, dtype=np.float64).copy()
    if backend is None:
        fn = _impl
    elif backend == "python":
        fn = _dither_py.floyd_steinberg
    elif backend == "cython":
        from . import _dither

        fn = _dither.floyd_steinberg
    else:
        raise ValueError(f"unknown backend {backend!r}")
    return fn(work, int(levels))
