"""Hot topology kernels: compiled extension when built, pure Python otherwise.

Set ``TPKD_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _pure

pure = _pure

if os.environ.get("TPKD_PURE_PYTHON", "") not in ("", "0"):
    _impl = _pure
    BACKEND = "python"
else:
    try:
        from . import _fast as _impl
        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pure
        BACKEND = "python"

sublevel_pairs = _impl.sublevel_pairs
rasterize = _impl.rasterize

__all__ = ["BACKEND", "pure", "sublevel_pairs", "rasterize"]
