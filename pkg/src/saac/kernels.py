"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy
fallback is used. Setting ``SAAC_PURE_PYTHON=1`` forces the fallback.
"""
import os

from saac import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("SAAC_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from saac import _kernels as _compiled
    except ImportError:  # extension not built
        _compiled = None
    if _compiled is not None:
        _impl = _compiled
        BACKEND = "cython"

dense_forward = _impl.dense_forward
dense_backward = _impl.dense_backward
adam_update = _impl.adam_update
polyak = _impl.polyak
quantile_huber = _impl.quantile_huber

__all__ = [
    "BACKEND",
    "dense_forward",
    "dense_backward",
    "adam_update",
    "polyak",
    "quantile_huber",
]
