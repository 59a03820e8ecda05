"""Backend selection for the convolution kernels.

The compiled extension is preferred; set ``DFCNET_PURE_PYTHON=1`` to force
the numpy fallback.
"""
import os

from . import _kernels_py

if os.environ.get("DFCNET_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl
        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "python"

im2col = _impl.im2col
col2im = _impl.col2im
