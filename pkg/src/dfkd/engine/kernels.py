"""Selects the conv kernel backend at import time.

The compiled module ``_ckernels`` is used when it was built; otherwise the
numpy implementation. Setting ``DFKD_PURE_PYTHON=1`` forces the fallback.
"""
import os

from . import _kernels_py

BACKEND = "python"
im2col = _kernels_py.im2col
col2im = _kernels_py.col2im

if os.environ.get("DFKD_PURE_PYTHON", "") in ("", "0"):
    try:
        from . import _ckernels
    except ImportError:
        pass
    else:
        BACKEND = "cython"
        im2col = _ckernels.im2col
        col2im = _ckernels.col2im
