"""Kernel backend selection.

The compiled extension is used when it was built; otherwise the numpy
fallback is loaded. Set ``EGOFORECAST_KERNELS=python`` to force the fallback.
"""
import functools
import os

import numpy as np

from . import _pykernels

BACKEND = "python"
if os.environ.get("EGOFORECAST_KERNELS", "").lower() not in ("python", "py", "numpy"):
    try:
        from . import _ckernels as _impl
        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels
else:
    _impl = _pykernels



def _contiguous(fn):
    # the extension takes C-ordered float64 buffers only
    @functools.wraps(fn)
    def wrapper(*args):
        return fn(*[np.ascontiguousarray(a, dtype=np.float64) if isinstance(a, np.ndarray) else a
                    for a in args])
    return wrapper


_wrap = _contiguous if _impl is not _pykernels else (lambda fn: fn)
conv1d_forward = _wrap(_impl.conv1d_forward)
conv1d_backward = _wrap(_impl.conv1d_backward)
conv1d_weight_grad = _wrap(_impl.conv1d_weight_grad)
conv1d_input_grad = _wrap(_impl.conv1d_input_grad)
batchnorm_forward = _wrap(_impl.batchnorm_forward)
batchnorm_backward = _wrap(_impl.batchnorm_backward)

__all__ = [
    "BACKEND",
    "conv1d_forward",
    "conv1d_backward",
    "conv1d_weight_grad",
    "conv1d_input_grad",
    "batchnorm_forward",
    "batchnorm_backward",
]
