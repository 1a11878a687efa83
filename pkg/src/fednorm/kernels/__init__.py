"""Convolution kernel backend selection.

The compiled extension is preferred when it imports cleanly; the NumPy
im2col implementation is the fallback. Set FEDNORM_BACKEND=numpy or
FEDNORM_BACKEND=compiled to force a choice (forcing "compiled" when the
extension is missing raises at import).
"""

import os

from . import conv_numpy
from .conv_numpy import conv2d_forward_naive

_requested = os.environ.get("FEDNORM_BACKEND", "").strip().lower()

if _requested not in ("", "numpy", "compiled"):
    raise ImportError(f"FEDNORM_BACKEND must be 'numpy' or 'compiled', got {_requested!r}")

if _requested == "numpy":
    _impl = conv_numpy
    BACKEND = "numpy"
else:
    try:
        from . import _convcore as _impl
        BACKEND = "compiled"
    except ImportError:
        if _requested == "compiled":
            raise
        _impl = conv_numpy
        BACKEND = "numpy"

conv2d_forward = _impl.conv2d_forward
conv2d_backward_input = _impl.conv2d_backward_input
conv2d_backward_kernel = _impl.conv2d_backward_kernel

__all__ = [
    "BACKEND",
    "conv2d_forward",
    "conv2d_backward_input",
    "conv2d_backward_kernel",
    "conv2d_forward_naive",
    "conv_numpy",
]
