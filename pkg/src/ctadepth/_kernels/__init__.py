"""Hot-loop kernel backend selection.

The compiled Cython extension is preferred; the pure-numpy fallback is used
when the extension is missing or when CTADEPTH_PURE_PYTHON=1 is set. Both
backends produce bitwise-identical forward results at f64.
"""

import os

from . import _kernels_py

if os.environ.get("CTADEPTH_PURE_PYTHON") == "1":
    _impl = _kernels_py
else:
    try:
        from . import _kernels_cy as _impl
    except ImportError:
        _impl = _kernels_py

from . import _blas

BACKEND = _impl.BACKEND

# inputs up to this spatial extent take the fixed-accumulation-order loop
# kernel (bitwise-reproducible against a naive reference); larger ones go
# through im2col + BLAS
_SMALL_CONV_LIMIT = 8


def conv2d_forward(x, w, stride, pad):
    if max(x.shape[1], x.shape[2]) <= _SMALL_CONV_LIMIT:
        return _impl.conv2d_forward(x, w, stride, pad)
    return _blas.conv2d_forward(x, w, stride, pad)


def conv2d_backward(x, w, stride, pad, gout):
    if max(x.shape[1], x.shape[2]) <= _SMALL_CONV_LIMIT:
        return _impl.conv2d_backward(x, w, stride, pad, gout)
    return _blas.conv2d_backward(x, w, stride, pad, gout)


bilinear_forward = _impl.bilinear_forward
bilinear_backward = _impl.bilinear_backward
