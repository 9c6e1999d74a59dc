"""Backend selection for the hot kernels.

The compiled extension is used when it was built and ``FALCONLAB_PURE_PYTHON``
is unset; otherwise the numpy implementations are used. ``BACKEND`` records
which one was picked.
"""

import os

import numpy as np

from . import _kernels_py

_impl = _kernels_py
BACKEND = "python"

if not os.environ.get("FALCONLAB_PURE_PYTHON"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py


def _c(a):
    return np.ascontiguousarray(a)


def im2col(x, kh, kw, stride=1, pad=0):
    return _impl.im2col(_c(x), kh, kw, stride, pad)


def col2im(cols, x_shape, kh, kw, stride=1, pad=0):
    return _impl.col2im(_c(cols), tuple(x_shape), kh, kw, stride, pad)


def maxpool_forward(x, size):
    return _impl.maxpool_forward(_c(x), size)


def maxpool_backward(grad_out, argmax, x_shape, size):
    return _impl.maxpool_backward(_c(grad_out), _c(argmax), tuple(x_shape), size)


def warp_bilinear(images, matrix):
    return _impl.warp_bilinear(_c(images), np.ascontiguousarray(matrix, dtype=np.float64))
