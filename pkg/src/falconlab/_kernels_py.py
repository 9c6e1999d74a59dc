"""Pure numpy implementations of the hot kernels.

These mirror ``_ckernels.pyx`` operation for operation so that both backends
produce the same floating point results; the compiled module is preferred at
import time when it is available (see ``falconlab.kernels``).
"""

import numpy as np


def im2col(x, kh, kw, stride, pad):
    """Unfold ``x`` of shape (b, c, h, w) into rows of receptive fields.

    Returns an array of shape (b * oh * ow, c * kh * kw) whose column order is
    (channel, kernel row, kernel col).
    """
    b, c, h, w = x.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((b, c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        i_end = i + stride * oh
        for j in range(kw):
            j_end = j + stride * ow
            cols[:, :, i, j, :, :] = xp[:, :, i:i_end:stride, j:j_end:stride]
    return cols.transpose(0, 4, 5, 1, 2, 3).reshape(b * oh * ow, c * kh * kw)


def col2im(cols, x_shape, kh, kw, stride, pad):
    """Adjoint of :func:`im2col`: scatter-add receptive-field rows back."""
    b, c, h, w = x_shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    cols = cols.reshape(b, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    xp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        i_end = i + stride * oh
        for j in range(kw):
            j_end = j + stride * ow
            xp[:, :, i:i_end:stride, j:j_end:stride] += cols[:, :, i, j, :, :]
    if pad:
        return np.ascontiguousarray(xp[:, :, pad:-pad, pad:-pad])
    return xp


def maxpool_forward(x, size):
    """Non-overlapping max pooling over (b, c, h, w); trailing rows/cols are dropped.

    Returns ``(out, argmax)`` where ``argmax`` holds the flat index of the
    winning element inside each ``size x size`` window (first maximum wins).
    """
    b, c, h, w = x.shape
    oh, ow = h // size, w // size
    win = x[:, :, : oh * size, : ow * size].reshape(b, c, oh, size, ow, size)
    win = win.transpose(0, 1, 2, 4, 3, 5).reshape(b, c, oh, ow, size * size)
    argmax = np.argmax(win, axis=-1).astype(np.int64)
    out = np.take_along_axis(win, argmax[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), argmax


def maxpool_backward(grad_out, argmax, x_shape, size):
    b, c, h, w = x_shape
    oh, ow = grad_out.shape[2], grad_out.shape[3]
    win = np.zeros((b, c, oh, ow, size * size), dtype=grad_out.dtype)
    np.put_along_axis(win, argmax[..., None], grad_out[..., None], axis=-1)
    win = win.reshape(b, c, oh, ow, size, size).transpose(0, 1, 2, 4, 3, 5)
    dx = np.zeros(x_shape, dtype=grad_out.dtype)
    dx[:, :, : oh * size, : ow * size] = win.reshape(b, c, oh * size, ow * size)
    return dx


def warp_bilinear(images, matrix):
    """Inverse-map each output pixel through ``matrix`` and sample bilinearly.

    ``images`` has shape (n, h, w). ``matrix`` is a 2x3 affine map taking
    output coordinates ``(col, row, 1)`` to source coordinates ``(col, row)``.
    Samples that fall outside the frame read as 0.
    """
    n, h, w = images.shape
    rows, cols = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    sx = matrix[0, 0] * cols + matrix[0, 1] * rows + matrix[0, 2]
    sy = matrix[1, 0] * cols + matrix[1, 1] * rows + matrix[1, 2]
    x0f = np.floor(sx)
    y0f = np.floor(sy)
    fx = sx - x0f
    fy = sy - y0f
    x0 = x0f.astype(np.int64)
    y0 = y0f.astype(np.int64)
    x1 = x0 + 1
    y1 = y0 + 1

    def tap(yy, xx):
        ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        vals = images[:, np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)]
        return np.where(ok, vals, 0.0)

    v00 = tap(y0, x0)
    v01 = tap(y0, x1)
    v10 = tap(y1, x0)
    v11 = tap(y1, x1)
    out = (1.0 - fx) * (1.0 - fy) * v00
    out = out + fx * (1.0 - fy) * v01
    out = out + (1.0 - fx) * fy * v10
    out = out + fx * fy * v11
    return out.astype(images.dtype, copy=False)
