# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the kernels in ``_kernels_py``.

Arithmetic is ordered exactly as in the numpy fallback so that both backends
agree bit for bit on float64 inputs.
"""

import numpy as np
cimport numpy as cnp
from cython cimport floating
from libc.math cimport floor

cnp.import_array()


def im2col(floating[:, :, :, ::1] x, Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride, Py_ssize_t pad):
    cdef Py_ssize_t b = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - kw) // stride + 1
    dtype = np.float64 if floating is double else np.float32
    out = np.empty((b * oh * ow, c * kh * kw), dtype=dtype)
    cdef floating[:, ::1] cols = out
    cdef Py_ssize_t n, ci, i, j, oy, ox, iy, ix, row, col
    with nogil:
        for n in range(b):
            for oy in range(oh):
                for ox in range(ow):
                    row = (n * oh + oy) * ow + ox
                    col = 0
                    for ci in range(c):
                        for i in range(kh):
                            iy = oy * stride + i - pad
                            for j in range(kw):
                                ix = ox * stride + j - pad
                                if 0 <= iy < h and 0 <= ix < w:
                                    cols[row, col] = x[n, ci, iy, ix]
                                else:
                                    cols[row, col] = 0
                                col += 1
    return out


def col2im(floating[:, ::1] cols, tuple x_shape, Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride, Py_ssize_t pad):
    cdef Py_ssize_t b = x_shape[0], c = x_shape[1], h = x_shape[2], w = x_shape[3]
    cdef Py_ssize_t oh = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - kw) // stride + 1
    dtype = np.float64 if floating is double else np.float32
    out = np.zeros((b, c, h, w), dtype=dtype)
    cdef floating[:, :, :, ::1] dx = out
    cdef Py_ssize_t n, ci, i, j, oy, ox, iy, ix, row, col
    # Same accumulation order as the numpy version: kernel offsets outermost.
    with nogil:
        for i in range(kh):
            for j in range(kw):
                for n in range(b):
                    for ci in range(c):
                        col = (ci * kh + i) * kw + j
                        for oy in range(oh):
                            iy = oy * stride + i - pad
                            if iy < 0 or iy >= h:
                                continue
                            for ox in range(ow):
                                ix = ox * stride + j - pad
                                if ix < 0 or ix >= w:
                                    continue
                                row = (n * oh + oy) * ow + ox
                                dx[n, ci, iy, ix] += cols[row, col]
    return out


def maxpool_forward(floating[:, :, :, ::1] x, Py_ssize_t size):
    cdef Py_ssize_t b = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = h // size, ow = w // size
    dtype = np.float64 if floating is double else np.float32
    out = np.empty((b, c, oh, ow), dtype=dtype)
    arg = np.empty((b, c, oh, ow), dtype=np.int64)
    cdef floating[:, :, :, ::1] o = out
    cdef cnp.int64_t[:, :, :, ::1] a = arg
    cdef Py_ssize_t n, ci, oy, ox, i, j, k, best_k
    cdef floating best, v
    with nogil:
        for n in range(b):
            for ci in range(c):
                for oy in range(oh):
                    for ox in range(ow):
                        best = x[n, ci, oy * size, ox * size]
                        best_k = 0
                        k = 0
                        for i in range(size):
                            for j in range(size):
                                v = x[n, ci, oy * size + i, ox * size + j]
                                if v > best:
                                    best = v
                                    best_k = k
                                k += 1
                        o[n, ci, oy, ox] = best
                        a[n, ci, oy, ox] = best_k
    return out, arg


def maxpool_backward(floating[:, :, :, ::1] grad_out, cnp.int64_t[:, :, :, ::1] argmax, tuple x_shape, Py_ssize_t size):
    cdef Py_ssize_t b = grad_out.shape[0], c = grad_out.shape[1]
    cdef Py_ssize_t oh = grad_out.shape[2], ow = grad_out.shape[3]
    dtype = np.float64 if floating is double else np.float32
    out = np.zeros(x_shape, dtype=dtype)
    cdef floating[:, :, :, ::1] dx = out
    cdef Py_ssize_t n, ci, oy, ox, k
    with nogil:
        for n in range(b):
            for ci in range(c):
                for oy in range(oh):
                    for ox in range(ow):
                        k = argmax[n, ci, oy, ox]
                        dx[n, ci, oy * size + k // size, ox * size + k % size] = grad_out[n, ci, oy, ox]
    return out


def warp_bilinear(floating[:, :, ::1] images, double[:, ::1] matrix):
    cdef Py_ssize_t n = images.shape[0], h = images.shape[1], w = images.shape[2]
    dtype = np.float64 if floating is double else np.float32
    result = np.empty((n, h, w), dtype=dtype)
    cdef floating[:, :, ::1] out = result
    cdef Py_ssize_t k, r, col, x0, y0, x1, y1
    cdef double sx, sy, fx, fy, x0f, y0f, v00, v01, v10, v11, acc
    with nogil:
        for r in range(h):
            for col in range(w):
                sx = matrix[0, 0] * <double>col + matrix[0, 1] * <double>r + matrix[0, 2]
                sy = matrix[1, 0] * <double>col + matrix[1, 1] * <double>r + matrix[1, 2]
                x0f = floor(sx)
                y0f = floor(sy)
                fx = sx - x0f
                fy = sy - y0f
                x0 = <Py_ssize_t>x0f
                y0 = <Py_ssize_t>y0f
                x1 = x0 + 1
                y1 = y0 + 1
                for k in range(n):
                    v00 = images[k, y0, x0] if (0 <= y0 < h and 0 <= x0 < w) else 0.0
                    v01 = images[k, y0, x1] if (0 <= y0 < h and 0 <= x1 < w) else 0.0
                    v10 = images[k, y1, x0] if (0 <= y1 < h and 0 <= x0 < w) else 0.0
                    v11 = images[k, y1, x1] if (0 <= y1 < h and 0 <= x1 < w) else 0.0
                    acc = (1.0 - fx) * (1.0 - fy) * v00
                    acc = acc + fx * (1.0 - fy) * v01
                    acc = acc + (1.0 - fx) * fy * v10
                    acc = acc + fx * fy * v11
                    out[k, r, col] = <floating>acc
    return result
