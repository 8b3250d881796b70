# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels. Mirrors ``_pykernels`` exactly."""

import numpy as np
cimport cython
from cython cimport floating
from libc.math cimport INFINITY, M_PI


def im2col(floating[:, :, :, ::1] x, int k, int pad):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Ho = H + 2 * pad - k + 1, Wo = W + 2 * pad - k + 1
    dtype = np.float64 if floating is double else np.float32
    out_arr = np.empty((B * Ho * Wo, C * k * k), dtype=dtype)
    cdef floating[:, ::1] out = out_arr
    cdef Py_ssize_t b, c, i, j, oh, ow, row, col, ih, iw
    with nogil:
        for b in range(B):
            for oh in range(Ho):
                for ow in range(Wo):
                    row = (b * Ho + oh) * Wo + ow
                    col = 0
                    for c in range(C):
                        for i in range(k):
                            ih = oh + i - pad
                            for j in range(k):
                                iw = ow + j - pad
                                if 0 <= ih < H and 0 <= iw < W:
                                    out[row, col] = x[b, c, ih, iw]
                                else:
                                    out[row, col] = 0
                                col += 1
    return out_arr


def col2im(floating[:, ::1] cols, tuple x_shape, int k, int pad):
    cdef Py_ssize_t B = x_shape[0], C = x_shape[1], H = x_shape[2], W = x_shape[3]
    cdef Py_ssize_t Ho = H + 2 * pad - k + 1, Wo = W + 2 * pad - k + 1
    dtype = np.float64 if floating is double else np.float32
    out_arr = np.zeros((B, C, H, W), dtype=dtype)
    cdef floating[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, c, i, j, oh, ow, row, col, ih, iw
    with nogil:
        for b in range(B):
            for oh in range(Ho):
                for ow in range(Wo):
                    row = (b * Ho + oh) * Wo + ow
                    col = 0
                    for c in range(C):
                        for i in range(k):
                            ih = oh + i - pad
                            for j in range(k):
                                iw = ow + j - pad
                                if 0 <= ih < H and 0 <= iw < W:
                                    out[b, c, ih, iw] += cols[row, col]
                                col += 1
    return out_arr


def avg_pool2(floating[:, :, :, ::1] x):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2] // 2, W = x.shape[3] // 2
    dtype = np.float64 if floating is double else np.float32
    out_arr = np.empty((B, C, H, W), dtype=dtype)
    cdef floating[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, c, i, j
    with nogil:
        for b in range(B):
            for c in range(C):
                for i in range(H):
                    for j in range(W):
                        out[b, c, i, j] = ((x[b, c, 2 * i, 2 * j] + x[b, c, 2 * i, 2 * j + 1])
                                           + (x[b, c, 2 * i + 1, 2 * j] + x[b, c, 2 * i + 1, 2 * j + 1])) * 0.25
    return out_arr


def avg_pool2_backward(floating[:, :, :, ::1] g):
    cdef Py_ssize_t B = g.shape[0], C = g.shape[1], H = g.shape[2], W = g.shape[3]
    dtype = np.float64 if floating is double else np.float32
    out_arr = np.empty((B, C, 2 * H, 2 * W), dtype=dtype)
    cdef floating[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, c, i, j
    cdef floating v
    with nogil:
        for b in range(B):
            for c in range(C):
                for i in range(H):
                    for j in range(W):
                        v = g[b, c, i, j] * 0.25
                        out[b, c, 2 * i, 2 * j] = v
                        out[b, c, 2 * i, 2 * j + 1] = v
                        out[b, c, 2 * i + 1, 2 * j] = v
                        out[b, c, 2 * i + 1, 2 * j + 1] = v
    return out_arr


def zero_replace_rows(floating[:, ::1] x, double fallback):
    cdef Py_ssize_t R = x.shape[0], N = x.shape[1], r, n
    dtype = np.float64 if floating is double else np.float32
    out_arr = np.empty((R, N), dtype=dtype)
    cdef floating[:, ::1] out = out_arr
    cdef floating m, v
    cdef bint has_zero
    cdef Py_ssize_t n_empty = 0
    with nogil:
        for r in range(R):
            m = INFINITY
            has_zero = False
            for n in range(N):
                v = x[r, n]
                if v == 0:
                    has_zero = True
                elif v < m:
                    m = v
            if has_zero and m == INFINITY:
                m = <floating>fallback
                n_empty += 1
            for n in range(N):
                v = x[r, n]
                out[r, n] = m if v == 0 else v
    return out_arr, n_empty


def arctan_surrogate_grad(floating[::1] v, floating[::1] g, double alpha):
    cdef Py_ssize_t N = v.shape[0], n
    dtype = np.float64 if floating is double else np.float32
    out_arr = np.empty(N, dtype=dtype)
    cdef floating[::1] out = out_arr
    cdef double a = M_PI * alpha / 2, h = alpha / 2, z
    with nogil:
        for n in range(N):
            z = a * v[n]
            out[n] = <floating>(g[n] * h / (1 + z * z))
    return out_arr
