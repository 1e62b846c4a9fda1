# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: im2col/col2im for convolution, fused softmax and
layer-norm passes. Function surface matches numpy_backend; single-threaded
loops keep results bit-deterministic."""

import numpy as np

cimport cython
from libc.math cimport exp, sqrt

ctypedef fused real:
    float
    double


def im2col(real[:, :, :, ::1] x, Py_ssize_t kh, Py_ssize_t kw):
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1], w = x.shape[2], c = x.shape[3]
    cdef Py_ssize_t ho = h - kh + 1, wo = w - kw + 1
    out_np = np.empty((n * ho * wo, kh * kw * c),
                      dtype=np.float32 if real is float else np.float64)
    cdef real[:, ::1] out = out_np
    cdef Py_ssize_t b, i, j, p, q, ch, row, col
    with nogil:
        for b in range(n):
            for i in range(ho):
                for j in range(wo):
                    row = (b * ho + i) * wo + j
                    col = 0
                    for p in range(kh):
                        for q in range(kw):
                            for ch in range(c):
                                out[row, col] = x[b, i + p, j + q, ch]
                                col += 1
    return out_np


def col2im(real[:, ::1] gcols, Py_ssize_t n, Py_ssize_t h, Py_ssize_t w,
           Py_ssize_t c, Py_ssize_t kh, Py_ssize_t kw):
    cdef Py_ssize_t ho = h - kh + 1, wo = w - kw + 1
    gx_np = np.zeros((n, h, w, c), dtype=np.float32 if real is float else np.float64)
    cdef real[:, :, :, ::1] gx = gx_np
    cdef Py_ssize_t b, i, j, p, q, ch, row, col
    with nogil:
        for b in range(n):
            for i in range(ho):
                for j in range(wo):
                    row = (b * ho + i) * wo + j
                    col = 0
                    for p in range(kh):
                        for q in range(kw):
                            for ch in range(c):
                                gx[b, i + p, j + q, ch] += gcols[row, col]
                                col += 1
    return gx_np


def softmax_forward(real[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1]
    y_np = np.empty((n, d), dtype=np.float32 if real is float else np.float64)
    cdef real[:, ::1] y = y_np
    cdef Py_ssize_t i, j
    cdef real m, s
    with nogil:
        for i in range(n):
            m = x[i, 0]
            for j in range(1, d):
                if x[i, j] > m:
                    m = x[i, j]
            s = 0.0
            for j in range(d):
                y[i, j] = <real>exp(x[i, j] - m)
                s += y[i, j]
            for j in range(d):
                y[i, j] /= s
    return y_np


def softmax_backward(real[:, ::1] g, real[:, ::1] y):
    cdef Py_ssize_t n = g.shape[0], d = g.shape[1]
    gx_np = np.empty((n, d), dtype=np.float32 if real is float else np.float64)
    cdef real[:, ::1] gx = gx_np
    cdef Py_ssize_t i, j
    cdef real dot
    with nogil:
        for i in range(n):
            dot = 0.0
            for j in range(d):
                dot += g[i, j] * y[i, j]
            for j in range(d):
                gx[i, j] = y[i, j] * (g[i, j] - dot)
    return gx_np


def layer_norm_forward(real[:, ::1] x, real[::1] gamma, real[::1] beta, double eps):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1]
    dtype = np.float32 if real is float else np.float64
    y_np = np.empty((n, d), dtype=dtype)
    xhat_np = np.empty((n, d), dtype=dtype)
    inv_np = np.empty(n, dtype=dtype)
    cdef real[:, ::1] y = y_np
    cdef real[:, ::1] xhat = xhat_np
    cdef real[::1] inv = inv_np
    cdef Py_ssize_t i, j
    cdef double mu, var, diff
    cdef real istd
    with nogil:
        for i in range(n):
            mu = 0.0
            for j in range(d):
                mu += x[i, j]
            mu /= d
            var = 0.0
            for j in range(d):
                diff = x[i, j] - mu
                var += diff * diff
            var /= d
            istd = <real>(1.0 / sqrt(var + eps))
            inv[i] = istd
            for j in range(d):
                xhat[i, j] = <real>((x[i, j] - mu) * istd)
                y[i, j] = xhat[i, j] * gamma[j] + beta[j]
    return y_np, xhat_np, inv_np


def layer_norm_backward(real[:, ::1] g, real[:, ::1] xhat, real[::1] inv_std,
                        real[::1] gamma):
    cdef Py_ssize_t n = g.shape[0], d = g.shape[1]
    dtype = np.float32 if real is float else np.float64
    gx_np = np.empty((n, d), dtype=dtype)
    ggamma_np = np.zeros(d, dtype=dtype)
    gbeta_np = np.zeros(d, dtype=dtype)
    cdef real[:, ::1] gx = gx_np
    cdef real[::1] ggamma = ggamma_np
    cdef real[::1] gbeta = gbeta_np
    cdef Py_ssize_t i, j
    cdef double m1, m2
    cdef real dxh
    with nogil:
        for i in range(n):
            m1 = 0.0
            m2 = 0.0
            for j in range(d):
                dxh = g[i, j] * gamma[j]
                m1 += dxh
                m2 += dxh * xhat[i, j]
            m1 /= d
            m2 /= d
            for j in range(d):
                dxh = g[i, j] * gamma[j]
                gx[i, j] = <real>(inv_std[i] * (dxh - m1 - xhat[i, j] * m2))
                ggamma[j] += g[i, j] * xhat[i, j]
                gbeta[j] += g[i, j]
    return gx_np, ggamma_np, gbeta_np
