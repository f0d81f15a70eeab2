# cython: language_level=3, boundscheck=False, wraparound=False
"""Compiled kernels. Callers (elacnn.kernels) validate shapes and dtypes."""

import numpy as np

from libc.stdint cimport int8_t


cdef extern from "_ext/kernels.h" nogil:
    void ek_conv2d_forward(const float *x, int n, int h, int w, int cin,
                           const float *wt, int kh, int kw, int cout,
                           const float *bias, float *out)
    void ek_conv2d_grad_weights(const float *x, int n, int h, int w, int cin,
                                const float *g, int kh, int kw, int cout,
                                float *gw, float *gb)
    void ek_maxpool2_forward(const float *x, int n, int h, int w, int c,
                             float *out, int8_t *arg)
    void ek_maxpool2_backward(const float *g, const int8_t *arg, int n, int h,
                              int w, int c, float *gin)
    void ek_dense_forward(const float *x, int n, int k, const float *wt, int m,
                          const float *bias, float *out)
    void ek_dense_grad_input(const float *wt, int k, int m, const float *g,
                             int n, float *out)
    void ek_adam_dense(float *p, float *mo, float *ve, const float *gsum,
                       size_t size, float divisor, float b1, float c1,
                       float b2, float c2, float bc1, float bc2, float lr,
                       float eps)
    void ek_adam_outer(float *p, float *mo, float *ve, const float *xs,
                       const float *gs, int n, int k, int m, float divisor,
                       float b1, float c1, float b2, float c2, float bc1,
                       float bc2, float lr, float eps)


def conv2d_forward(const float[:, :, :, ::1] x, const float[:, :, :, ::1] w,
                   const float[::1] b):
    cdef int n = x.shape[0], h = x.shape[1], wd = x.shape[2], cin = x.shape[3]
    cdef int kh = w.shape[0], kw = w.shape[1], cout = w.shape[3]
    out = np.empty((n, h - kh + 1, wd - kw + 1, cout), dtype=np.float32)
    cdef float[:, :, :, ::1] o = out
    with nogil:
        ek_conv2d_forward(&x[0, 0, 0, 0], n, h, wd, cin, &w[0, 0, 0, 0],
                          kh, kw, cout, &b[0], &o[0, 0, 0, 0])
    return out


def conv2d_grad_weights(const float[:, :, :, ::1] x, const float[:, :, :, ::1] g,
                        int kh, int kw):
    cdef int n = x.shape[0], h = x.shape[1], wd = x.shape[2], cin = x.shape[3]
    cdef int cout = g.shape[3]
    gw = np.empty((kh, kw, cin, cout), dtype=np.float32)
    gb = np.empty(cout, dtype=np.float32)
    cdef float[:, :, :, ::1] gwv = gw
    cdef float[::1] gbv = gb
    with nogil:
        ek_conv2d_grad_weights(&x[0, 0, 0, 0], n, h, wd, cin, &g[0, 0, 0, 0],
                               kh, kw, cout, &gwv[0, 0, 0, 0], &gbv[0])
    return gw, gb


def maxpool2_forward(const float[:, :, :, ::1] x):
    cdef int n = x.shape[0], h = x.shape[1], w = x.shape[2], c = x.shape[3]
    out = np.empty((n, h // 2, w // 2, c), dtype=np.float32)
    arg = np.empty((n, h // 2, w // 2, c), dtype=np.int8)
    cdef float[:, :, :, ::1] o = out
    cdef int8_t[:, :, :, ::1] a = arg
    with nogil:
        ek_maxpool2_forward(&x[0, 0, 0, 0], n, h, w, c, &o[0, 0, 0, 0],
                            &a[0, 0, 0, 0])
    return out, arg


def maxpool2_backward(const float[:, :, :, ::1] g, const int8_t[:, :, :, ::1] arg):
    cdef int n = g.shape[0], h = 2 * g.shape[1], w = 2 * g.shape[2], c = g.shape[3]
    gin = np.empty((n, h, w, c), dtype=np.float32)
    cdef float[:, :, :, ::1] gi = gin
    with nogil:
        ek_maxpool2_backward(&g[0, 0, 0, 0], &arg[0, 0, 0, 0], n, h, w, c,
                             &gi[0, 0, 0, 0])
    return gin


def dense_forward(const float[:, ::1] x, const float[:, ::1] w, const float[::1] b):
    cdef int n = x.shape[0], k = x.shape[1], m = w.shape[1]
    out = np.empty((n, m), dtype=np.float32)
    cdef float[:, ::1] o = out
    cdef const float *bp = NULL
    if b is not None:
        bp = &b[0]
    with nogil:
        ek_dense_forward(&x[0, 0], n, k, &w[0, 0], m, bp, &o[0, 0])
    return out


def dense_grad_input(const float[:, ::1] w, const float[:, ::1] g):
    cdef int k = w.shape[0], m = w.shape[1], n = g.shape[0]
    out = np.empty((n, k), dtype=np.float32)
    cdef float[:, ::1] o = out
    with nogil:
        ek_dense_grad_input(&w[0, 0], k, m, &g[0, 0], n, &o[0, 0])
    return out


def adam_dense(float[::1] p, float[::1] m, float[::1] v, const float[::1] gsum,
               float divisor, float b1, float c1, float b2, float c2,
               float bc1, float bc2, float lr, float eps):
    with nogil:
        ek_adam_dense(&p[0], &m[0], &v[0], &gsum[0], <size_t>p.shape[0],
                      divisor, b1, c1, b2, c2, bc1, bc2, lr, eps)


def adam_outer(float[:, ::1] p, float[:, ::1] m, float[:, ::1] v,
               const float[:, ::1] xs, const float[:, ::1] gs,
               float divisor, float b1, float c1, float b2, float c2,
               float bc1, float bc2, float lr, float eps):
    with nogil:
        ek_adam_outer(&p[0, 0], &m[0, 0], &v[0, 0], &xs[0, 0], &gs[0, 0],
                      xs.shape[0], p.shape[0], p.shape[1], divisor,
                      b1, c1, b2, c2, bc1, bc2, lr, eps)
