# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled im2col / col2im for stride-s valid convolution over NHWC arrays."""

import numpy as np
cimport numpy as cnp
from libc.string cimport memcpy

cnp.import_array()


def im2col(cnp.float64_t[:, :, :, ::1] x, Py_ssize_t k, Py_ssize_t stride):
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1], w = x.shape[2], c = x.shape[3]
    cdef Py_ssize_t ho = (h - k) // stride + 1
    cdef Py_ssize_t wo = (w - k) // stride + 1
    out = np.empty((n, ho, wo, k, k, c), dtype=np.float64)
    cdef cnp.float64_t[:, :, :, :, :, ::1] o = out
    cdef Py_ssize_t b, oy, ox, i
    cdef size_t run = k * c * sizeof(cnp.float64_t)
    if n == 0 or ho <= 0 or wo <= 0:
        return out
    # one kernel row (k pixels x c channels) is contiguous in both arrays
    for b in range(n):
        for oy in range(ho):
            for ox in range(wo):
                for i in range(k):
                    memcpy(&o[b, oy, ox, i, 0, 0], &x[b, oy * stride + i, ox * stride, 0], run)
    return out


def col2im(cnp.float64_t[:, :, :, :, :, ::1] cols, tuple x_shape, Py_ssize_t stride):
    cdef Py_ssize_t n = x_shape[0], h = x_shape[1], w = x_shape[2], c = x_shape[3]
    cdef Py_ssize_t ho = cols.shape[1], wo = cols.shape[2], k = cols.shape[3]
    out = np.zeros((n, h, w, c), dtype=np.float64)
    cdef cnp.float64_t[:, :, :, ::1] dx = out
    cdef Py_ssize_t b, oy, ox, i, j, ch
    # (i, j) outermost so every pixel accumulates in the same order as the numpy path
    for i in range(k):
        for j in range(k):
            for b in range(n):
                for oy in range(ho):
                    for ox in range(wo):
                        for ch in range(c):
                            dx[b, oy * stride + i, ox * stride + j, ch] += cols[b, oy, ox, i, j, ch]
    return out
