# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled im2col / col2im kernels for the convolution hot path.

Same layout contract as the numpy fallback in _convnp.py; selected at
import time by dcl._kernels. Fused def functions dispatch on the array
dtype (float32 / float64).
"""

import numpy as np


ctypedef fused floating:
    float
    double


def im2col(floating[:, :, :, ::1] xp, int kh, int kw, int sh, int sw, int oh, int ow):
    cdef Py_ssize_t n = xp.shape[0], c = xp.shape[1]
    out_arr = np.empty((n, oh, ow, c, kh, kw),
                       dtype=np.float32 if floating is float else np.float64)
    cdef floating[:, :, :, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, ch, y, x, i, j, sy, sx
    with nogil:
        for b in range(n):
            for y in range(oh):
                sy = y * sh
                for x in range(ow):
                    sx = x * sw
                    for ch in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                out[b, y, x, ch, i, j] = xp[b, ch, sy + i, sx + j]
    return out_arr


def col2im(floating[:, :, :, :, :, ::1] cols, int hp, int wp, int sh, int sw):
    cdef Py_ssize_t n = cols.shape[0], oh = cols.shape[1], ow = cols.shape[2]
    cdef Py_ssize_t c = cols.shape[3], kh = cols.shape[4], kw = cols.shape[5]
    out_arr = np.zeros((n, c, hp, wp),
                       dtype=np.float32 if floating is float else np.float64)
    cdef floating[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, ch, y, x, i, j, sy, sx
    with nogil:
        for b in range(n):
            for y in range(oh):
                sy = y * sh
                for x in range(ow):
                    sx = x * sw
                    for ch in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                out[b, ch, sy + i, sx + j] += cols[b, y, x, ch, i, j]
    return out_arr
