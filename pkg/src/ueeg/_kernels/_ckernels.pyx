# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled loops for convolution unfolding and max pooling."""
import numpy as np
cimport numpy as cnp
from cython cimport floating

cnp.import_array()


def im2col(const floating[:, :, :, ::1] xp, Py_ssize_t kh, Py_ssize_t kw):
    cdef Py_ssize_t B = xp.shape[0], C = xp.shape[1], H = xp.shape[2], W = xp.shape[3]
    cdef Py_ssize_t ho = H - kh + 1, wo = W - kw + 1
    dtype = np.float32 if floating is float else np.float64
    out = np.empty((B, C * kh * kw, ho * wo), dtype=dtype)
    cdef floating[:, :, ::1] o = out
    cdef Py_ssize_t b, c, i, j, y, x, row, base
    with nogil:
        for b in range(B):
            for c in range(C):
                for i in range(kh):
                    for j in range(kw):
                        row = (c * kh + i) * kw + j
                        for y in range(ho):
                            base = y * wo
                            for x in range(wo):
                                o[b, row, base + x] = xp[b, c, y + i, x + j]
    return out


def col2im(const floating[:, :, ::1] cols, shape, Py_ssize_t kh, Py_ssize_t kw):
    cdef Py_ssize_t B = shape[0], C = shape[1], H = shape[2], W = shape[3]
    cdef Py_ssize_t ho = H - kh + 1, wo = W - kw + 1
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((B, C, H, W), dtype=dtype)
    cdef floating[:, :, :, ::1] o = out
    cdef Py_ssize_t b, c, i, j, y, x, row, base
    with nogil:
        for b in range(B):
            for c in range(C):
                for i in range(kh):
                    for j in range(kw):
                        row = (c * kh + i) * kw + j
                        for y in range(ho):
                            base = y * wo
                            for x in range(wo):
                                o[b, c, y + i, x + j] += cols[b, row, base + x]
    return out


def maxpool_forward(const floating[:, :, :, ::1] x, Py_ssize_t ph, Py_ssize_t pw,
                    Py_ssize_t sh, Py_ssize_t sw):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t ho = (H - ph) // sh + 1, wo = (W - pw) // sw + 1
    dtype = np.float32 if floating is float else np.float64
    out = np.empty((B, C, ho, wo), dtype=dtype)
    arg = np.empty((B, C, ho, wo), dtype=np.intp)
    cdef floating[:, :, :, ::1] o = out
    cdef Py_ssize_t[:, :, :, ::1] a = arg
    cdef Py_ssize_t b, c, y, xx, i, j, best
    cdef floating m, v
    with nogil:
        for b in range(B):
            for c in range(C):
                for y in range(ho):
                    for xx in range(wo):
                        best = (y * sh) * W + xx * sw
                        m = x[b, c, y * sh, xx * sw]
                        for i in range(ph):
                            for j in range(pw):
                                v = x[b, c, y * sh + i, xx * sw + j]
                                if v > m:
                                    m = v
                                    best = (y * sh + i) * W + xx * sw + j
                        o[b, c, y, xx] = m
                        a[b, c, y, xx] = best
    return out, arg


def maxpool_backward(const floating[:, :, :, ::1] g, const Py_ssize_t[:, :, :, ::1] argidx, shape):
    cdef Py_ssize_t B = shape[0], C = shape[1], H = shape[2], W = shape[3]
    cdef Py_ssize_t ho = g.shape[2], wo = g.shape[3]
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((B, C, H * W), dtype=dtype)
    cdef floating[:, :, ::1] d = out
    cdef Py_ssize_t b, c, y, x
    with nogil:
        for b in range(B):
            for c in range(C):
                for y in range(ho):
                    for x in range(wo):
                        d[b, c, argidx[b, c, y, x]] += g[b, c, y, x]
    return out.reshape(B, C, H, W)
