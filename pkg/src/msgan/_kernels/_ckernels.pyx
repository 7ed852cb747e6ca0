# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled loops for im2col/col2im and 2x2 max-pool routing."""
import numpy as np
cimport numpy as cnp

ctypedef fused real:
    float
    double


def _im2col(const real[:, :, :, ::1] x, real[:, ::1] out, int k, int padding):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = h + 2 * padding - k + 1, wo = w + 2 * padding - k + 1
    cdef Py_ssize_t b, oy, ox, ch, i, j, row, col, iy, ix
    with nogil:
        for b in range(n):
            for oy in range(ho):
                for ox in range(wo):
                    row = (b * ho + oy) * wo + ox
                    col = 0
                    for ch in range(c):
                        for i in range(k):
                            iy = oy + i - padding
                            for j in range(k):
                                ix = ox + j - padding
                                if 0 <= iy < h and 0 <= ix < w:
                                    out[row, col] = x[b, ch, iy, ix]
                                else:
                                    out[row, col] = 0
                                col = col + 1


def _col2im(const real[:, ::1] cols, real[:, :, :, ::1] out, int k, int padding):
    cdef Py_ssize_t n = out.shape[0], c = out.shape[1], h = out.shape[2], w = out.shape[3]
    cdef Py_ssize_t ho = h + 2 * padding - k + 1, wo = w + 2 * padding - k + 1
    cdef Py_ssize_t b, oy, ox, ch, i, j, row, col, iy, ix
    with nogil:
        for b in range(n):
            for oy in range(ho):
                for ox in range(wo):
                    row = (b * ho + oy) * wo + ox
                    col = 0
                    for ch in range(c):
                        for i in range(k):
                            iy = oy + i - padding
                            for j in range(k):
                                ix = ox + j - padding
                                if 0 <= iy < h and 0 <= ix < w:
                                    out[b, ch, iy, ix] += cols[row, col]
                                col = col + 1


def _pool_argmax(const real[:, :, :, ::1] x, cnp.uint8_t[:, :, :, ::1] idx):
    cdef Py_ssize_t n = idx.shape[0], c = idx.shape[1], ho = idx.shape[2], wo = idx.shape[3]
    cdef Py_ssize_t b, ch, y, xx, t
    cdef real best, v
    cdef cnp.uint8_t arg
    with nogil:
        for b in range(n):
            for ch in range(c):
                for y in range(ho):
                    for xx in range(wo):
                        best = x[b, ch, 2 * y, 2 * xx]
                        arg = 0
                        for t in range(1, 4):
                            v = x[b, ch, 2 * y + t // 2, 2 * xx + t % 2]
                            if v > best:
                                best = v
                                arg = <cnp.uint8_t>t
                        idx[b, ch, y, xx] = arg


def _pool_gather(const real[:, :, :, ::1] x, const cnp.uint8_t[:, :, :, ::1] idx, real[:, :, :, ::1] out):
    cdef Py_ssize_t n = idx.shape[0], c = idx.shape[1], ho = idx.shape[2], wo = idx.shape[3]
    cdef Py_ssize_t b, ch, y, xx, t
    with nogil:
        for b in range(n):
            for ch in range(c):
                for y in range(ho):
                    for xx in range(wo):
                        t = idx[b, ch, y, xx]
                        out[b, ch, y, xx] = x[b, ch, 2 * y + t // 2, 2 * xx + t % 2]


def _pool_scatter(const real[:, :, :, ::1] g, const cnp.uint8_t[:, :, :, ::1] idx, real[:, :, :, ::1] out):
    cdef Py_ssize_t n = idx.shape[0], c = idx.shape[1], ho = idx.shape[2], wo = idx.shape[3]
    cdef Py_ssize_t b, ch, y, xx, t
    with nogil:
        for b in range(n):
            for ch in range(c):
                for y in range(ho):
                    for xx in range(wo):
                        t = idx[b, ch, y, xx]
                        out[b, ch, 2 * y + t // 2, 2 * xx + t % 2] = g[b, ch, y, xx]


def im2col(x, int k, int padding):
    x = np.ascontiguousarray(x)
    n, c, h, w = x.shape
    ho = h + 2 * padding - k + 1
    wo = w + 2 * padding - k + 1
    out = np.empty((n * ho * wo, c * k * k), dtype=x.dtype)
    _im2col(x, out, k, padding)
    return out


def col2im(cols, x_shape, int k, int padding):
    cols = np.ascontiguousarray(cols)
    out = np.zeros(x_shape, dtype=cols.dtype)
    _col2im(cols, out, k, padding)
    return out


def pool_argmax(x):
    x = np.ascontiguousarray(x)
    n, c, h, w = x.shape
    idx = np.empty((n, c, h // 2, w // 2), dtype=np.uint8)
    _pool_argmax(x, idx)
    return idx


def pool_gather(x, idx):
    x = np.ascontiguousarray(x)
    idx = np.ascontiguousarray(idx, dtype=np.uint8)
    out = np.empty(idx.shape, dtype=x.dtype)
    _pool_gather(x, idx, out)
    return out


def pool_scatter(g, idx):
    g = np.ascontiguousarray(g)
    idx = np.ascontiguousarray(idx, dtype=np.uint8)
    n, c, ho, wo = g.shape
    out = np.zeros((n, c, 2 * ho, 2 * wo), dtype=g.dtype)
    _pool_scatter(g, idx, out)
    return out
