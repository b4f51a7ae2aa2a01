# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the hot kernels in ``_pykernels``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()

ctypedef fused real:
    float
    double


def _im2col(const real[:, :, :, ::1] x, real[:, :, ::1] out,
            Py_ssize_t k, Py_ssize_t stride, Py_ssize_t out_h, Py_ssize_t out_w):
    cdef Py_ssize_t b, c, di, dj, i, j, row, col
    cdef Py_ssize_t nb = x.shape[0], nc = x.shape[1]
    with nogil:
        for b in range(nb):
            for c in range(nc):
                for di in range(k):
                    for dj in range(k):
                        row = (c * k + di) * k + dj
                        for i in range(out_h):
                            col = i * out_w
                            for j in range(out_w):
                                out[b, row, col + j] = x[b, c, i * stride + di, j * stride + dj]


def _col2im(const real[:, :, ::1] cols, real[:, :, :, ::1] out,
            Py_ssize_t k, Py_ssize_t stride, Py_ssize_t out_h, Py_ssize_t out_w):
    cdef Py_ssize_t b, c, di, dj, i, j, row, col
    cdef Py_ssize_t nb = out.shape[0], nc = out.shape[1]
    with nogil:
        for b in range(nb):
            for c in range(nc):
                for di in range(k):
                    for dj in range(k):
                        row = (c * k + di) * k + dj
                        for i in range(out_h):
                            col = i * out_w
                            for j in range(out_w):
                                out[b, c, i * stride + di, j * stride + dj] += cols[b, row, col + j]


def im2col(x, Py_ssize_t k, Py_ssize_t stride, Py_ssize_t out_h, Py_ssize_t out_w):
    x = np.ascontiguousarray(x)
    out = np.empty((x.shape[0], x.shape[1] * k * k, out_h * out_w), dtype=x.dtype)
    if x.dtype == np.float32:
        _im2col(x, out, k, stride, out_h, out_w)
    elif x.dtype == np.float64:
        _im2col(x, out, k, stride, out_h, out_w)
    else:
        raise TypeError(f"unsupported dtype {x.dtype}")
    return out


def col2im(cols, Py_ssize_t channels, Py_ssize_t hp, Py_ssize_t wp, Py_ssize_t k, Py_ssize_t stride):
    cols = np.ascontiguousarray(cols)
    cdef Py_ssize_t out_h = (hp - k) // stride + 1
    cdef Py_ssize_t out_w = (wp - k) // stride + 1
    out = np.zeros((cols.shape[0], channels, hp, wp), dtype=cols.dtype)
    if cols.dtype == np.float32:
        _col2im(cols, out, k, stride, out_h, out_w)
    elif cols.dtype == np.float64:
        _col2im(cols, out, k, stride, out_h, out_w)
    else:
        raise TypeError(f"unsupported dtype {cols.dtype}")
    return out


def min_distances(a, b):
    cdef const double[:, ::1] av = np.ascontiguousarray(a, dtype=np.float64)
    cdef const double[:, ::1] bv = np.ascontiguousarray(b, dtype=np.float64)
    out = np.empty(av.shape[0], dtype=np.float64)
    cdef double[::1] ov = out
    cdef Py_ssize_t i, j, n = av.shape[0], m = bv.shape[0]
    cdef double best, dx, dy, d
    with nogil:
        for i in range(n):
            best = 1e300
            for j in range(m):
                dx = av[i, 0] - bv[j, 0]
                dy = av[i, 1] - bv[j, 1]
                d = dx * dx + dy * dy
                if d < best:
                    best = d
            ov[i] = sqrt(best)
    return out
