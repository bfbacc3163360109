# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels: record binning, parent/child scatter-gather, Adam update."""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor, isfinite, sqrt

cnp.import_array()


def bin_records(const double[:] ts, const double[:] x, const double[:] y,
                long long hour0, Py_ssize_t n_hours, double cell_size,
                Py_ssize_t rows, Py_ssize_t cols, const long long[:] cell_unit,
                Py_ssize_t d):
    cdef Py_ssize_t n = ts.shape[0]
    cdef Py_ssize_t i, r, c
    cdef long long h
    cdef double fx, fy
    cdef long long n_oob = 0, n_window = 0
    counts_arr = np.zeros((n_hours, d), dtype=np.int64)
    cdef long long[:, :] counts = counts_arr
    with nogil:
        for i in range(n):
            if not isfinite(ts[i]):
                n_window += 1
                continue
            h = <long long>floor(ts[i] / 3600.0) - hour0
            if h < 0 or h >= n_hours:
                n_window += 1
                continue
            if not (isfinite(x[i]) and isfinite(y[i])):
                n_oob += 1
                continue
            fx = floor(x[i] / cell_size)
            fy = floor(y[i] / cell_size)
            if fx < 0 or fy < 0 or fx >= cols or fy >= rows:
                n_oob += 1
                continue
            r = <Py_ssize_t>fy
            c = <Py_ssize_t>fx
            counts[h, cell_unit[r * cols + c]] += 1
    return counts_arr, n_oob, n_window


def segment_sum(const double[:, :] values, const long long[:] parent,
                Py_ssize_t d_coarse):
    cdef Py_ssize_t n = values.shape[0], d_fine = values.shape[1]
    cdef Py_ssize_t t, j
    out_arr = np.zeros((n, d_coarse), dtype=np.float64)
    cdef double[:, :] out = out_arr
    with nogil:
        for t in range(n):
            for j in range(d_fine):
                out[t, parent[j]] += values[t, j]
    return out_arr


def scatter_shares(const double[:, :] coarse, const long long[:] parent,
                   const double[:] share):
    cdef Py_ssize_t n = coarse.shape[0], d_fine = parent.shape[0]
    cdef Py_ssize_t t, j
    out_arr = np.empty((n, d_fine), dtype=np.float64)
    cdef double[:, :] out = out_arr
    with nogil:
        for t in range(n):
            for j in range(d_fine):
                out[t, j] = share[j] * coarse[t, parent[j]]
    return out_arr


def adam_update(const double[::1] p, const double[::1] g, double[::1] m, double[::1] v,
                double lr, double b1, double b2, double bc1, double bc2, double eps):
    """Fused Adam step over flat arrays; updates ``m``/``v`` in place.

    Returns the new parameters, or None (state untouched) if ``g`` holds a
    non-finite value.
    """
    cdef Py_ssize_t n = p.shape[0], i
    cdef double c1 = 1.0 - b1, c2 = 1.0 - b2
    cdef double step = lr / bc1, inv_bc2 = 1.0 / bc2
    cdef bint finite = True
    with nogil:
        for i in range(n):
            if not isfinite(g[i]):
                finite = False
                break
    if not finite:
        return None
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    with nogil:
        for i in range(n):
            m[i] = b1 * m[i] + c1 * g[i]
            v[i] = b2 * v[i] + c2 * (g[i] * g[i])
            out[i] = p[i] - (step * m[i]) / (sqrt(v[i] * inv_bc2) + eps)
    return out_arr
