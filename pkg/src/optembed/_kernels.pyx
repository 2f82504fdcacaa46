# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled per-row embedding kernels. Mirrors optembed._kernels_py."""
import numpy as np
from libc.math cimport fabs
from libc.stdint cimport int64_t


cdef inline double _longtail(double x) noexcept nogil:
    cdef double a = fabs(x)
    if a <= 0.4:
        return 2.0 - 4.0 * a
    if a <= 1.0:
        return 0.4
    return 0.0


cdef inline double _sign(double x) noexcept nogil:
    if x > 0.0:
        return 1.0
    if x < 0.0:
        return -1.0
    return 0.0


def gather_embeddings(const double[:, ::1] table, const int64_t[:, ::1] idx,
                      const int64_t[::1] dims):
    cdef Py_ssize_t B = idx.shape[0], n = idx.shape[1], D = table.shape[1]
    cdef Py_ssize_t b, f, c, base, d
    cdef int64_t row
    out_arr = np.zeros((B, n * D), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    with nogil:
        for b in range(B):
            for f in range(n):
                row = idx[b, f]
                base = f * D
                d = dims[f]
                if d > D:
                    d = D
                for c in range(d):
                    out[b, base + c] = table[row, c]
    return out_arr


def scatter_row_grads(const double[:, ::1] dx, const int64_t[:, ::1] idx,
                      const int64_t[::1] dims, Py_ssize_t n_rows):
    cdef Py_ssize_t B = idx.shape[0], n = idx.shape[1]
    cdef Py_ssize_t D = dx.shape[1] // n
    cdef Py_ssize_t b, f, c, base, d
    cdef int64_t row
    out_arr = np.zeros((n_rows, D), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    with nogil:
        for b in range(B):
            for f in range(n):
                row = idx[b, f]
                base = f * D
                d = dims[f]
                if d > D:
                    d = D
                for c in range(d):
                    out[row, c] += dx[b, base + c]
    return out_arr


def l1_norms(const double[:, ::1] table):
    cdef Py_ssize_t R = table.shape[0], D = table.shape[1], j, c
    cdef double acc
    out_arr = np.empty(R, dtype=np.float64)
    cdef double[::1] out = out_arr
    with nogil:
        for j in range(R):
            acc = 0.0
            for c in range(D):
                acc += fabs(table[j, c])
            out[j] = acc
    return out_arr


def masked_embed_grads(const double[:, ::1] grad_hat, const double[:, ::1] emb,
                       const double[::1] keep, const double[::1] gap,
                       const int64_t[::1] fields, Py_ssize_t n_fields):
    cdef Py_ssize_t U = emb.shape[0], D = emb.shape[1], j, c
    cdef double h, s, row_sum, k
    d_arr = np.empty((U, D), dtype=np.float64)
    dt_arr = np.zeros(n_fields, dtype=np.float64)
    cdef double[:, ::1] d_emb = d_arr
    cdef double[::1] dt = dt_arr
    with nogil:
        for j in range(U):
            h = _longtail(gap[j])
            k = keep[j]
            row_sum = 0.0
            for c in range(D):
                s = grad_hat[j, c] * emb[j, c]
                row_sum += s
                d_emb[j, c] = grad_hat[j, c] * k + s * h * _sign(emb[j, c])
            dt[fields[j]] += -(row_sum * h)
    return d_arr, dt_arr
