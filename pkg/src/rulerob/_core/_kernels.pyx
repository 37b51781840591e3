# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled twins of the hot kernels (see _kernels_py for the contracts)."""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp

BACKEND = "compiled"


def se_ard_cross(cnp.ndarray[cnp.float64_t, ndim=2] queries,
                 cnp.ndarray[cnp.float64_t, ndim=2] train,
                 cnp.ndarray[cnp.float64_t, ndim=1] inv_ls_sq,
                 double sigma2):
    cdef Py_ssize_t m = queries.shape[0]
    cdef Py_ssize_t n = train.shape[0]
    cdef Py_ssize_t nz = queries.shape[1]
    if train.shape[1] != nz or inv_ls_sq.shape[0] != nz:
        raise ValueError("dimension mismatch between queries, train, and length scales")
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.empty((m, n), dtype=np.float64)
    cdef double[:, ::1] q = np.ascontiguousarray(queries)
    cdef double[:, ::1] t = np.ascontiguousarray(train)
    cdef double[::1] w = np.ascontiguousarray(inv_ls_sq)
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j, k
    cdef double acc, diff
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for k in range(nz):
                diff = q[i, k] - t[j, k]
                acc += w[k] * diff * diff
            o[i, j] = sigma2 * exp(-0.5 * acc)
    return out


def se_ard_gram(cnp.ndarray[cnp.float64_t, ndim=2] train,
                cnp.ndarray[cnp.float64_t, ndim=1] inv_ls_sq,
                double sigma2, double diag_add):
    cdef Py_ssize_t n = train.shape[0]
    cdef Py_ssize_t nz = train.shape[1]
    if inv_ls_sq.shape[0] != nz:
        raise ValueError("dimension mismatch between train and length scales")
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.empty((n, n), dtype=np.float64)
    cdef double[:, ::1] t = np.ascontiguousarray(train)
    cdef double[::1] w = np.ascontiguousarray(inv_ls_sq)
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j, k
    cdef double acc, diff
    for i in range(n):
        o[i, i] = sigma2 + diag_add
        for j in range(i + 1, n):
            acc = 0.0
            for k in range(nz):
                diff = t[i, k] - t[j, k]
                acc += w[k] * diff * diff
            acc = sigma2 * exp(-0.5 * acc)
            o[i, j] = acc
            o[j, i] = acc
    return out


def quintic_eval(cnp.ndarray[cnp.float64_t, ndim=2] coeffs,
                 cnp.ndarray[cnp.float64_t, ndim=1] ts,
                 int deriv=0):
    if deriv < 0 or deriv > 3:
        raise ValueError(f"derivative order must be 0..3, got {deriv}")
    cdef cnp.ndarray[cnp.float64_t, ndim=2] c = np.ascontiguousarray(coeffs, dtype=np.float64)
    cdef Py_ssize_t d
    for d in range(deriv):
        c = c[:, 1:] * np.arange(1, c.shape[1], dtype=np.float64)
        c = np.ascontiguousarray(c)
    cdef Py_ssize_t n = c.shape[0]
    cdef Py_ssize_t nc = c.shape[1]
    cdef Py_ssize_t m = ts.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] cv = c
    cdef double[::1] tv = np.ascontiguousarray(ts)
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j, k
    cdef double acc, t
    for i in range(n):
        for j in range(m):
            t = tv[j]
            acc = cv[i, nc - 1]
            for k in range(nc - 2, -1, -1):
                acc = acc * t + cv[i, k]
            o[i, j] = acc
    return out
