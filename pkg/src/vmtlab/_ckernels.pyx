# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled row-wise kernels; same contracts as ``_kernels_py``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log

cnp.import_array()

cdef double LOG_FLOOR = 1e-30


cdef inline double _safe_log(double v) noexcept nogil:
    if v > LOG_FLOOR:
        return log(v)
    return log(LOG_FLOOR)


def softmax_rows(const double[:, ::1] z):
    cdef Py_ssize_t n = z.shape[0], k = z.shape[1], i, j
    out = np.empty((n, k), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef double m, total
    with nogil:
        for i in range(n):
            m = z[i, 0]
            for j in range(1, k):
                if z[i, j] > m:
                    m = z[i, j]
            total = 0.0
            for j in range(k):
                o[i, j] = exp(z[i, j] - m)
                total += o[i, j]
            for j in range(k):
                o[i, j] /= total
    return out


def softmax_rows_vjp(const double[:, ::1] s, const double[:, ::1] g):
    cdef Py_ssize_t n = s.shape[0], k = s.shape[1], i, j
    out = np.empty((n, k), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef double dot
    with nogil:
        for i in range(n):
            dot = 0.0
            for j in range(k):
                dot += g[i, j] * s[i, j]
            for j in range(k):
                o[i, j] = s[i, j] * (g[i, j] - dot)
    return out


def kl_rows(const double[:, ::1] p, const double[:, ::1] q):
    cdef Py_ssize_t n = p.shape[0], k = p.shape[1], i, j
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    cdef double acc
    with nogil:
        for i in range(n):
            acc = 0.0
            for j in range(k):
                acc += p[i, j] * (_safe_log(p[i, j]) - _safe_log(q[i, j]))
            o[i] = acc
    return out


def kl_rows_vjp(const double[:, ::1] p, const double[:, ::1] q, const double[::1] g):
    cdef Py_ssize_t n = p.shape[0], k = p.shape[1], i, j
    gp_arr = np.empty((n, k), dtype=np.float64)
    gq_arr = np.empty((n, k), dtype=np.float64)
    cdef double[:, ::1] gp = gp_arr
    cdef double[:, ::1] gq = gq_arr
    cdef double pv, qv, ind
    with nogil:
        for i in range(n):
            for j in range(k):
                pv = p[i, j]
                qv = q[i, j]
                ind = 1.0 if pv > LOG_FLOOR else 0.0
                gp[i, j] = g[i] * (_safe_log(pv) - _safe_log(qv) + ind)
                if qv > LOG_FLOOR:
                    gq[i, j] = -g[i] * pv / qv
                else:
                    gq[i, j] = 0.0
    return gp_arr, gq_arr


def entropy_rows(const double[:, ::1] p):
    cdef Py_ssize_t n = p.shape[0], k = p.shape[1], i, j
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    cdef double acc
    with nogil:
        for i in range(n):
            acc = 0.0
            for j in range(k):
                acc -= p[i, j] * _safe_log(p[i, j])
            o[i] = acc
    return out


def entropy_rows_vjp(const double[:, ::1] p, const double[::1] g):
    cdef Py_ssize_t n = p.shape[0], k = p.shape[1], i, j
    out = np.empty((n, k), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef double ind
    with nogil:
        for i in range(n):
            for j in range(k):
                ind = 1.0 if p[i, j] > LOG_FLOOR else 0.0
                o[i, j] = -g[i] * (_safe_log(p[i, j]) + ind)
    return out


def bias_act_(double[:, ::1] z, const double[::1] b, bint relu):
    cdef Py_ssize_t n = z.shape[0], k = z.shape[1], i, j
    cdef double v
    with nogil:
        for i in range(n):
            for j in range(k):
                v = z[i, j] + b[j]
                if relu and v < 0:
                    v = 0.0
                z[i, j] = v


def bias_act_vjp(const double[:, ::1] out, const double[:, ::1] g, bint relu):
    cdef Py_ssize_t n = out.shape[0], k = out.shape[1], i, j
    gz_arr = np.empty((n, k), dtype=np.float64)
    gb_arr = np.zeros(k, dtype=np.float64)
    cdef double[:, ::1] gz = gz_arr
    cdef double[::1] gb = gb_arr
    cdef double v
    with nogil:
        for i in range(n):
            for j in range(k):
                v = g[i, j]
                if relu and not out[i, j] > 0:
                    v = 0.0
                gz[i, j] = v
                gb[j] += v
    return gz_arr, gb_arr
