# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled per-cell kernels; same contracts as ``_pykernels``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport log, log1p, pow

cnp.import_array()


cdef inline double _ipow(double x, double p) nogil:
    if p == 0.0:
        return 1.0
    if p == 1.0:
        return x
    return pow(x, p)


def mass_action_rates(u, alpha, beta, k, u_ref):
    cdef double[:, ::1] uu = np.ascontiguousarray(u, dtype=np.float64)
    cdef double[:, ::1] al = np.ascontiguousarray(alpha, dtype=np.float64)
    cdef double[:, ::1] be = np.ascontiguousarray(beta, dtype=np.float64)
    cdef double[::1] kk = np.ascontiguousarray(k, dtype=np.float64)
    cdef double[::1] ref = np.ascontiguousarray(u_ref, dtype=np.float64)
    cdef Py_ssize_t m = uu.shape[0], n = uu.shape[1], nr = al.shape[0]
    out = np.zeros((m, n), dtype=np.float64)
    cdef double[:, ::1] f = out
    cdef Py_ssize_t c, r, i
    cdef double p, q, x, s
    with nogil:
        for c in range(m):
            for r in range(nr):
                p = 1.0
                q = 1.0
                for i in range(n):
                    x = uu[c, i] / ref[i]
                    p *= _ipow(x, al[r, i])
                    q *= _ipow(x, be[r, i])
                s = -kk[r] * (p - q)
                for i in range(n):
                    f[c, i] += s * (al[r, i] - be[r, i])
    return out


def polynomial_transmission(up, um, gamma, delta, double k, u_ref_plus, u_ref_minus):
    cdef double[:, ::1] a = np.ascontiguousarray(up, dtype=np.float64)
    cdef double[:, ::1] b = np.ascontiguousarray(um, dtype=np.float64)
    cdef double[::1] g = np.ascontiguousarray(gamma, dtype=np.float64)
    cdef double[::1] d = np.ascontiguousarray(delta, dtype=np.float64)
    cdef double[::1] rp = np.ascontiguousarray(u_ref_plus, dtype=np.float64)
    cdef double[::1] rm = np.ascontiguousarray(u_ref_minus, dtype=np.float64)
    cdef Py_ssize_t m = a.shape[0], n = a.shape[1]
    out = np.empty((m, n), dtype=np.float64)
    cdef double[:, ::1] r = out
    cdef Py_ssize_t c, i
    cdef double p, q, x, y
    with nogil:
        for c in range(m):
            p = 1.0
            q = 1.0
            for i in range(n):
                x = a[c, i] / rp[i]
                y = b[c, i] / rm[i]
                p *= _ipow(x, g[i]) * _ipow(y, d[i])
                q *= _ipow(x, d[i]) * _ipow(y, g[i])
            for i in range(n):
                r[c, i] = k * (p - q) * (g[i] - d[i])
    return out


def boltzmann_density(u, u_ref, bint shift):
    cdef double[:, ::1] uu = np.ascontiguousarray(u, dtype=np.float64)
    cdef double[::1] ref = np.ascontiguousarray(u_ref, dtype=np.float64)
    cdef Py_ssize_t m = uu.shape[0], n = uu.shape[1]
    out = np.empty(m, dtype=np.float64)
    cdef double[::1] h = out
    cdef Py_ssize_t c, i
    cdef double x, acc, b
    with nogil:
        for c in range(m):
            acc = 0.0
            for i in range(n):
                x = uu[c, i] / ref[i]
                if x > 0.0:
                    b = x * log(x) - x
                else:
                    b = -x
                if shift:
                    b += 1.0
                acc += ref[i] * b
            h[c] = acc
    return out


def bregman_density(u, big_u, u_ref):
    cdef double[:, ::1] uu = np.ascontiguousarray(u, dtype=np.float64)
    cdef double[:, ::1] UU = np.ascontiguousarray(big_u, dtype=np.float64)
    cdef double[::1] ref = np.ascontiguousarray(u_ref, dtype=np.float64)
    cdef Py_ssize_t m = uu.shape[0], n = uu.shape[1]
    out = np.empty(m, dtype=np.float64)
    cdef double[::1] h = out
    cdef Py_ssize_t c, i
    cdef double a, b, d, acc, inner
    with nogil:
        for c in range(m):
            acc = 0.0
            for i in range(n):
                a = uu[c, i] / ref[i]
                b = UU[c, i] / ref[i]
                if a > 0.0:
                    d = (a - b) / b
                    inner = (1.0 + d) * log1p(d) - d
                else:
                    inner = 1.0
                acc += ref[i] * b * inner
            h[c] = acc
    return out
