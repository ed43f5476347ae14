# cython: boundscheck=False, wraparound=False, cdivision=True
# cython: language_level=3
"""Compiled weighted local-polynomial moment sums.

Same contract as hetfx._polycore.moment_sums, plus explicit per-center index
windows [lo[g], hi[g]) so compact kernels only touch nearby points. Windows may
be supersets of the true support; every point is re-tested with the exact
kernel expression, so results match the pure backend up to summation order.
"""
from libc.math cimport exp, fabs

import numpy as np

cimport numpy as cnp

cnp.import_array()

cdef double _SQRT_2PI = 2.5066282746310002


def moment_sums_windowed(double[::1] v, double[::1] phi, double[::1] centers,
                         double h, int degree, int kernel_id,
                         cnp.int64_t[::1] lo, cnp.int64_t[::1] hi):
    cdef Py_ssize_t m = centers.shape[0]
    cdef int n_s = 2 * degree + 1
    S_arr = np.zeros((m, n_s), dtype=np.float64)
    R_arr = np.zeros((m, degree + 1), dtype=np.float64)
    cnt_arr = np.zeros(m, dtype=np.int64)
    cdef double[:, ::1] S = S_arr
    cdef double[:, ::1] R = R_arr
    cdef cnp.int64_t[::1] cnt = cnt_arr
    cdef Py_ssize_t g, i
    cdef int k
    cdef double c, u, w, t, p, inv_h = 1.0 / h

    with nogil:
        for g in range(m):
            c = centers[g]
            for i in range(lo[g], hi[g]):
                u = (v[i] - c) / h
                if kernel_id == 0:
                    w = 0.5 if fabs(u) <= 1.0 else 0.0
                elif kernel_id == 1:
                    w = 0.75 * (1.0 - u * u)
                    if w < 0.0:
                        w = 0.0
                else:
                    w = exp(-0.5 * u * u) / _SQRT_2PI
                if w <= 0.0:
                    continue
                cnt[g] += 1
                t = w * inv_h
                p = phi[i]
                S[g, 0] += t
                R[g, 0] += t * p
                for k in range(1, n_s):
                    t *= u
                    S[g, k] += t
                    if k <= degree:
                        R[g, k] += t * p
    return S_arr, R_arr, cnt_arr
