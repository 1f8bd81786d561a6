# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops. Signatures mirror :mod:`dspr._pure` exactly."""

import numpy as np
cimport numpy as cnp
from libc.math cimport log, ceil

cnp.import_array()

cdef double NEG = -1e30


def moving_average(const double[:, :] x, int kernel):
    """Edge-padded centred moving average along axis 0 of an (L, M) array."""
    cdef Py_ssize_t L = x.shape[0], M = x.shape[1]
    cdef Py_ssize_t p = (kernel - 1) // 2
    cdef Py_ssize_t i, j, m, lo, hi
    cdef double inv = 1.0 / kernel
    out_arr = np.empty((L, M), dtype=np.float64)
    cdef double[:, :] out = out_arr
    cdef double[:] acc = np.zeros(M, dtype=np.float64)
    # window for row 0: indices -p..p clipped to [0, L-1]
    for j in range(-p, p + 1):
        lo = 0 if j < 0 else (L - 1 if j > L - 1 else j)
        for m in range(M):
            acc[m] += x[lo, m]
    for m in range(M):
        out[0, m] = acc[m] * inv
    for i in range(1, L):
        lo = i - p - 1
        hi = i + p
        lo = 0 if lo < 0 else (L - 1 if lo > L - 1 else lo)
        hi = 0 if hi < 0 else (L - 1 if hi > L - 1 else hi)
        for m in range(M):
            acc[m] += x[hi, m] - x[lo, m]
            out[i, m] = acc[m] * inv
    return out_arr


def moving_average_adjoint(const double[:, :] g, int kernel):
    """Transpose of :func:`moving_average` applied to an upstream gradient.

    Interior rows collect a windowed sum of ``g`` (prefix sums); the first and
    last rows also collect every clipped out-of-range tap.
    """
    cdef Py_ssize_t L = g.shape[0], M = g.shape[1]
    cdef Py_ssize_t p = (kernel - 1) // 2
    cdef Py_ssize_t i, s, m, lo, hi, n_lo, n_hi
    cdef double inv = 1.0 / kernel
    out_arr = np.zeros((L, M), dtype=np.float64)
    cdef double[:, :] out = out_arr
    pre_arr = np.zeros((L + 1, M), dtype=np.float64)
    cdef double[:, :] pre = pre_arr
    for i in range(L):
        for m in range(M):
            pre[i + 1, m] = pre[i, m] + g[i, m]
    for s in range(L):
        lo = s - p if s - p > 0 else 0
        hi = s + p if s + p < L - 1 else L - 1
        for m in range(M):
            out[s, m] = (pre[hi + 1, m] - pre[lo, m]) * inv
    for i in range(L):
        n_lo = p - i                  # taps j < 0 clamp onto row 0
        n_hi = i + p - (L - 1)        # taps j > L-1 clamp onto the last row
        if n_lo > 0:
            for m in range(M):
                out[0, m] += n_lo * g[i, m] * inv
        if n_hi > 0:
            for m in range(M):
                out[L - 1, m] += n_hi * g[i, m] * inv
    return out_arr


def window_bias(const double[:, :, :] tau, Py_ssize_t n_queries):
    """Additive attention bias for the last ``n_queries`` query steps.

    ``tau`` is (B, T, C). Returns ``bias`` and ``dbias_dtau``, both (B, C, Q, T).
    """
    cdef Py_ssize_t B = tau.shape[0], T = tau.shape[1], C = tau.shape[2]
    cdef Py_ssize_t Q = n_queries
    cdef Py_ssize_t b, c, q, t, k, d
    cdef double tt, frac
    bias_arr = np.full((B, C, Q, T), NEG, dtype=np.float64)
    dbias_arr = np.zeros((B, C, Q, T), dtype=np.float64)
    cdef double[:, :, :, :] bias = bias_arr
    cdef double[:, :, :, :] dbias = dbias_arr
    for b in range(B):
        for c in range(C):
            for q in range(Q):
                t = T - Q + q
                tt = tau[b, t, c]
                for k in range(t + 1):
                    d = t - k
                    frac = tt - d + 1.0
                    if frac >= 1.0:
                        bias[b, c, q, k] = 0.0
                    elif frac > 0.0:
                        bias[b, c, q, k] = log(frac)
                        dbias[b, c, q, k] = 1.0 / frac
    return bias_arr, dbias_arr
