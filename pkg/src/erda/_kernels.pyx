# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled neighbourhood and counting kernels. Same contracts as _kernels_py."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def knn_indices(double[:, ::1] coords, Py_ssize_t k):
    cdef Py_ssize_t n = coords.shape[0], dim = coords.shape[1]
    cdef Py_ssize_t i, j, t, c, pos
    cdef double d, diff
    out = np.empty((n, k), dtype=np.int64)
    cdef cnp.int64_t[:, ::1] nbr = out
    best_d = np.empty(k, dtype=np.float64)
    best_j = np.empty(k, dtype=np.int64)
    cdef double[::1] bd = best_d
    cdef cnp.int64_t[::1] bj = best_j
    cdef Py_ssize_t filled
    for i in range(n):
        # self always ranks first
        bd[0] = -1.0
        bj[0] = i
        filled = 1
        for j in range(n):
            if j == i:
                continue
            d = 0.0
            for c in range(dim):
                diff = coords[j, c] - coords[i, c]
                d = d + diff * diff
            if filled == k and d >= bd[k - 1]:
                # equal distance loses to the lower index already held
                continue
            pos = filled if filled < k else k - 1
            while pos > 0 and bd[pos - 1] > d:
                if pos < k:
                    bd[pos] = bd[pos - 1]
                    bj[pos] = bj[pos - 1]
                pos -= 1
            bd[pos] = d
            bj[pos] = j
            if filled < k:
                filled += 1
        for t in range(k):
            nbr[i, t] = bj[t]
    return out


def neighbor_mean(double[:, ::1] x, cnp.int64_t[:, ::1] nbr):
    cdef Py_ssize_t n = nbr.shape[0], k = nbr.shape[1], dim = x.shape[1]
    cdef Py_ssize_t i, t, c, j
    out = np.zeros((n, dim), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef double inv = 1.0 / k
    for i in range(n):
        for t in range(k):
            j = nbr[i, t]
            for c in range(dim):
                o[i, c] += x[j, c]
        for c in range(dim):
            o[i, c] *= inv
    return out


def neighbor_mean_backward(double[:, ::1] grad, cnp.int64_t[:, ::1] nbr, Py_ssize_t n_src):
    cdef Py_ssize_t n = nbr.shape[0], k = nbr.shape[1], dim = grad.shape[1]
    cdef Py_ssize_t i, t, c, j
    out = np.zeros((n_src, dim), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef double inv = 1.0 / k
    for i in range(n):
        for t in range(k):
            j = nbr[i, t]
            for c in range(dim):
                o[j, c] += grad[i, c] * inv
    return out


def confusion(cnp.int64_t[::1] gt, cnp.int64_t[::1] pred, Py_ssize_t K):
    cdef Py_ssize_t i, n = gt.shape[0]
    out = np.zeros((K, K), dtype=np.int64)
    cdef cnp.int64_t[:, ::1] cm = out
    for i in range(n):
        cm[gt[i], pred[i]] += 1
    return out
