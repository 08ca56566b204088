# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: grouped demeaning sweeps and cluster score sums.

Contracts mirror creditscan._kernels_py; see there for parameter docs.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()

BACKEND = "ext"


def demean_sweeps(double[:, ::1] data, double[::1] weights, codes_list,
                  sizes, double[::1] scales, double tol, long max_iter):
    cdef Py_ssize_t n = data.shape[0]
    cdef Py_ssize_t m = data.shape[1]
    cdef Py_ssize_t ndims = len(codes_list)
    cdef Py_ssize_t max_size = 0
    cdef Py_ssize_t d, i, c, g, it, size

    sizes_arr = np.asarray(sizes, dtype=np.int64)
    cdef long[::1] sizes_v = sizes_arr
    for d in range(ndims):
        if sizes_arr[d] > max_size:
            max_size = sizes_arr[d]

    # row-major stack of per-dimension code arrays
    codes_arr = np.empty((ndims, n), dtype=np.int64)
    for d in range(ndims):
        codes_arr[d, :] = codes_list[d]
    cdef long[:, ::1] codes = codes_arr

    # weight sums per group, per dimension (0-weight groups get divisor 1)
    wsums_arr = np.empty((ndims, max_size))
    cdef double[:, ::1] wsums = wsums_arr
    for d in range(ndims):
        size = sizes_v[d]
        for g in range(size):
            wsums[d, g] = 0.0
        for i in range(n):
            wsums[d, codes[d, i]] += weights[i]
        for g in range(size):
            if wsums[d, g] <= 0.0:
                wsums[d, g] = 1.0

    sums_arr = np.empty((max_size, m))
    cdef double[:, ::1] sums = sums_arr
    cdef double delta, col_delta, mean
    cdef long code

    delta = np.inf
    for it in range(1, max_iter + 1):
        delta = 0.0
        for d in range(ndims):
            size = sizes_v[d]
            for g in range(size):
                for c in range(m):
                    sums[g, c] = 0.0
            for i in range(n):
                code = codes[d, i]
                if weights[i] != 0.0:
                    for c in range(m):
                        sums[code, c] += weights[i] * data[i, c]
            for g in range(size):
                for c in range(m):
                    mean = sums[g, c] / wsums[d, g]
                    sums[g, c] = mean
                    col_delta = (mean if mean >= 0.0 else -mean) / scales[c]
                    if col_delta > delta:
                        delta = col_delta
            for i in range(n):
                code = codes[d, i]
                for c in range(m):
                    data[i, c] -= sums[code, c]
        if delta <= tol:
            return it, delta
    return max_iter, delta


def cluster_score_sums(double[:, ::1] scores, long[::1] codes, long n_clusters):
    cdef Py_ssize_t n = scores.shape[0]
    cdef Py_ssize_t k = scores.shape[1]
    cdef Py_ssize_t i, c
    cdef long g

    out_arr = np.zeros((n_clusters, k))
    cdef double[:, ::1] out = out_arr
    for i in range(n):
        g = codes[i]
        for c in range(k):
            out[g, c] += scores[i, c]
    return out_arr
