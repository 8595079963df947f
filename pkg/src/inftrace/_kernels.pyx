# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled ragged-row kernels used by the gather / mean_rows primitives."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def scatter_add_rows(const double[:, ::1] grad, const long[::1] index, Py_ssize_t n_rows):
    """out[index[i]] += grad[i] for every row i."""
    cdef Py_ssize_t i, j, r
    cdef Py_ssize_t n = grad.shape[0], d = grad.shape[1]
    out = np.zeros((n_rows, d), dtype=np.float64)
    cdef double[:, ::1] o = out
    for i in range(n):
        r = index[i]
        for j in range(d):
            o[r, j] += grad[i, j]
    return out


def segment_mean(const double[:, ::1] x, const long[::1] offsets):
    """Mean of rows offsets[s]:offsets[s+1] for every segment s."""
    cdef Py_ssize_t s, i, j, lo, hi
    cdef Py_ssize_t n_seg = offsets.shape[0] - 1, d = x.shape[1]
    cdef double n
    out = np.zeros((n_seg, d), dtype=np.float64)
    cdef double[:, ::1] o = out
    for s in range(n_seg):
        lo = offsets[s]
        hi = offsets[s + 1]
        for i in range(lo, hi):
            for j in range(d):
                o[s, j] += x[i, j]
        n = hi - lo
        for j in range(d):
            o[s, j] /= n
    return out


def segment_spread(const double[:, ::1] g, const long[::1] offsets):
    """Adjoint of segment_mean: row s of g, divided by its length, copied over the segment."""
    cdef Py_ssize_t s, i, j, lo, hi
    cdef Py_ssize_t n_seg = offsets.shape[0] - 1, d = g.shape[1]
    cdef double n
    out = np.empty((offsets[n_seg], d), dtype=np.float64)
    cdef double[:, ::1] o = out
    for s in range(n_seg):
        lo = offsets[s]
        hi = offsets[s + 1]
        n = hi - lo
        for i in range(lo, hi):
            for j in range(d):
                o[i, j] = g[s, j] / n
    return out
