# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled segment kernels. Semantics mirror ``_kernels_py`` exactly."""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def segment_sum(const double[:, ::1] values, const long long[::1] segments, Py_ssize_t num_segments):
    cdef Py_ssize_t m = values.shape[0], d = values.shape[1], i, j, s
    out_arr = np.zeros((num_segments, d), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    with nogil:
        for i in range(m):
            s = segments[i]
            for j in range(d):
                out[s, j] += values[i, j]
    return out_arr


cdef _extreme(const double[:, ::1] values, const long long[::1] segments,
              Py_ssize_t num_segments, bint is_max):
    cdef Py_ssize_t m = values.shape[0], d = values.shape[1], i, j, s
    cdef double v
    out_arr = np.zeros((num_segments, d), dtype=np.float64)
    arg_arr = np.full((num_segments, d), -1, dtype=np.int64)
    cdef double[:, ::1] out = out_arr
    cdef long long[:, ::1] arg = arg_arr
    with nogil:
        for i in range(m):
            s = segments[i]
            for j in range(d):
                v = values[i, j]
                # strict comparison keeps the lowest row on ties
                if arg[s, j] < 0 or (is_max and v > out[s, j]) or (not is_max and v < out[s, j]):
                    out[s, j] = v
                    arg[s, j] = i
    return out_arr, arg_arr


def segment_max(values, segments, Py_ssize_t num_segments):
    return _extreme(values, segments, num_segments, True)


def segment_min(values, segments, Py_ssize_t num_segments):
    return _extreme(values, segments, num_segments, False)


def scatter_max_1d(const double[::1] values, const long long[::1] segments, Py_ssize_t num_segments):
    cdef Py_ssize_t m = values.shape[0], i, s
    out_arr = np.zeros(num_segments, dtype=np.float64)
    cdef double[::1] out = out_arr
    with nogil:
        for i in range(m):
            s = segments[i]
            if values[i] > out[s]:
                out[s] = values[i]
    return out_arr
