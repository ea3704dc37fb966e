# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loop for chaotic-game point iteration.

Arithmetic is kept scalar and in the exact same order as the pure-Python
fallback in ``_ifs_fallback.py`` so both paths are bit-identical.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def iterate_points(double[:, :, ::1] a, double[:, ::1] b,
                   long long[::1] choices, double x0, double y0,
                   Py_ssize_t n_skip, double limit):
    """Run the point recurrence, discarding the first ``n_skip`` points.

    Returns (points, diverged_at); diverged_at is -1 on success.
    """
    cdef Py_ssize_t n_total = choices.shape[0]
    cdef Py_ssize_t n_out = n_total - n_skip
    out_arr = np.empty((n_out, 2), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double x = x0, y = y0, nx, ny
    cdef Py_ssize_t i, k
    for i in range(n_total):
        k = <Py_ssize_t> choices[i]
        nx = a[k, 0, 0] * x + a[k, 0, 1] * y + b[k, 0]
        ny = a[k, 1, 0] * x + a[k, 1, 1] * y + b[k, 1]
        x = nx
        y = ny
        if x > limit or x < -limit or y > limit or y < -limit:
            return out_arr, i
        if i >= n_skip:
            out[i - n_skip, 0] = x
            out[i - n_skip, 1] = y
    return out_arr, -1
