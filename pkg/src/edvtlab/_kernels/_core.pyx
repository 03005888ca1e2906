# Compiled twins of the reference kernels in _pyref.py.
#
# Bit-for-bit equality with the reference is a hard requirement, so every
# loop reproduces the reference accumulation order exactly: matmul sums the
# inner index t in ascending order element by element, softmax sums exps in
# ascending column order, and rotary applies (e*cos - o*sin, e*sin + o*cos)
# per pair. The build compiles with -ffp-contract=off so a*b+c never fuses
# into an FMA, and exp comes from libc (the reference uses math.exp, which
# is the same libm call).

from libc.math cimport exp, INFINITY

import numpy as np


def matmul(const double[:, ::1] a, const double[:, ::1] b, double[:, ::1] out):
    cdef Py_ssize_t m = a.shape[0]
    cdef Py_ssize_t k = a.shape[1]
    cdef Py_ssize_t n = b.shape[1]
    cdef Py_ssize_t i, t, j
    cdef double av
    with nogil:
        for i in range(m):
            for j in range(n):
                out[i, j] = 0.0
            for t in range(k):
                av = a[i, t]
                for j in range(n):
                    out[i, j] = out[i, j] + av * b[t, j]
    return np.asarray(out)


def softmax_rows(const double[:, ::1] x, const unsigned char[:, ::1] mask, double[:, ::1] out):
    cdef Py_ssize_t n_rows = x.shape[0]
    cdef Py_ssize_t n_cols = x.shape[1]
    cdef Py_ssize_t i, j
    cdef double hi, total, v
    cdef Py_ssize_t bad = -1
    with nogil:
        for i in range(n_rows):
            hi = -INFINITY
            for j in range(n_cols):
                if mask[i, j] and x[i, j] > hi:
                    hi = x[i, j]
            if hi == -INFINITY:
                bad = i
                break
            total = 0.0
            for j in range(n_cols):
                if mask[i, j]:
                    v = exp(x[i, j] - hi)
                    out[i, j] = v
                    total = total + v
                else:
                    out[i, j] = 0.0
            for j in range(n_cols):
                if mask[i, j]:
                    out[i, j] = out[i, j] / total
    if bad >= 0:
        raise ValueError("softmax_rows: row %d is fully masked" % bad)
    return np.asarray(out)


def rotary(const double[:, ::1] x, const double[:, ::1] cos_table, const double[:, ::1] sin_table,
           const long[::1] positions, double[:, ::1] out):
    cdef Py_ssize_t n_rows = x.shape[0]
    cdef Py_ssize_t half = x.shape[1] // 2
    cdef Py_ssize_t i, c
    cdef long p
    cdef double e, o, cv, sv
    with nogil:
        for i in range(n_rows):
            p = positions[i]
            if p <= 0:
                for c in range(2 * half):
                    out[i, c] = x[i, c]
                continue
            for c in range(half):
                e = x[i, 2 * c]
                o = x[i, 2 * c + 1]
                cv = cos_table[p, c]
                sv = sin_table[p, c]
                out[i, 2 * c] = e * cv - o * sv
                out[i, 2 * c + 1] = e * sv + o * cv
    return np.asarray(out)
