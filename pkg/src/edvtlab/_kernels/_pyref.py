"""Pure-Python/numpy reference kernels.

These define the numerical semantics of the hot kernels; the compiled
backend in _core.pyx reproduces them bit for bit. The contract for every
kernel is a fixed, sequential accumulation order:

* matmul: out[i, j] = sum over t (ascending) of a[i, t] * b[t, j], starting
  from 0.0. No FMA, no blocking, no pairwise reduction.
* softmax rows: per row, max over unmasked entries, libm exp of the shifted
  values, ascending-index sum, then one divide per entry. Masked entries are
  exactly 0.0. A fully masked row is an error.
* rotary: per row, position p selects a cos/sin table row; pairs (2c, 2c+1)
  map through (e*cos - o*sin, e*sin + o*cos). p == 0 and the p == -1
  "identity" sentinel copy the row verbatim (no arithmetic, no -0.0 noise).

math.exp is used rather than np.exp on purpose: vectorized exp may differ
from libm by an ulp, and the compiled backend calls libc exp.
"""

import math

import numpy as np


def matmul(a, b, out):
    n_inner = a.shape[1]
    out[:, :] = 0.0
    for t in range(n_inner):
        # Broadcasting one rank-1 update per inner index keeps the
        # per-element accumulation order identical to the compiled loop.
        out += a[:, t : t + 1] * b[t : t + 1, :]
    return out


def softmax_rows(x, mask, out):
    n_rows, n_cols = x.shape
    for i in range(n_rows):
        row = x[i]
        live = mask[i]
        hi = -math.inf
        for j in range(n_cols):
            if live[j] and row[j] > hi:
                hi = row[j]
        if hi == -math.inf:
            raise ValueError("softmax_rows: row %d is fully masked" % i)
        total = 0.0
        e = out[i]
        for j in range(n_cols):
            if live[j]:
                v = math.exp(row[j] - hi)
                e[j] = v
                total += v
            else:
                e[j] = 0.0
        for j in range(n_cols):
            if live[j]:
                e[j] = e[j] / total
    return out


def rotary(x, cos_table, sin_table, positions, out):
    n_rows = x.shape[0]
    half = x.shape[1] // 2
    for i in range(n_rows):
        p = positions[i]
        if p <= 0:
            out[i, :] = x[i, :]
            continue
        e = x[i, 0::2]
        o = x[i, 1::2]
        c = cos_table[p, :half]
        s = sin_table[p, :half]
        out[i, 0::2] = e * c - o * s
        out[i, 1::2] = e * s + o * c
    return out
