"""Rotary position tables and their application.

A RotaryTable precomputes cos/sin of angle(pos, i) = pos * base^(-2i/d) for
every position up to max_positions and every even/odd channel pair i < d/2.
apply_rotary rotates each row of a matrix by its own position's angles;
rotations are norm-preserving, and the similarity of two rotated vectors
depends only on their position difference (checked, not assumed, by
relative_similarity_check and the test suite).

Position 0 is the identity rotation and is applied as an exact row copy.
Rows may also opt out of rotation entirely via the -1 sentinel used by the
selective variant; that too is an exact copy.
"""

import numpy as np

from . import _kernels as _k
from .numerics import Tensor, _record

NO_ROTATION = -1


class RotaryTable:
    """Precomputed cos/sin tables, shape [max_positions, head_dim/2]."""

    def __init__(self, head_dim, max_positions, base=10000.0):
        head_dim = int(head_dim)
        max_positions = int(max_positions)
        base = float(base)
        if head_dim < 2 or head_dim % 2 != 0:
            raise ValueError("head_dim must be a positive even number, got %d" % head_dim)
        if max_positions < 1:
            raise ValueError("max_positions must be >= 1, got %d" % max_positions)
        if not base > 0.0:
            raise ValueError("base must be > 0, got %g" % base)
        self.head_dim = head_dim
        self.max_positions = max_positions
        self.base = base
        half = head_dim // 2
        inv_freq = base ** (-2.0 * np.arange(half, dtype=np.float64) / head_dim)
        angles = np.outer(np.arange(max_positions, dtype=np.float64), inv_freq)
        self.cos = Tensor._wrap(np.ascontiguousarray(np.cos(angles)))
        self.sin = Tensor._wrap(np.ascontiguousarray(np.sin(angles)))

    def angle(self, pos, i):
        """angle(pos, i) = pos * base^(-2i/d), for reference and tests."""
        if not (0 <= pos < self.max_positions):
            raise ValueError("position %d outside table range [0, %d)" % (pos, self.max_positions))
        if not (0 <= i < self.head_dim // 2):
            raise ValueError("pair index %d outside [0, %d)" % (i, self.head_dim // 2))
        return float(pos) * self.base ** (-2.0 * i / self.head_dim)


def _check_positions(table, positions, n_rows, allow_sentinel):
    pos = np.asarray(positions, dtype=np.int64)
    if pos.ndim != 1 or pos.shape[0] != n_rows:
        raise ValueError(
            "positions must be a flat list with one entry per row (%d), got shape %r"
            % (n_rows, pos.shape)
        )
    low = NO_ROTATION if allow_sentinel else 0
    for p in pos:
        if p < low or p >= table.max_positions:
            raise ValueError(
                "position %d outside table range [0, %d)" % (int(p), table.max_positions)
            )
    return pos


def apply_rotary(table, x, positions):
    """Rotate each row of x by its position's angles.

    x is (n, head_dim); positions has one non-negative entry per row and
    must stay below the table's max_positions.
    """
    if not isinstance(x, Tensor) or x.ndim != 2:
        raise ValueError("apply_rotary expects a 2-D Tensor")
    if x.shape[1] != table.head_dim:
        raise ValueError(
            "row width %d does not match table head_dim %d" % (x.shape[1], table.head_dim)
        )
    pos = _check_positions(table, positions, x.shape[0], allow_sentinel=False)
    return _rotary_op(table, x, pos)


def apply_rotary_selected(table, x, positions):
    """apply_rotary that also accepts the -1 no-rotation sentinel per row."""
    if not isinstance(x, Tensor) or x.ndim != 2:
        raise ValueError("apply_rotary_selected expects a 2-D Tensor")
    if x.shape[1] != table.head_dim:
        raise ValueError(
            "row width %d does not match table head_dim %d" % (x.shape[1], table.head_dim)
        )
    pos = _check_positions(table, positions, x.shape[0], allow_sentinel=True)
    return _rotary_op(table, x, pos)


def _rotary_op(table, x, pos):
    out = Tensor._wrap(_k.rotary(x.array, table.cos.array, table.sin.array, pos))
    _record("rotary_rows", (x,), out, {"table": table, "positions": pos})
    return out


def relative_similarity_check(table, q, k, m, n):
    """Dot product of q rotated to position m with k rotated to position n.

    Equals (up to rounding) the same dot with both positions shifted by any
    common offset; the test suite pins that property down.
    """
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    k = np.asarray(k, dtype=np.float64).reshape(-1)
    if q.shape[0] != table.head_dim or k.shape[0] != table.head_dim:
        raise ValueError("q and k must have table head_dim entries")
    if not (0 <= m < table.max_positions and 0 <= n < table.max_positions):
        raise ValueError("positions outside table range")
    qm = _k.rotary(
        np.ascontiguousarray(q.reshape(1, -1)),
        table.cos.array,
        table.sin.array,
        np.array([m], dtype=np.int64),
    )
    kn = _k.rotary(
        np.ascontiguousarray(k.reshape(1, -1)),
        table.cos.array,
        table.sin.array,
        np.array([n], dtype=np.int64),
    )
    return float(np.dot(qm[0], kn[0]))
