"""Kernel backend selection.

Two interchangeable backends implement the hot kernels (matmul, row softmax,
rotary application): a compiled Cython core and a pure-Python/numpy
reference. Both follow the accumulation-order contract documented in
_pyref.py and produce bit-identical float64 results.

Selection happens once at import: the compiled core if it built, otherwise
the reference. Set EDVTLAB_KERNELS=python or EDVTLAB_KERNELS=compiled to
force a backend (compiled raises if the extension is unavailable).
"""

import os

import numpy as np

from . import _pyref

_choice = os.environ.get("EDVTLAB_KERNELS", "").strip().lower()

if _choice == "python":
    _impl = _pyref
    BACKEND = "python"
elif _choice == "compiled":
    from . import _core as _impl  # noqa: F401

    BACKEND = "compiled"
elif _choice == "":
    try:
        from . import _core as _impl  # noqa: F401

        BACKEND = "compiled"
    except ImportError:
        _impl = _pyref
        BACKEND = "python"
else:
    raise RuntimeError(
        "EDVTLAB_KERNELS must be 'python' or 'compiled', got %r" % _choice
    )


def _c64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def matmul(a, b):
    """C = A @ B for float64 2-D arrays."""
    a = _c64(a)
    b = _c64(b)
    out = np.empty((a.shape[0], b.shape[1]), dtype=np.float64)
    _impl.matmul(a, b, out)
    return out


def softmax_rows(x, mask):
    """Row softmax with a boolean keep-mask; masked entries come out 0.0."""
    x = _c64(x)
    mask = np.ascontiguousarray(mask, dtype=np.uint8)
    out = np.empty_like(x)
    _impl.softmax_rows(x, mask, out)
    return out


def rotary(x, cos_table, sin_table, positions):
    """Rotate even/odd pairs of each row by its position's table angles.

    positions is int64, one entry per row; values <= 0 copy the row
    unchanged (0 is a true identity rotation, -1 is the no-rotation
    sentinel).
    """
    x = _c64(x)
    positions = np.ascontiguousarray(positions, dtype=np.int64)
    out = np.empty_like(x)
    _impl.rotary(x, _c64(cos_table), _c64(sin_table), positions, out)
    return out
