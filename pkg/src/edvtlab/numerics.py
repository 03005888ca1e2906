"""Float64 tensor core: storage, seeded RNG, and the primitive op set.

Every public op validates shapes, runs through the selected kernel backend
(or plain numpy for cheap plumbing), and reports itself to the active
gradient tape if one is open. Tensors are immutable: ops return new values,
and the backing arrays are write-protected.

Determinism contract: a fixed seed and fixed call sequence reproduce results
bit for bit on one machine with one build. Cross-machine bit equality is not
promised (libm differences), but the compiled and pure-Python kernel
backends are bit-identical to each other by construction.
"""

import math
import threading

import numpy as np

from . import _kernels as _k

# --------------------------------------------------------------------------
# gradient tape hook (per-thread: worker threads record onto their own tapes)


class _TapeStacks(threading.local):
    def __init__(self):
        self.stack = []


_TLS = _TapeStacks()


def _tape_stack():
    return _TLS.stack


def _record(op, inputs, output, ctx=None):
    stack = _TLS.stack
    if stack:
        stack[-1]._record(op, inputs, output, ctx if ctx is not None else {})


# --------------------------------------------------------------------------
# tensor


class Tensor:
    """Immutable row-major float64 array with shape validation.

    Rank >= 1 and every extent >= 1; zero-sized tensors are rejected at the
    door so downstream kernels never see them.
    """

    __slots__ = ("_a",)

    def __init__(self, data):
        arr = np.array(data, dtype=np.float64, order="C")
        self._init_checked(arr)

    def _init_checked(self, arr):
        if arr.ndim < 1:
            raise ValueError("Tensor rank must be >= 1; wrap scalars as shape [1]")
        for ext in arr.shape:
            if ext < 1:
                raise ValueError("Tensor extents must all be >= 1, got %r" % (arr.shape,))
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        arr.setflags(write=False)
        self._a = arr

    @classmethod
    def _wrap(cls, arr):
        """Fast path for op outputs: trusted contiguous float64 array."""
        t = cls.__new__(cls)
        arr.setflags(write=False)
        t._a = arr
        return t

    @property
    def array(self):
        """Read-only numpy view of the payload."""
        return self._a

    @property
    def shape(self):
        return tuple(self._a.shape)

    @property
    def ndim(self):
        return self._a.ndim

    @property
    def size(self):
        return int(self._a.size)

    def item(self):
        if self._a.size != 1:
            raise ValueError("item() needs a single-element tensor, shape %r" % (self.shape,))
        return float(self._a.reshape(-1)[0])

    def tolist(self):
        return self._a.tolist()

    @staticmethod
    def zeros(shape):
        return Tensor(np.zeros(shape, dtype=np.float64))

    @staticmethod
    def ones(shape):
        return Tensor(np.ones(shape, dtype=np.float64))

    @staticmethod
    def full(shape, value):
        return Tensor(np.full(shape, float(value), dtype=np.float64))

    @staticmethod
    def eye(n):
        return Tensor(np.eye(n, dtype=np.float64))

    def __repr__(self):
        flat = self._a.reshape(-1)
        head = ", ".join("%.6g" % v for v in flat[:4])
        tail = ", ..." if flat.size > 4 else ""
        return "Tensor(shape=%r, [%s%s])" % (list(self.shape), head, tail)

    # Arithmetic sugar; delegates to the recorded ops below.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scalar_mul(self, float(other))

    def __rmul__(self, other):
        return scalar_mul(self, float(other))

    def __neg__(self):
        return scalar_mul(self, -1.0)


def _need(t, name="operand"):
    if not isinstance(t, Tensor):
        raise TypeError("%s must be a Tensor, got %s" % (name, type(t).__name__))
    return t


def _need2d(t, name="operand"):
    _need(t, name)
    if t.ndim != 2:
        raise ValueError("%s must be 2-D, got shape %r" % (name, (t.shape,)))
    return t


# --------------------------------------------------------------------------
# seeded RNG

_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_U64 = (1 << 64) - 1


def _mix64(z):
    """Scalar SplitMix64 finalizer on Python ints."""
    z &= _U64
    z = ((z ^ (z >> 30)) * _MIX1) & _U64
    z = ((z ^ (z >> 27)) * _MIX2) & _U64
    return z ^ (z >> 31)


class SeededRng:
    """Counter-based SplitMix64 stream with Box-Muller gaussians.

    Draw i of stream s is mix(s + (i+1) * golden) where mix is the SplitMix64
    finalizer; the instance just advances a counter, so a fixed seed plus a
    fixed draw sequence is reproducible everywhere. Uniforms map the top 53
    bits to (0, 1] (never 0, so log is safe); gaussians are the trigonometric
    Box-Muller transform; integer draws reduce a 64-bit word modulo the
    bound, whose bias is negligible for desk-scale bounds.
    """

    def __init__(self, seed):
        if not isinstance(seed, int):
            raise TypeError("seed must be an int, got %s" % type(seed).__name__)
        self._seed = seed & _U64
        self._count = 0

    @property
    def seed(self):
        return self._seed

    @property
    def draws_used(self):
        return self._count

    def _u64(self, n):
        if n < 1:
            raise ValueError("draw count must be >= 1, got %d" % n)
        idx = np.arange(self._count + 1, self._count + n + 1, dtype=np.uint64)
        self._count += n
        z = (np.uint64(self._seed) + idx * np.uint64(_GOLDEN)).astype(np.uint64)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
        return z ^ (z >> np.uint64(31))

    def uniform(self, n):
        """n floats in (0, 1], as a plain ndarray."""
        u = self._u64(n)
        return ((u >> np.uint64(11)).astype(np.float64) + 1.0) * (2.0 ** -53)

    def gaussian(self, n):
        """n standard normal draws as a 1-D Tensor."""
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs)
        u1 = u[0::2]
        u2 = u[1::2]
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * math.pi * u2
        out = np.empty(2 * pairs, dtype=np.float64)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return Tensor._wrap(np.ascontiguousarray(out[:n]))

    def randint(self, bound):
        """One int in [0, bound)."""
        if bound < 1:
            raise ValueError("bound must be >= 1, got %d" % bound)
        return int(self._u64(1)[0] % np.uint64(bound))

    def randints(self, n, bound):
        """n ints in [0, bound) as a list."""
        if bound < 1:
            raise ValueError("bound must be >= 1, got %d" % bound)
        return [int(v % np.uint64(bound)) for v in self._u64(n)]

    def derive(self, tag):
        """Independent child stream; same (seed, tag) gives the same child."""
        if not isinstance(tag, int) or tag < 0:
            raise ValueError("derive tag must be a non-negative int")
        child = _mix64(self._seed ^ _mix64((tag + 1) * _GOLDEN))
        return SeededRng(child)


def gaussian_init(rng, shape, scale):
    """Gaussian tensor with std `scale`; scale must be strictly positive."""
    if not isinstance(rng, SeededRng):
        raise TypeError("rng must be a SeededRng")
    shape = tuple(int(s) for s in shape)
    if len(shape) < 1 or any(s < 1 for s in shape):
        raise ValueError("shape extents must all be >= 1, got %r" % (shape,))
    scale = float(scale)
    if not scale > 0.0:
        raise ValueError("scale must be > 0, got %g" % scale)
    n = 1
    for s in shape:
        n *= s
    vals = rng.gaussian(n).array * scale
    return Tensor._wrap(np.ascontiguousarray(vals.reshape(shape)))


# --------------------------------------------------------------------------
# primitive ops (each records itself on the active tape)


def matmul(a, b):
    """Matrix product of two 2-D tensors."""
    _need2d(a, "matmul lhs")
    _need2d(b, "matmul rhs")
    if a.shape[1] != b.shape[0]:
        raise ValueError(
            "matmul inner extents differ: %r vs %r" % ((a.shape,), (b.shape,))
        )
    out = Tensor._wrap(_k.matmul(a.array, b.array))
    _record("matmul", (a, b), out)
    return out


def softmax_rows(x, mask=None):
    """Row-wise softmax; optional keep-mask zeroes masked entries exactly.

    Each row is shifted by its unmasked max before exponentiation. Row sums
    over unmasked entries come out 1 up to rounding. A fully masked row is
    an error.
    """
    _need2d(x, "softmax input")
    if mask is None:
        m = np.ones(x.shape, dtype=bool)
    else:
        m = np.asarray(mask, dtype=bool)
        if m.shape != x.array.shape:
            raise ValueError(
                "mask shape %r does not match input %r" % (m.shape, (x.shape,))
            )
    out = Tensor._wrap(_k.softmax_rows(x.array, m.astype(np.uint8)))
    _record("softmax_rows", (x,), out, {"mask": m})
    return out


def _same_shape(a, b, opname):
    _need(a, opname + " lhs")
    _need(b, opname + " rhs")
    if a.shape != b.shape:
        raise ValueError(
            "%s needs matching shapes, got %r and %r" % (opname, (a.shape,), (b.shape,))
        )


def add(a, b):
    _same_shape(a, b, "add")
    out = Tensor._wrap(a.array + b.array)
    _record("add", (a, b), out)
    return out


def sub(a, b):
    _same_shape(a, b, "sub")
    out = Tensor._wrap(a.array - b.array)
    _record("sub", (a, b), out)
    return out


def mul(a, b):
    _same_shape(a, b, "mul")
    out = Tensor._wrap(a.array * b.array)
    _record("mul", (a, b), out)
    return out


def div(a, b):
    _same_shape(a, b, "div")
    out = Tensor._wrap(a.array / b.array)
    _record("div", (a, b), out)
    return out


def scalar_mul(a, c):
    _need(a, "scalar_mul operand")
    c = float(c)
    out = Tensor._wrap(a.array * c)
    _record("scalar_mul", (a,), out, {"c": c})
    return out


def scalar_add(a, c):
    _need(a, "scalar_add operand")
    c = float(c)
    out = Tensor._wrap(a.array + c)
    _record("scalar_add", (a,), out, {"c": c})
    return out


def transpose(a):
    _need2d(a, "transpose operand")
    out = Tensor._wrap(np.ascontiguousarray(a.array.T))
    _record("transpose", (a,), out)
    return out


def reshape(a, shape):
    _need(a, "reshape operand")
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise ValueError("reshape extents must all be >= 1, got %r" % (shape,))
    n = 1
    for s in shape:
        n *= s
    if n != a.size:
        raise ValueError("reshape size mismatch: %d -> %r" % (a.size, (shape,)))
    out = Tensor._wrap(np.ascontiguousarray(a.array.reshape(shape)))
    _record("reshape", (a,), out, {"old_shape": a.shape})
    return out


def slice_rows(a, start, stop):
    _need2d(a, "slice_rows operand")
    if not (0 <= start < stop <= a.shape[0]):
        raise ValueError(
            "row slice [%d:%d) out of range for %d rows" % (start, stop, a.shape[0])
        )
    out = Tensor._wrap(np.ascontiguousarray(a.array[start:stop, :]))
    _record("slice_rows", (a,), out, {"start": start, "stop": stop})
    return out


def slice_cols(a, start, stop):
    _need2d(a, "slice_cols operand")
    if not (0 <= start < stop <= a.shape[1]):
        raise ValueError(
            "col slice [%d:%d) out of range for %d cols" % (start, stop, a.shape[1])
        )
    out = Tensor._wrap(np.ascontiguousarray(a.array[:, start:stop]))
    _record("slice_cols", (a,), out, {"start": start, "stop": stop})
    return out


def concat_rows(parts):
    parts = tuple(parts)
    if not parts:
        raise ValueError("concat_rows needs at least one part")
    cols = None
    for p in parts:
        _need2d(p, "concat_rows part")
        if cols is None:
            cols = p.shape[1]
        elif p.shape[1] != cols:
            raise ValueError("concat_rows column mismatch")
    out = Tensor._wrap(np.concatenate([p.array for p in parts], axis=0))
    _record("concat_rows", parts, out, {"sizes": [p.shape[0] for p in parts]})
    return out


def concat_cols(parts):
    parts = tuple(parts)
    if not parts:
        raise ValueError("concat_cols needs at least one part")
    rows = None
    for p in parts:
        _need2d(p, "concat_cols part")
        if rows is None:
            rows = p.shape[0]
        elif p.shape[0] != rows:
            raise ValueError("concat_cols row mismatch")
    out = Tensor._wrap(np.concatenate([p.array for p in parts], axis=1))
    _record("concat_cols", parts, out, {"sizes": [p.shape[1] for p in parts]})
    return out


def gather_rows(a, indices):
    """Select rows by index (duplicates allowed); gradient scatter-adds."""
    _need2d(a, "gather_rows operand")
    idx = [int(i) for i in indices]
    if not idx:
        raise ValueError("gather_rows needs at least one index")
    for i in idx:
        if not (0 <= i < a.shape[0]):
            raise ValueError("row index %d out of range for %d rows" % (i, a.shape[0]))
    out = Tensor._wrap(np.ascontiguousarray(a.array[idx, :]))
    _record("gather_rows", (a,), out, {"indices": idx})
    return out


def row_sums(a):
    """Per-row sum as an (n, 1) tensor."""
    _need2d(a, "row_sums operand")
    out = Tensor._wrap(a.array.sum(axis=1, keepdims=True))
    _record("row_sums", (a,), out)
    return out


def expand_cols(a, n_cols):
    """Broadcast an (m, 1) tensor to (m, n_cols)."""
    _need2d(a, "expand_cols operand")
    if a.shape[1] != 1:
        raise ValueError("expand_cols needs an (m, 1) tensor, got %r" % (a.shape,))
    if n_cols < 1:
        raise ValueError("n_cols must be >= 1")
    out = Tensor._wrap(np.ascontiguousarray(np.broadcast_to(a.array, (a.shape[0], n_cols))))
    _record("expand_cols", (a,), out)
    return out


def expand_rows(a, n_rows):
    """Broadcast a (1, m) tensor to (n_rows, m)."""
    _need2d(a, "expand_rows operand")
    if a.shape[0] != 1:
        raise ValueError("expand_rows needs a (1, m) tensor, got %r" % (a.shape,))
    if n_rows < 1:
        raise ValueError("n_rows must be >= 1")
    out = Tensor._wrap(np.ascontiguousarray(np.broadcast_to(a.array, (n_rows, a.shape[1]))))
    _record("expand_rows", (a,), out)
    return out


def sqrt_elem(a):
    _need(a, "sqrt operand")
    if np.any(a.array < 0.0):
        raise ValueError("sqrt_elem needs non-negative values")
    out = Tensor._wrap(np.sqrt(a.array))
    _record("sqrt_elem", (a,), out)
    return out


def silu(a):
    """x * sigmoid(x); smooth everywhere, which keeps finite differences honest."""
    _need(a, "silu operand")
    s = 1.0 / (1.0 + np.exp(-a.array))
    out = Tensor._wrap(a.array * s)
    _record("silu", (a,), out, {"sigmoid": s})
    return out


def sum_all(a):
    """Total over all entries as a shape-[1] tensor."""
    _need(a, "sum_all operand")
    out = Tensor._wrap(np.array([a.array.sum()], dtype=np.float64))
    _record("sum_all", (a,), out)
    return out


def mean_all(a):
    return scalar_mul(sum_all(a), 1.0 / a.size)


def rms_norm(x, gain, eps=1e-6):
    """Root-mean-square normalization with a learnable per-channel gain.

    Composed from recorded primitives, so it differentiates without its own
    rule. gain is (1, m) for an (n, m) input.
    """
    _need2d(x, "rms_norm input")
    _need2d(gain, "rms_norm gain")
    if gain.shape != (1, x.shape[1]):
        raise ValueError(
            "gain must be (1, %d), got %r" % (x.shape[1], (gain.shape,))
        )
    m = x.shape[1]
    mean_sq = scalar_mul(row_sums(mul(x, x)), 1.0 / m)
    denom = sqrt_elem(scalar_add(mean_sq, float(eps)))
    normed = div(x, expand_cols(denom, m))
    return mul(normed, expand_rows(gain, x.shape[0]))


def cross_entropy(logits, target):
    """Negative log softmax probability of `target` for a (1, V) logit row.

    Computed via the shifted log-sum-exp so large logits cannot overflow.
    """
    _need2d(logits, "cross_entropy logits")
    if logits.shape[0] != 1:
        raise ValueError("cross_entropy expects a single (1, V) row")
    v = logits.shape[1]
    target = int(target)
    if not (0 <= target < v):
        raise ValueError("target %d out of range for %d logits" % (target, v))
    row = logits.array[0]
    hi = row.max()
    e = np.exp(row - hi)
    z = e.sum()
    loss = (hi + math.log(z)) - row[target]
    out = Tensor._wrap(np.array([loss], dtype=np.float64))
    _record("cross_entropy", (logits,), out, {"target": target, "probs": e / z})
    return out
