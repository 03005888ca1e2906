"""Tape-based reverse-mode differentiation over the primitive op set.

A GradTape opened as a context manager records every primitive op executed
under it as (op name, input tensors, output tensor, ctx). backward walks the
record once in reverse, applying one vector-Jacobian rule per op and
accumulating cotangents by tensor identity. The rules work on raw ndarrays
and route their own matrix products and rotations through the kernel
backend, so no tape recursion and no dependence on BLAS reduction order.

Parameters live in a ParamRegistry of named groups; freezing a group leaves
its gradients computable but suppresses optimizer updates. fd_gradcheck
compares analytic gradients with central finite differences on a seeded
coordinate subset.
"""

import numpy as np

from . import _kernels as _k
from . import numerics
from .numerics import SeededRng, Tensor


class GradTape:
    """Records primitive ops; one tape per thread of execution."""

    def __init__(self):
        self._nodes = []

    def __enter__(self):
        numerics._tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        top = numerics._tape_stack().pop()
        if top is not self:  # pragma: no cover - misuse guard
            raise RuntimeError("tape stack corrupted: exited a tape that is not on top")
        return False

    def _record(self, op, inputs, output, ctx):
        self._nodes.append((op, inputs, output, ctx))

    def __len__(self):
        return len(self._nodes)

    def backward(self, loss):
        """Cotangents of `loss` (a single-element tensor) wrt every recorded input."""
        if not isinstance(loss, Tensor):
            raise TypeError("loss must be a Tensor")
        if loss.size != 1:
            raise ValueError("loss must have exactly one element, got shape %r" % (loss.shape,))
        grads = {id(loss): np.ones(loss.array.shape, dtype=np.float64)}
        for op, inputs, output, ctx in reversed(self._nodes):
            g = grads.pop(id(output), None)
            if g is None:
                continue
            parts = _VJP[op](inputs, output, ctx, g)
            for t, p in zip(inputs, parts):
                if p is None:
                    continue
                acc = grads.get(id(t))
                grads[id(t)] = p if acc is None else acc + p
        return Gradients(grads, self)


def backward(tape, loss):
    return tape.backward(loss)


class Gradients:
    """Lookup from tensor identity to its cotangent; absent means zero."""

    def __init__(self, by_id, tape):
        self._by_id = by_id
        self._tape = tape  # keeps recorded tensors (and their ids) alive

    def wrt(self, tensor):
        g = self._by_id.get(id(tensor))
        if g is None:
            return Tensor.zeros(tensor.shape)
        return Tensor._wrap(np.ascontiguousarray(g))

    def has(self, tensor):
        return id(tensor) in self._by_id


# --------------------------------------------------------------------------
# vector-Jacobian rules


def _vjp_matmul(inputs, output, ctx, g):
    a, b = inputs
    ga = _k.matmul(g, np.ascontiguousarray(b.array.T))
    gb = _k.matmul(np.ascontiguousarray(a.array.T), g)
    return (ga, gb)


def _vjp_softmax_rows(inputs, output, ctx, g):
    y = output.array
    dot = (g * y).sum(axis=1, keepdims=True)
    return (y * (g - dot),)


def _vjp_add(inputs, output, ctx, g):
    return (g, g)


def _vjp_sub(inputs, output, ctx, g):
    return (g, -g)


def _vjp_mul(inputs, output, ctx, g):
    a, b = inputs
    return (g * b.array, g * a.array)


def _vjp_div(inputs, output, ctx, g):
    a, b = inputs
    return (g / b.array, -g * output.array / b.array)


def _vjp_scalar_mul(inputs, output, ctx, g):
    return (g * ctx["c"],)


def _vjp_scalar_add(inputs, output, ctx, g):
    return (g,)


def _vjp_transpose(inputs, output, ctx, g):
    return (np.ascontiguousarray(g.T),)


def _vjp_reshape(inputs, output, ctx, g):
    return (g.reshape(ctx["old_shape"]),)


def _vjp_slice_rows(inputs, output, ctx, g):
    (a,) = inputs
    full = np.zeros(a.array.shape, dtype=np.float64)
    full[ctx["start"] : ctx["stop"], :] = g
    return (full,)


def _vjp_slice_cols(inputs, output, ctx, g):
    (a,) = inputs
    full = np.zeros(a.array.shape, dtype=np.float64)
    full[:, ctx["start"] : ctx["stop"]] = g
    return (full,)


def _vjp_concat_rows(inputs, output, ctx, g):
    parts = []
    at = 0
    for size in ctx["sizes"]:
        parts.append(g[at : at + size, :])
        at += size
    return tuple(parts)


def _vjp_concat_cols(inputs, output, ctx, g):
    parts = []
    at = 0
    for size in ctx["sizes"]:
        parts.append(g[:, at : at + size])
        at += size
    return tuple(parts)


def _vjp_gather_rows(inputs, output, ctx, g):
    (a,) = inputs
    full = np.zeros(a.array.shape, dtype=np.float64)
    np.add.at(full, ctx["indices"], g)
    return (full,)


def _vjp_row_sums(inputs, output, ctx, g):
    (a,) = inputs
    return (np.ascontiguousarray(np.broadcast_to(g, a.array.shape)),)


def _vjp_expand_cols(inputs, output, ctx, g):
    return (g.sum(axis=1, keepdims=True),)


def _vjp_expand_rows(inputs, output, ctx, g):
    return (g.sum(axis=0, keepdims=True),)


def _vjp_sqrt(inputs, output, ctx, g):
    return (g * 0.5 / output.array,)


def _vjp_silu(inputs, output, ctx, g):
    (a,) = inputs
    s = ctx["sigmoid"]
    return (g * (s * (1.0 + a.array * (1.0 - s))),)


def _vjp_sum_all(inputs, output, ctx, g):
    (a,) = inputs
    return (np.full(a.array.shape, float(g.reshape(-1)[0]), dtype=np.float64),)


def _vjp_cross_entropy(inputs, output, ctx, g):
    probs = ctx["probs"].copy()
    probs[ctx["target"]] -= 1.0
    return (probs[None, :] * float(g.reshape(-1)[0]),)


def _vjp_rotary_rows(inputs, output, ctx, g):
    # Transpose of a rotation is rotation by the negated angle; reuse the
    # kernel with a sign-flipped sin table. Sentinel rows pass through.
    table = ctx["table"]
    return (_k.rotary(g, table.cos.array, -table.sin.array, ctx["positions"]),)


def _vjp_merge_logits(inputs, output, ctx, g):
    flags = ctx["visual_cols"][None, :]
    return (np.where(flags, g, 0.0), np.where(flags, 0.0, g))


_VJP = {
    "matmul": _vjp_matmul,
    "softmax_rows": _vjp_softmax_rows,
    "add": _vjp_add,
    "sub": _vjp_sub,
    "mul": _vjp_mul,
    "div": _vjp_div,
    "scalar_mul": _vjp_scalar_mul,
    "scalar_add": _vjp_scalar_add,
    "transpose": _vjp_transpose,
    "reshape": _vjp_reshape,
    "slice_rows": _vjp_slice_rows,
    "slice_cols": _vjp_slice_cols,
    "concat_rows": _vjp_concat_rows,
    "concat_cols": _vjp_concat_cols,
    "gather_rows": _vjp_gather_rows,
    "row_sums": _vjp_row_sums,
    "expand_cols": _vjp_expand_cols,
    "expand_rows": _vjp_expand_rows,
    "sqrt_elem": _vjp_sqrt,
    "silu": _vjp_silu,
    "sum_all": _vjp_sum_all,
    "cross_entropy": _vjp_cross_entropy,
    "rotary_rows": _vjp_rotary_rows,
    "merge_logits": _vjp_merge_logits,
}


# --------------------------------------------------------------------------
# parameter registry


class _DictParams:
    """Adapter so a plain {name: Tensor} dict can live in the registry."""

    def __init__(self, d):
        self._d = d

    def named_tensors(self):
        return dict(self._d)

    def set_tensor(self, name, value):
        if name not in self._d:
            raise KeyError("no tensor named %r" % name)
        self._d[name] = value


class ParamRegistry:
    """Named parameter groups with per-group freeze flags."""

    def __init__(self):
        self._groups = {}
        self._frozen = set()

    def add_group(self, name, container, frozen=False):
        if name in self._groups:
            raise ValueError("group %r already registered" % name)
        if isinstance(container, dict):
            container = _DictParams(container)
        if not hasattr(container, "named_tensors") or not hasattr(container, "set_tensor"):
            raise TypeError("group container needs named_tensors()/set_tensor()")
        self._groups[name] = container
        if frozen:
            self._frozen.add(name)

    def groups(self):
        return list(self._groups)

    def has_group(self, name):
        return name in self._groups

    def named_tensors(self, group):
        return self._groups[group].named_tensors()

    def set_tensor(self, group, name, value):
        self._groups[group].set_tensor(name, value)

    def set_frozen(self, group, flag=True):
        if group not in self._groups:
            raise KeyError("no group named %r" % group)
        if flag:
            self._frozen.add(group)
        else:
            self._frozen.discard(group)

    def is_frozen(self, group):
        return group in self._frozen

    def trainable_groups(self):
        return [g for g in self._groups if g not in self._frozen]

    def all_parameters(self):
        for group, container in self._groups.items():
            for name, t in container.named_tensors().items():
                yield group, name, t

    def coord_count(self, group):
        return sum(t.size for t in self.named_tensors(group).values())


# --------------------------------------------------------------------------
# optimizers


class Sgd:
    """Plain gradient descent."""

    def __init__(self, lr):
        self.lr = float(lr)
        self.steps_taken = 0

    def step(self, registry, grads):
        for group in registry.trainable_groups():
            for name, t in registry.named_tensors(group).items():
                g = grads.wrt(t).array
                registry.set_tensor(group, name, Tensor._wrap(t.array - self.lr * g))
        self.steps_taken += 1


class Adam:
    """Adam with bias-corrected first/second moments."""

    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.steps_taken = 0
        self._m = {}
        self._v = {}

    def step(self, registry, grads):
        self.steps_taken += 1
        t = self.steps_taken
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for group in registry.trainable_groups():
            for name, p in registry.named_tensors(group).items():
                g = grads.wrt(p).array
                key = (group, name)
                m = self._m.get(key)
                if m is None:
                    m = np.zeros_like(g)
                    v = np.zeros_like(g)
                else:
                    v = self._v[key]
                m = self.beta1 * m + (1.0 - self.beta1) * g
                v = self.beta2 * v + (1.0 - self.beta2) * (g * g)
                self._m[key] = m
                self._v[key] = v
                update = (m / c1) / (np.sqrt(v / c2) + self.eps)
                registry.set_tensor(group, name, Tensor._wrap(p.array - self.lr * update))


def make_optimizer(kind, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    kind = str(kind).strip().lower()
    if kind == "sgd":
        return Sgd(lr)
    if kind == "adam":
        return Adam(lr, beta1, beta2, eps)
    raise ValueError("unknown optimizer %r (expected sgd or adam)" % kind)


def step(optimizer, registry, grads):
    optimizer.step(registry, grads)


# --------------------------------------------------------------------------
# finite-difference checking


def fd_gradcheck_report(f, registry, h=1e-5, coords_per_group=200, seed=20240901):
    """Central-difference check of d f / d theta on a seeded coordinate subset.

    f evaluates the scalar loss from the registry's current parameters and
    must build it from recorded ops. Every group is checked (frozen or not)
    on up to coords_per_group coordinates; returns {group: max relative
    error} with errors measured as |a - b| / max(1, |a|, |b|).
    """
    h = float(h)
    if not h > 0.0:
        raise ValueError("h must be > 0")
    with GradTape() as tape:
        loss = f()
    if not isinstance(loss, Tensor):
        raise TypeError("f must return a scalar Tensor")
    base_grads = tape.backward(loss)
    rng = SeededRng(seed)

    report = {}
    for group in registry.groups():
        named = registry.named_tensors(group)
        coords = []
        for name in sorted(named):
            for flat in range(named[name].size):
                coords.append((name, flat))
        if len(coords) > coords_per_group:
            chosen = set()
            while len(chosen) < coords_per_group:
                chosen.add(rng.randint(len(coords)))
            coords = [coords[i] for i in sorted(chosen)]
        worst = 0.0
        for name, flat in coords:
            original = registry.named_tensors(group)[name]
            analytic = float(base_grads.wrt(original).array.reshape(-1)[flat])

            bumped = original.array.copy()
            bumped.reshape(-1)[flat] += h
            registry.set_tensor(group, name, Tensor._wrap(bumped))
            up = f().item()

            bumped = original.array.copy()
            bumped.reshape(-1)[flat] -= h
            registry.set_tensor(group, name, Tensor._wrap(bumped))
            down = f().item()

            registry.set_tensor(group, name, original)
            fd = (up - down) / (2.0 * h)
            err = abs(analytic - fd) / max(1.0, abs(analytic), abs(fd))
            if err > worst:
                worst = err
        report[group] = worst
    return report


def fd_gradcheck(f, registry, h=1e-5, coords_per_group=200, seed=20240901):
    """Max relative error across every group; see fd_gradcheck_report."""
    report = fd_gradcheck_report(f, registry, h, coords_per_group, seed)
    return max(report.values()) if report else 0.0
