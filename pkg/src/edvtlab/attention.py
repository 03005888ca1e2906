"""Causal multi-head attention over mixed visual/text sequences.

The mechanism computes every head's logits twice: a plain plane (raw q.k,
no rotation anywhere) and a rotated plane (rotary applied to a per-strategy
subset of query/key rows). A column select by key modality then merges the
two planes before the causal softmax, so a text query attends to visual
keys through position-free logits while text-to-text logits keep their
relative-position encoding.

The five strategies differ only in (a) which rows get rotated at which
table index and (b) the effective merge mask:

  nopos                no rotation either side; merge keeps the plain plane
  rope_all             rotate everything at its slot index; merge keeps the
                       rotated plane
  edvt                 rotate text rows only; merge selects by actual key
                       modality (visual keys from the plain plane)
  fix_vpe              text rows at their slot index, visual rows pinned to
                       index 0; merge keeps the rotated plane
  rope_query_edvt_key  all queries rotated, only text keys rotated; merge
                       keeps the rotated plane

Equal-distance behavior for edvt (text-query -> visual-key logits identical
no matter how much text sits in between) is a consequence of the plain
plane: both sides of those dot products are unrotated.
"""

from dataclasses import dataclass
from enum import Enum
import math

import numpy as np

from .numerics import (
    Tensor,
    _record,
    concat_cols,
    gaussian_init,
    matmul,
    scalar_mul,
    slice_cols,
    softmax_rows,
    transpose,
)
from .rope import NO_ROTATION, apply_rotary_selected

# Fault-injection switch for the harness mutation check: flipping it inverts
# the effective merge mask inside attention_forward, which must turn the
# equal-distance and degeneration checks red. Never set outside tests/check.
TAMPER_SWAP_MERGE = False


class PositionalStrategy(Enum):
    NOPOS = "nopos"
    ROPE_ALL = "rope_all"
    EDVT = "edvt"
    FIX_VPE = "fix_vpe"
    ROPE_QUERY_EDVT_KEY = "rope_query_edvt_key"

    @classmethod
    def from_name(cls, name):
        key = str(name).strip().lower().replace("-", "_")
        for member in cls:
            if member.value == key:
                return member
        raise ValueError(
            "unknown strategy %r (expected one of: %s)"
            % (name, ", ".join(m.value for m in cls))
        )


ALL_STRATEGIES = tuple(PositionalStrategy)


class ModalityMask:
    """Per-slot modality flags; True marks a visual slot."""

    __slots__ = ("_flags",)

    def __init__(self, flags):
        self._flags = tuple(bool(f) for f in flags)
        if not self._flags:
            raise ValueError("ModalityMask needs at least one slot")

    @property
    def flags(self):
        return self._flags

    def __len__(self):
        return len(self._flags)

    def __getitem__(self, i):
        return self._flags[i]

    def __iter__(self):
        return iter(self._flags)

    def __eq__(self, other):
        return isinstance(other, ModalityMask) and self._flags == other._flags

    def __hash__(self):
        return hash(self._flags)

    def visual_indices(self):
        return [i for i, f in enumerate(self._flags) if f]

    def text_indices(self):
        return [i for i, f in enumerate(self._flags) if not f]

    def as_bool_array(self):
        return np.array(self._flags, dtype=bool)

    def __repr__(self):
        return "ModalityMask(%s)" % "".join("V" if f else "T" for f in self._flags)


class AttentionParams:
    """Projection weights for one attention block; model_dim = heads * head_dim."""

    __slots__ = ("heads", "head_dim", "w_q", "w_k", "w_v", "w_o")

    def __init__(self, heads, head_dim, w_q, w_k, w_v, w_o):
        heads = int(heads)
        head_dim = int(head_dim)
        if heads < 1:
            raise ValueError("heads must be >= 1, got %d" % heads)
        if head_dim < 2 or head_dim % 2 != 0:
            raise ValueError("head_dim must be a positive even number, got %d" % head_dim)
        d = heads * head_dim
        for name, w in (("w_q", w_q), ("w_k", w_k), ("w_v", w_v), ("w_o", w_o)):
            if not isinstance(w, Tensor) or w.shape != (d, d):
                raise ValueError("%s must be a (%d, %d) Tensor" % (name, d, d))
        self.heads = heads
        self.head_dim = head_dim
        self.w_q = w_q
        self.w_k = w_k
        self.w_v = w_v
        self.w_o = w_o

    @property
    def model_dim(self):
        return self.heads * self.head_dim

    @classmethod
    def init(cls, rng, heads, head_dim, scale=0.02):
        d = int(heads) * int(head_dim)
        return cls(
            heads,
            head_dim,
            gaussian_init(rng, (d, d), scale),
            gaussian_init(rng, (d, d), scale),
            gaussian_init(rng, (d, d), scale),
            gaussian_init(rng, (d, d), scale),
        )

    def named_tensors(self):
        return {"w_q": self.w_q, "w_k": self.w_k, "w_v": self.w_v, "w_o": self.w_o}

    def set_tensor(self, name, value):
        if name not in ("w_q", "w_k", "w_v", "w_o"):
            raise KeyError("no attention tensor named %r" % name)
        current = getattr(self, name)
        if value.shape != current.shape:
            raise ValueError(
                "shape mismatch for %s: %r vs %r" % (name, value.shape, current.shape)
            )
        setattr(self, name, value)


@dataclass(frozen=True)
class AttentionTrace:
    """Per-head diagnostics captured during a forward pass.

    All planes are (heads, n, n), pre-softmax logits already scaled by
    1/sqrt(head_dim). weights is the post-softmax causal matrix. The trace
    is detached: reading it never touches the gradient tape.
    """

    weights: Tensor
    logits_plain: Tensor
    logits_rotated: Tensor
    logits_merged: Tensor
    strategy: PositionalStrategy
    mask: ModalityMask
    positions: tuple


def _rotation_positions(strategy, side, mask, positions):
    """Table index per row for the rotated plane; NO_ROTATION opts a row out."""
    n = len(mask)
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        visual = mask[i]
        p = positions[i]
        if strategy is PositionalStrategy.NOPOS:
            out[i] = NO_ROTATION
        elif strategy is PositionalStrategy.ROPE_ALL:
            out[i] = p
        elif strategy is PositionalStrategy.EDVT:
            out[i] = NO_ROTATION if visual else p
        elif strategy is PositionalStrategy.FIX_VPE:
            out[i] = 0 if visual else p
        elif strategy is PositionalStrategy.ROPE_QUERY_EDVT_KEY:
            if side == "q":
                out[i] = p
            else:
                out[i] = NO_ROTATION if visual else p
        else:  # pragma: no cover - enum is closed
            raise ValueError("unhandled strategy %r" % strategy)
    return out


def _effective_merge_flags(strategy, mask):
    """Column flags for the plane merge; True takes the plain-plane column."""
    n = len(mask)
    if strategy is PositionalStrategy.NOPOS:
        return np.ones(n, dtype=bool)
    if strategy is PositionalStrategy.EDVT:
        return mask.as_bool_array()
    return np.zeros(n, dtype=bool)


def merge_logits(plain, rotated, key_is_visual):
    """Column select between the two logit planes by key modality.

    Columns whose key is visual come verbatim from `plain`, the rest from
    `rotated`. An exact copy, never an arithmetic blend.
    """
    if not isinstance(plain, Tensor) or not isinstance(rotated, Tensor):
        raise TypeError("merge_logits expects Tensors")
    if plain.ndim != 2 or plain.shape != rotated.shape:
        raise ValueError(
            "merge_logits planes must be matching 2-D, got %r and %r"
            % ((plain.shape,), (rotated.shape,))
        )
    if isinstance(key_is_visual, ModalityMask):
        flags = key_is_visual.as_bool_array()
    else:
        flags = np.array([bool(f) for f in key_is_visual], dtype=bool)
    if flags.shape[0] != plain.shape[1]:
        raise ValueError(
            "merge mask has %d flags for %d key columns" % (flags.shape[0], plain.shape[1])
        )
    out = Tensor._wrap(np.where(flags[None, :], plain.array, rotated.array))
    _record("merge_logits", (plain, rotated), out, {"visual_cols": flags})
    return out


def attention_forward(params, x, mask, positions, strategy, table=None):
    """One causal multi-head attention pass.

    x is (n, model_dim); mask flags each slot's modality; positions are the
    absolute slot indices (strictly increasing, non-negative). Returns the
    attended output (n, model_dim) and an AttentionTrace. `table` may be
    omitted only when the strategy rotates nothing (nopos, or edvt on an
    all-visual sequence).
    """
    if not isinstance(x, Tensor) or x.ndim != 2:
        raise ValueError("attention input must be a 2-D Tensor")
    if not isinstance(mask, ModalityMask):
        mask = ModalityMask(mask)
    n = x.shape[0]
    if len(mask) != n:
        raise ValueError("mask has %d slots for %d rows" % (len(mask), n))
    if x.shape[1] != params.model_dim:
        raise ValueError(
            "input width %d does not match model_dim %d" % (x.shape[1], params.model_dim)
        )
    positions = [int(p) for p in positions]
    if len(positions) != n:
        raise ValueError("positions has %d entries for %d rows" % (len(positions), n))
    for i, p in enumerate(positions):
        if p < 0:
            raise ValueError("positions must be non-negative, got %d at slot %d" % (p, i))
        if i > 0 and p <= positions[i - 1]:
            raise ValueError("positions must be strictly increasing")
    if not isinstance(strategy, PositionalStrategy):
        strategy = PositionalStrategy.from_name(strategy)

    h, d = params.heads, params.head_dim
    inv_sqrt_d = 1.0 / math.sqrt(d)

    q_pos = _rotation_positions(strategy, "q", mask, positions)
    k_pos = _rotation_positions(strategy, "k", mask, positions)
    needs_rotation = bool(np.any(q_pos != NO_ROTATION) or np.any(k_pos != NO_ROTATION))
    if needs_rotation:
        if table is None:
            raise ValueError("strategy %s needs a rotary table" % strategy.value)
        if table.head_dim != d:
            raise ValueError(
                "table head_dim %d does not match attention head_dim %d"
                % (table.head_dim, d)
            )
        if max(positions) >= table.max_positions:
            raise ValueError(
                "position %d outside table range [0, %d)"
                % (max(positions), table.max_positions)
            )

    q = matmul(x, params.w_q)
    k = matmul(x, params.w_k)
    v = matmul(x, params.w_v)

    eff_flags = _effective_merge_flags(strategy, mask)
    if TAMPER_SWAP_MERGE:
        eff_flags = ~eff_flags
    causal = np.tril(np.ones((n, n), dtype=bool))

    head_outputs = []
    tr_plain, tr_rot, tr_merged, tr_weights = [], [], [], []
    for head in range(h):
        lo, hi = head * d, (head + 1) * d
        qh = slice_cols(q, lo, hi)
        kh = slice_cols(k, lo, hi)
        vh = slice_cols(v, lo, hi)

        logits_plain = scalar_mul(matmul(qh, transpose(kh)), inv_sqrt_d)
        if needs_rotation:
            qh_rot = apply_rotary_selected(table, qh, q_pos) if np.any(q_pos != NO_ROTATION) else qh
            kh_rot = apply_rotary_selected(table, kh, k_pos) if np.any(k_pos != NO_ROTATION) else kh
            logits_rot = scalar_mul(matmul(qh_rot, transpose(kh_rot)), inv_sqrt_d)
        else:
            logits_rot = logits_plain
        merged = merge_logits(logits_plain, logits_rot, eff_flags)
        weights = softmax_rows(merged, causal)
        head_outputs.append(matmul(weights, vh))

        tr_plain.append(logits_plain.array)
        tr_rot.append(logits_rot.array)
        tr_merged.append(merged.array)
        tr_weights.append(weights.array)

    out = matmul(concat_cols(head_outputs) if h > 1 else head_outputs[0], params.w_o)
    trace = AttentionTrace(
        weights=Tensor._wrap(np.ascontiguousarray(np.stack(tr_weights))),
        logits_plain=Tensor._wrap(np.ascontiguousarray(np.stack(tr_plain))),
        logits_rotated=Tensor._wrap(np.ascontiguousarray(np.stack(tr_rot))),
        logits_merged=Tensor._wrap(np.ascontiguousarray(np.stack(tr_merged))),
        strategy=strategy,
        mask=mask,
        positions=tuple(positions),
    )
    return out, trace


def visual_logit_row(trace, query_index, mask=None):
    """Merged logits from one query row to its causally reachable visual keys.

    Returns an (heads, n_visual) array; this is the quantity that stays
    bit-identical under edvt when text is inserted between the visual block
    and the query.
    """
    if mask is None:
        mask = trace.mask
    n = len(mask)
    if not (0 <= query_index < n):
        raise ValueError("query index %d out of range for %d slots" % (query_index, n))
    cols = [i for i in mask.visual_indices() if i <= query_index]
    if not cols:
        raise ValueError("query %d reaches no visual keys" % query_index)
    merged = trace.logits_merged.array
    return np.ascontiguousarray(merged[:, query_index, cols])
