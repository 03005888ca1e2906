"""Mixed-modality decoder: sequence assembly, forward pass, greedy decoding.

A MixedSequence is an ordered row of slots, each either a visual token
(a model-space vector from the projector) or a text token id. Assembly puts
the visual block first in frame-major order, then the prompt ids. Slot
indices are the absolute positions handed to attention; text tokens keep
their absolute index even though a visual prefix sits before them.

The decoder is a pre-norm residual stack: x += attn(norm(x)) followed by
x += ffn(norm(x)) per layer, a final norm, then the vocabulary head. The
head is an independent matrix by default; tie_head reuses the transposed
embedding instead.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .attention import AttentionParams, ModalityMask, PositionalStrategy, attention_forward
from .numerics import (
    Tensor,
    add,
    concat_rows,
    gather_rows,
    gaussian_init,
    matmul,
    reshape,
    rms_norm,
    silu,
    slice_rows,
    transpose,
)
from .rope import RotaryTable


class VisualSlot:
    """One visual token: a (1, model_dim) model-space row."""

    __slots__ = ("vector",)

    def __init__(self, vector):
        if not isinstance(vector, Tensor) or vector.ndim != 2 or vector.shape[0] != 1:
            raise ValueError("visual slot needs a (1, model_dim) Tensor")
        self.vector = vector

    is_visual = True


class TextSlot:
    """One text token id."""

    __slots__ = ("token_id",)

    def __init__(self, token_id):
        token_id = int(token_id)
        if token_id < 0:
            raise ValueError("token id must be non-negative, got %d" % token_id)
        self.token_id = token_id

    is_visual = False


class MixedSequence:
    """Immutable ordered slots; append returns a new sequence."""

    __slots__ = ("_slots",)

    def __init__(self, slots):
        slots = tuple(slots)
        if not slots:
            raise ValueError("MixedSequence needs at least one slot")
        for s in slots:
            if not isinstance(s, (VisualSlot, TextSlot)):
                raise TypeError("slots must be VisualSlot or TextSlot")
        self._slots = slots

    @property
    def slots(self):
        return self._slots

    def __len__(self):
        return len(self._slots)

    def __getitem__(self, i):
        return self._slots[i]

    def modality_mask(self):
        return ModalityMask([s.is_visual for s in self._slots])

    def positions(self):
        return list(range(len(self._slots)))

    def text_ids(self):
        return [s.token_id for s in self._slots if not s.is_visual]

    def append_text(self, token_id):
        return MixedSequence(self._slots + (TextSlot(token_id),))


def assemble(visual_tokens, prompt_ids):
    """Visual-prefix layout: all visual tokens (frame-major), then the prompt.

    visual_tokens is (m, k, model_dim) or None for a text-only sequence.
    """
    prompt_ids = [int(t) for t in prompt_ids]
    slots = []
    if visual_tokens is not None:
        if not isinstance(visual_tokens, Tensor) or visual_tokens.ndim != 3:
            raise ValueError("visual_tokens must be a 3-D (m, k, model_dim) Tensor")
        m, k, model_dim = visual_tokens.shape
        flat = reshape(visual_tokens, (m * k, model_dim))
        for i in range(m * k):
            slots.append(VisualSlot(slice_rows(flat, i, i + 1)))
    if not slots and not prompt_ids:
        raise ValueError("assemble needs visual tokens, prompt ids, or both")
    for t in prompt_ids:
        slots.append(TextSlot(t))
    return MixedSequence(slots)


@dataclass(frozen=True)
class DecoderConfig:
    vocab_size: int
    layers: int
    heads: int
    head_dim: int
    ffn_dim: int
    strategy: PositionalStrategy = PositionalStrategy.EDVT
    tie_head: bool = False
    norm_eps: float = 1e-6
    rope_base: float = 10000.0
    max_positions: int = 512
    init_scale: float = 0.02

    def __post_init__(self):
        if self.vocab_size < 1:
            raise ValueError("vocab_size must be >= 1, got %d" % self.vocab_size)
        if self.layers < 1:
            raise ValueError("layers must be >= 1, got %d" % self.layers)
        if self.heads < 1:
            raise ValueError("heads must be >= 1, got %d" % self.heads)
        if self.head_dim < 2 or self.head_dim % 2 != 0:
            raise ValueError(
                "head_dim must be a positive even number, got %d" % self.head_dim
            )
        if self.ffn_dim < 1:
            raise ValueError("ffn_dim must be >= 1, got %d" % self.ffn_dim)
        if self.max_positions < 1:
            raise ValueError("max_positions must be >= 1, got %d" % self.max_positions)
        if not isinstance(self.strategy, PositionalStrategy):
            object.__setattr__(
                self, "strategy", PositionalStrategy.from_name(self.strategy)
            )

    @property
    def model_dim(self):
        return self.heads * self.head_dim


class _LayerParams:
    FIELDS = ("w_ffn1", "w_ffn2", "g_attn", "g_ffn")

    def __init__(self, rng, config):
        d = config.model_dim
        self.attn = AttentionParams.init(rng, config.heads, config.head_dim, config.init_scale)
        self.w_ffn1 = gaussian_init(rng, (d, config.ffn_dim), config.init_scale)
        self.w_ffn2 = gaussian_init(rng, (config.ffn_dim, d), config.init_scale)
        self.g_attn = Tensor.ones((1, d))
        self.g_ffn = Tensor.ones((1, d))


class _NamedView:
    """Registry adapter exposing a name subset of a parameter container."""

    def __init__(self, container, names):
        self._container = container
        self._names = tuple(names)

    def named_tensors(self):
        full = self._container.named_tensors()
        return {n: full[n] for n in self._names}

    def set_tensor(self, name, value):
        if name not in self._names:
            raise KeyError("tensor %r is outside this view" % name)
        self._container.set_tensor(name, value)


class DecoderParams:
    """All decoder weights plus the rotary table (a constant, not a weight)."""

    def __init__(self, config, rng):
        if not isinstance(config, DecoderConfig):
            raise TypeError("config must be a DecoderConfig")
        self.config = config
        d = config.model_dim
        self.embedding = gaussian_init(rng, (config.vocab_size, d), config.init_scale)
        self.layers = [_LayerParams(rng, config) for _ in range(config.layers)]
        self.g_final = Tensor.ones((1, d))
        self.head = (
            None
            if config.tie_head
            else gaussian_init(rng, (d, config.vocab_size), config.init_scale)
        )
        self.table = RotaryTable(config.head_dim, config.max_positions, config.rope_base)

    def named_tensors(self):
        named = {"embedding": self.embedding, "g_final": self.g_final}
        for i, layer in enumerate(self.layers):
            for attn_name, t in layer.attn.named_tensors().items():
                named["layers.%d.attn.%s" % (i, attn_name)] = t
            for f in _LayerParams.FIELDS:
                named["layers.%d.%s" % (i, f)] = getattr(layer, f)
        if self.head is not None:
            named["head"] = self.head
        return named

    def set_tensor(self, name, value):
        if name == "embedding":
            if value.shape != self.embedding.shape:
                raise ValueError("shape mismatch for embedding")
            self.embedding = value
            return
        if name == "g_final":
            if value.shape != self.g_final.shape:
                raise ValueError("shape mismatch for g_final")
            self.g_final = value
            return
        if name == "head":
            if self.head is None:
                raise KeyError("tied head has no head tensor")
            if value.shape != self.head.shape:
                raise ValueError("shape mismatch for head")
            self.head = value
            return
        parts = name.split(".")
        if len(parts) >= 3 and parts[0] == "layers":
            layer = self.layers[int(parts[1])]
            if parts[2] == "attn" and len(parts) == 4:
                layer.attn.set_tensor(parts[3], value)
                return
            if len(parts) == 3 and parts[2] in _LayerParams.FIELDS:
                current = getattr(layer, parts[2])
                if value.shape != current.shape:
                    raise ValueError("shape mismatch for %s" % name)
                setattr(layer, parts[2], value)
                return
        raise KeyError("no decoder tensor named %r" % name)

    def load_named(self, named):
        for name in self.named_tensors():
            if name not in named:
                raise KeyError("checkpoint is missing decoder tensor %r" % name)
            self.set_tensor(name, named[name])

    def registry_views(self):
        """Three freezable views: decoder body, embeddings, head (if untied)."""
        body = [
            n for n in self.named_tensors() if n not in ("embedding", "head")
        ]
        views = {
            "decoder": _NamedView(self, body),
            "embeddings": _NamedView(self, ["embedding"]),
        }
        if self.head is not None:
            views["head"] = _NamedView(self, ["head"])
        return views


def decoder_forward(params, seq, strategy=None, collect_traces=False):
    """Logits for every slot; optionally the per-layer attention traces."""
    if not isinstance(seq, MixedSequence):
        raise TypeError("seq must be a MixedSequence")
    config = params.config
    if strategy is None:
        strategy = config.strategy
    elif not isinstance(strategy, PositionalStrategy):
        strategy = PositionalStrategy.from_name(strategy)
    n = len(seq)
    if n > config.max_positions:
        raise ValueError(
            "sequence length %d exceeds max_positions %d" % (n, config.max_positions)
        )
    rows = []
    for slot in seq.slots:
        if slot.is_visual:
            if slot.vector.shape[1] != config.model_dim:
                raise ValueError("visual slot width does not match model_dim")
            rows.append(slot.vector)
        else:
            if slot.token_id >= config.vocab_size:
                raise ValueError(
                    "token id %d outside vocab of %d" % (slot.token_id, config.vocab_size)
                )
            rows.append(gather_rows(params.embedding, [slot.token_id]))
    x = concat_rows(rows) if len(rows) > 1 else rows[0]
    mask = seq.modality_mask()
    positions = seq.positions()

    traces = []
    for layer in params.layers:
        a = rms_norm(x, layer.g_attn, config.norm_eps)
        attn_out, trace = attention_forward(
            layer.attn, a, mask, positions, strategy, params.table
        )
        x = add(x, attn_out)
        b = rms_norm(x, layer.g_ffn, config.norm_eps)
        x = add(x, matmul(silu(matmul(b, layer.w_ffn1)), layer.w_ffn2))
        if collect_traces:
            traces.append(trace)

    x = rms_norm(x, params.g_final, config.norm_eps)
    head = params.head if params.head is not None else transpose(params.embedding)
    logits = matmul(x, head)
    if collect_traces:
        return logits, traces
    return logits


def greedy_decode(params, seq, max_new_tokens, stop_id):
    """Greedy argmax decoding; ties resolve to the smallest token id.

    Returns the emitted token ids, including the stop id when it fires.
    """
    max_new_tokens = int(max_new_tokens)
    stop_id = int(stop_id)
    if max_new_tokens < 1:
        raise ValueError("max_new_tokens must be >= 1, got %d" % max_new_tokens)
    if not (0 <= stop_id < params.config.vocab_size):
        raise ValueError("stop_id %d outside vocab" % stop_id)
    if len(seq) + max_new_tokens > params.config.max_positions:
        raise ValueError(
            "decoding to length %d exceeds max_positions %d"
            % (len(seq) + max_new_tokens, params.config.max_positions)
        )
    emitted = []
    for _ in range(max_new_tokens):
        logits = decoder_forward(params, seq)
        last = logits.array[-1]
        token = int(np.argmax(last))
        emitted.append(token)
        if token == stop_id:
            break
        seq = seq.append_text(token)
    return emitted


# --------------------------------------------------------------------------
# checkpoints: a flat named-tensor container, fixed little-endian layout

_CKPT_MAGIC = b"EDCP"
_CKPT_VERSION = 1


def save_checkpoint(path, named):
    """Write {name: Tensor} to disk; round-trips bit for bit."""
    items = sorted(named.items())
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sII", _CKPT_MAGIC, _CKPT_VERSION, len(items)))
        for name, tensor in items:
            if not isinstance(tensor, Tensor):
                raise TypeError("checkpoint values must be Tensors (%r)" % name)
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            shape = tensor.shape
            fh.write(struct.pack("<B", len(shape)))
            fh.write(struct.pack("<%dI" % len(shape), *shape))
            data = np.ascontiguousarray(tensor.array, dtype="<f8")
            fh.write(data.tobytes())


def load_checkpoint(path):
    """Read a checkpoint back into {name: Tensor}."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12:
        raise ValueError("checkpoint file is truncated")
    magic, version, count = struct.unpack_from("<4sII", blob, 0)
    if magic != _CKPT_MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    if version != _CKPT_VERSION:
        raise ValueError("unsupported checkpoint version %d" % version)
    at = 12
    named = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, at)
        at += 2
        name = blob[at : at + name_len].decode("utf-8")
        at += name_len
        (ndim,) = struct.unpack_from("<B", blob, at)
        at += 1
        shape = struct.unpack_from("<%dI" % ndim, blob, at)
        at += 4 * ndim
        n = 1
        for s in shape:
            n *= s
        end = at + 8 * n
        if end > len(blob):
            raise ValueError("checkpoint file is truncated")
        arr = np.frombuffer(blob[at:end], dtype="<f8").reshape(shape)
        named[name] = Tensor._wrap(np.ascontiguousarray(arr.astype(np.float64)))
        at = end
    if at != len(blob):
        raise ValueError("checkpoint has %d trailing bytes" % (len(blob) - at))
    return named
