"""Frame-to-token projector: a small query transformer with optional chaining.

Each video frame arrives as l feature vectors. A bank of k learnable query
vectors runs through N blocks of (self-attention over the queries,
cross-attention into the frame's features, feed-forward), all pre-norm with
residuals, and the resulting k state vectors map through out_map into model
space, one visual token each.

Two chaining modes exist. independent: every frame's pass starts from the
learnable query bank, so frame t's tokens depend on frame t alone.
sequential: frame t's pass starts from frame t-1's pre-out_map state, so
tokens carry what happened earlier; the first frame starts from the bank.
"""

from enum import Enum

import numpy as np

import math

from .numerics import (
    Tensor,
    add,
    concat_rows,
    gaussian_init,
    matmul,
    reshape,
    rms_norm,
    scalar_mul,
    silu,
    softmax_rows,
    transpose,
)


class ChainingMode(Enum):
    INDEPENDENT = "independent"
    SEQUENTIAL = "sequential"

    @classmethod
    def from_name(cls, name):
        key = str(name).strip().lower().replace("-", "_")
        for member in cls:
            if member.value == key:
                return member
        raise ValueError(
            "unknown chaining mode %r (expected independent or sequential)" % (name,)
        )


class VideoFeatures:
    """A stack of t frames, each l feature vectors of width feat_dim."""

    __slots__ = ("_frames",)

    def __init__(self, frames):
        if not isinstance(frames, Tensor):
            frames = Tensor(frames)
        if frames.ndim != 3:
            raise ValueError("video features must be (frames, l, feat_dim) 3-D")
        self._frames = frames

    @property
    def tensor(self):
        return self._frames

    @property
    def frame_count(self):
        return self._frames.shape[0]

    @property
    def vectors_per_frame(self):
        return self._frames.shape[1]

    @property
    def feat_dim(self):
        return self._frames.shape[2]

    def __len__(self):
        return self.frame_count

    def frame(self, i):
        """Frame i as an (l, feat_dim) Tensor. Input data, not on the tape."""
        if not (0 <= i < self.frame_count):
            raise ValueError("frame %d out of range for %d frames" % (i, self.frame_count))
        return Tensor._wrap(np.ascontiguousarray(self._frames.array[i]))


class _BlockParams:
    """One projector block: query self-attention, cross-attention, FFN."""

    FIELDS = (
        "self_wq", "self_wk", "self_wv", "self_wo",
        "cross_wq", "cross_wk", "cross_wv", "cross_wo",
        "ffn_w1", "ffn_w2",
        "g_self", "g_cross", "g_ffn",
    )

    def __init__(self, rng, feat_dim, proj_dim, ffn_dim, scale):
        d, f, fd = proj_dim, feat_dim, ffn_dim
        self.self_wq = gaussian_init(rng, (d, d), scale)
        self.self_wk = gaussian_init(rng, (d, d), scale)
        self.self_wv = gaussian_init(rng, (d, d), scale)
        self.self_wo = gaussian_init(rng, (d, d), scale)
        self.cross_wq = gaussian_init(rng, (d, d), scale)
        self.cross_wk = gaussian_init(rng, (f, d), scale)
        self.cross_wv = gaussian_init(rng, (f, d), scale)
        self.cross_wo = gaussian_init(rng, (d, d), scale)
        self.ffn_w1 = gaussian_init(rng, (d, fd), scale)
        self.ffn_w2 = gaussian_init(rng, (fd, d), scale)
        self.g_self = Tensor.ones((1, d))
        self.g_cross = Tensor.ones((1, d))
        self.g_ffn = Tensor.ones((1, d))


class ProjectorParams:
    """Learnable query bank, N blocks, and the model-space output map."""

    def __init__(self, rng, k, feat_dim, proj_dim, ffn_dim, model_dim,
                 blocks=2, scale=0.02, norm_eps=1e-6):
        k, feat_dim, proj_dim = int(k), int(feat_dim), int(proj_dim)
        ffn_dim, model_dim, blocks = int(ffn_dim), int(model_dim), int(blocks)
        if min(k, feat_dim, proj_dim, ffn_dim, model_dim) < 1:
            raise ValueError("projector dimensions must all be >= 1")
        if blocks < 1:
            raise ValueError("projector needs at least one block, got %d" % blocks)
        self.k = k
        self.feat_dim = feat_dim
        self.proj_dim = proj_dim
        self.ffn_dim = ffn_dim
        self.model_dim = model_dim
        self.norm_eps = float(norm_eps)
        self.p = gaussian_init(rng, (k, proj_dim), scale)
        self.blocks = [
            _BlockParams(rng, feat_dim, proj_dim, ffn_dim, scale) for _ in range(blocks)
        ]
        self.out_map = gaussian_init(rng, (proj_dim, model_dim), scale)

    def named_tensors(self):
        named = {"p": self.p, "out_map": self.out_map}
        for i, blk in enumerate(self.blocks):
            for field in _BlockParams.FIELDS:
                named["blocks.%d.%s" % (i, field)] = getattr(blk, field)
        return named

    def set_tensor(self, name, value):
        if name in ("p", "out_map"):
            current = getattr(self, name)
            if value.shape != current.shape:
                raise ValueError("shape mismatch for %s" % name)
            setattr(self, name, value)
            return
        parts = name.split(".")
        if len(parts) == 3 and parts[0] == "blocks" and parts[2] in _BlockParams.FIELDS:
            blk = self.blocks[int(parts[1])]
            current = getattr(blk, parts[2])
            if value.shape != current.shape:
                raise ValueError("shape mismatch for %s" % name)
            setattr(blk, parts[2], value)
            return
        raise KeyError("no projector tensor named %r" % name)

    def load_named(self, named):
        for name in self.named_tensors():
            if name not in named:
                raise KeyError("checkpoint is missing projector tensor %r" % name)
            self.set_tensor(name, named[name])


def _single_head_attention(q_src, kv_src, wq, wk, wv, wo):
    """Unmasked single-head attention; scale is 1/sqrt of the query width."""
    q = matmul(q_src, wq)
    k = matmul(kv_src, wk)
    v = matmul(kv_src, wv)
    logits = scalar_mul(matmul(q, transpose(k)), 1.0 / math.sqrt(q.shape[1]))
    return matmul(matmul(softmax_rows(logits), v), wo)


def project_frame(params, frame, x_prev):
    """One chaining step: (frame features, previous state) -> new state.

    frame is (l, feat_dim); x_prev and the result are (k, proj_dim). The
    result is the pre-out_map state that sequential mode chains.
    """
    if not isinstance(frame, Tensor) or frame.ndim != 2 or frame.shape[1] != params.feat_dim:
        raise ValueError("frame must be (l, %d)" % params.feat_dim)
    if (
        not isinstance(x_prev, Tensor)
        or x_prev.shape != (params.k, params.proj_dim)
    ):
        raise ValueError("x_prev must be (%d, %d)" % (params.k, params.proj_dim))
    eps = params.norm_eps
    x = x_prev
    for blk in params.blocks:
        a = rms_norm(x, blk.g_self, eps)
        x = add(x, _single_head_attention(a, a, blk.self_wq, blk.self_wk, blk.self_wv, blk.self_wo))
        c = rms_norm(x, blk.g_cross, eps)
        x = add(x, _single_head_attention(c, frame, blk.cross_wq, blk.cross_wk, blk.cross_wv, blk.cross_wo))
        f = rms_norm(x, blk.g_ffn, eps)
        x = add(x, matmul(silu(matmul(f, blk.ffn_w1)), blk.ffn_w2))
    return x


def subsample_frame_indices(frame_count, stride, mode):
    """Which frames survive subsampling at the given stride.

    independent keeps {0, s, 2s, ...}; sequential anchors the grid at the
    final frame so the chain always ends on the last frame:
    {(t-1) mod s, ..., t-1}.
    """
    t = int(frame_count)
    s = int(stride)
    if t < 1:
        raise ValueError("frame_count must be >= 1")
    if s < 1:
        raise ValueError("stride must be >= 1, got %d" % s)
    mode = mode if isinstance(mode, ChainingMode) else ChainingMode.from_name(mode)
    if mode is ChainingMode.INDEPENDENT:
        return list(range(0, t, s))
    first = (t - 1) % s
    return list(range(first, t, s))


def subsample_tokens(tokens, stride, mode):
    """Frame subsampling along axis 0 of a (t, ..., ...) stack.

    Pure input selection (not recorded); apply before projection.
    """
    if not isinstance(tokens, Tensor) or tokens.ndim != 3:
        raise ValueError("subsample_tokens expects a 3-D Tensor")
    idx = subsample_frame_indices(tokens.shape[0], stride, mode)
    return Tensor._wrap(np.ascontiguousarray(tokens.array[idx])), idx


def project_video(params, video, mode, stride=1):
    """Project every (surviving) frame to k visual tokens.

    Returns an (m, k, model_dim) Tensor in frame order, m = number of kept
    frames. independent feeds the query bank to every frame; sequential
    chains the previous frame's state.
    """
    if not isinstance(video, VideoFeatures):
        video = VideoFeatures(video)
    if video.feat_dim != params.feat_dim:
        raise ValueError(
            "video feat_dim %d does not match projector feat_dim %d"
            % (video.feat_dim, params.feat_dim)
        )
    mode = mode if isinstance(mode, ChainingMode) else ChainingMode.from_name(mode)
    idx = subsample_frame_indices(video.frame_count, stride, mode)
    state = params.p
    frame_tokens = []
    for i in idx:
        source = params.p if mode is ChainingMode.INDEPENDENT else state
        state = project_frame(params, video.frame(i), source)
        frame_tokens.append(matmul(state, params.out_map))
    stacked = concat_rows(frame_tokens) if len(frame_tokens) > 1 else frame_tokens[0]
    return reshape(stacked, (len(idx), params.k, params.model_dim))
