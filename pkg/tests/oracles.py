"""Plain-numpy oracles, deliberately written along different routes than the
library: rotations as explicit block-diagonal matrices, attention as scalar
per-pair evaluation, the projector block as straight-line numpy. Slow and
obvious on purpose.
"""

import numpy as np


def rotation_matrix(pos, head_dim, base=10000.0):
    """Full (head_dim, head_dim) rotation matrix for one position."""
    r = np.eye(head_dim)
    if pos <= 0:
        return r
    for pair in range(head_dim // 2):
        angle = pos * base ** (-2.0 * pair / head_dim)
        c, s = np.cos(angle), np.sin(angle)
        i, j = 2 * pair, 2 * pair + 1
        r[i, i], r[i, j] = c, -s
        r[j, i], r[j, j] = s, c
    return r


def matmul3(a, b):
    n, m = a.shape
    m2, k = b.shape
    assert m == m2
    out = np.zeros((n, k))
    for i in range(n):
        for j in range(k):
            acc = 0.0
            for t in range(m):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


def _rotation_positions_oracle(strategy, side, visual_flags, positions):
    """Per-token rotation amount, re-derived from the strategy definitions."""
    out = []
    for flag, pos in zip(visual_flags, positions):
        if strategy == "nopos":
            out.append(0)
        elif strategy == "rope_all":
            out.append(pos)
        elif strategy == "edvt":
            out.append(0 if flag else pos)
        elif strategy == "fix_vpe":
            out.append(0 if flag else pos)
        elif strategy == "rope_query_edvt_key":
            out.append(pos if side == "q" else (0 if flag else pos))
        else:
            raise ValueError(strategy)
    return out


def _merge_takes_plain(strategy, visual_flags):
    """Which key columns the merged plane takes from the unrotated plane."""
    if strategy == "nopos":
        return [True] * len(visual_flags)
    if strategy == "edvt":
        return list(visual_flags)
    return [False] * len(visual_flags)


def attention_oracle(params, x, visual_flags, positions, strategy, base=10000.0):
    """Literal evaluation: one scalar logit at a time, softmax as ratios."""
    heads, head_dim = params.heads, params.head_dim
    wq, wk, wv, wo = (params.w_q.array, params.w_k.array,
                      params.w_v.array, params.w_o.array)
    x = np.asarray(x)
    n = x.shape[0]
    take_plain = _merge_takes_plain(strategy, visual_flags)
    q_rot = _rotation_positions_oracle(strategy, "q", visual_flags, positions)
    k_rot = _rotation_positions_oracle(strategy, "k", visual_flags, positions)

    head_outs = []
    for h in range(heads):
        cols = slice(h * head_dim, (h + 1) * head_dim)
        out_h = np.zeros((n, head_dim))
        for t in range(n):
            q_plain = x[t] @ wq[:, cols]
            q_rotated = rotation_matrix(q_rot[t], head_dim, base) @ (x[t] @ wq[:, cols])
            logits = np.empty(t + 1)
            for j in range(t + 1):
                k_plain = x[j] @ wk[:, cols]
                k_rotated = rotation_matrix(k_rot[j], head_dim, base) @ k_plain
                plain = float(q_plain @ k_plain) / np.sqrt(head_dim)
                rotated = float(q_rotated @ k_rotated) / np.sqrt(head_dim)
                logits[j] = plain if take_plain[j] else rotated
            e = np.exp(logits - logits.max())
            w = e / e.sum()
            for j in range(t + 1):
                out_h[t] += w[j] * (x[j] @ wv[:, cols])
        head_outs.append(out_h)
    return np.concatenate(head_outs, axis=1) @ wo


def _rms(x, gain, eps):
    scale = np.sqrt((x * x).mean(axis=1, keepdims=True) + eps)
    return (x / scale) * gain


def _single_head(q_in, kv_in, wq, wk, wv, wo):
    q = q_in @ wq
    k = kv_in @ wk
    v = kv_in @ wv
    logits = q @ k.T / np.sqrt(q.shape[1])
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return (e / e.sum(axis=1, keepdims=True)) @ v @ wo


def projector_block_oracle(blk, x, frame, eps):
    """One pre-norm projector block: self-attn, cross-attn, SiLU FFN."""
    a = _rms(x, blk.g_self.array, eps)
    x = x + _single_head(a, a, blk.self_wq.array, blk.self_wk.array,
                         blk.self_wv.array, blk.self_wo.array)
    c = _rms(x, blk.g_cross.array, eps)
    x = x + _single_head(c, frame, blk.cross_wq.array, blk.cross_wk.array,
                         blk.cross_wv.array, blk.cross_wo.array)
    f = _rms(x, blk.g_ffn.array, eps)
    hidden = f @ blk.ffn_w1.array
    hidden = hidden / (1.0 + np.exp(-hidden))
    return x + hidden @ blk.ffn_w2.array
