"""Executable invariant suite.

Every check returns a CheckResult with the measured residual and its
tolerance; `check` (the CLI command) runs them all and fails the process if
any fail. The suite leans on independent reference paths where it matters:
attention is re-evaluated per position with its own rotation arithmetic and
ratio-form softmax, the projector against a naive block-by-block
re-implementation, matmul against an explicit triple loop.
"""

import math
import os
import tempfile
from dataclasses import dataclass

import numpy as np

from . import attention as attention_mod
from .attention import (
    ALL_STRATEGIES,
    AttentionParams,
    ModalityMask,
    PositionalStrategy,
    attention_forward,
    merge_logits,
    visual_logit_row,
)
from .grad import Adam, GradTape, ParamRegistry, Sgd, fd_gradcheck
from .model import (
    DecoderConfig,
    DecoderParams,
    MixedSequence,
    TextSlot,
    assemble,
    greedy_decode,
    load_checkpoint,
    save_checkpoint,
)
from .numerics import (
    SeededRng,
    Tensor,
    add,
    cross_entropy,
    concat_rows,
    div,
    gather_rows,
    gaussian_init,
    matmul,
    mean_all,
    mul,
    rms_norm,
    silu,
    slice_rows,
    softmax_rows,
    sub,
    sum_all,
    transpose,
)
from .projector import (
    ChainingMode,
    ProjectorParams,
    VideoFeatures,
    project_frame,
    project_video,
    subsample_frame_indices,
)
from .rope import (
    NO_ROTATION,
    RotaryTable,
    apply_rotary,
    apply_rotary_selected,
    relative_similarity_check,
)
from .synth import TaskSpec, episode_loss, sample_episode


@dataclass
class CheckResult:
    name: str
    passed: bool
    residual: float
    tolerance: float
    detail: str = ""

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        extra = (" | " + self.detail) if self.detail else ""
        return "%s %-34s residual=%.3e tol=%.1e%s" % (
            status, self.name, self.residual, self.tolerance, extra,
        )


class CheckFailure(RuntimeError):
    """Raised by commands when an asserted property does not hold."""


def _result(name, residual, tolerance, detail="", extra_ok=True):
    residual = float(residual)
    return CheckResult(name, extra_ok and residual <= tolerance, residual, tolerance, detail)


# --------------------------------------------------------------------------
# independent reference paths


def _ref_rotate(vec, pos, base):
    """Rotation straight from the angle formula; no table, no kernel."""
    d = vec.shape[0]
    out = vec.astype(np.float64).copy()
    for c in range(d // 2):
        ang = float(pos) * base ** (-2.0 * c / d)
        cs, sn = math.cos(ang), math.sin(ang)
        e, o = vec[2 * c], vec[2 * c + 1]
        out[2 * c] = e * cs - o * sn
        out[2 * c + 1] = e * sn + o * cs
    return out


def reference_attention(params, x, mask, positions, strategy, base):
    """Literal per-position evaluation of the attention rule.

    For every (query j, key i <= j) the similarity is exp(<q', k'>/sqrt(d))
    where the primes follow the strategy: the rotated plane rotates text
    rows (plus the strategy's extras), and visual-key columns under edvt
    use the unrotated pair. Softmax in ratio form, no max shift. Returns
    (weights[h, n, n], output[n, model_dim]).
    """
    xa = x.array
    n = xa.shape[0]
    h, d = params.heads, params.head_dim
    q = xa @ params.w_q.array
    k = xa @ params.w_k.array
    v = xa @ params.w_v.array
    weights = np.zeros((h, n, n))
    contexts = np.zeros((n, h * d))
    for head in range(h):
        qs = q[:, head * d : (head + 1) * d]
        ks = k[:, head * d : (head + 1) * d]
        vs = v[:, head * d : (head + 1) * d]
        for j in range(n):
            sims = []
            for i in range(j + 1):
                qv, kv = qs[j], ks[i]
                if strategy is PositionalStrategy.NOPOS:
                    pass
                elif strategy is PositionalStrategy.ROPE_ALL:
                    qv = _ref_rotate(qv, positions[j], base)
                    kv = _ref_rotate(kv, positions[i], base)
                elif strategy is PositionalStrategy.EDVT:
                    if not mask[i]:
                        if not mask[j]:
                            qv = _ref_rotate(qv, positions[j], base)
                        kv = _ref_rotate(kv, positions[i], base)
                elif strategy is PositionalStrategy.FIX_VPE:
                    qv = _ref_rotate(qv, 0 if mask[j] else positions[j], base)
                    kv = _ref_rotate(kv, 0 if mask[i] else positions[i], base)
                elif strategy is PositionalStrategy.ROPE_QUERY_EDVT_KEY:
                    qv = _ref_rotate(qv, positions[j], base)
                    if not mask[i]:
                        kv = _ref_rotate(kv, positions[i], base)
                sims.append(math.exp(float(np.dot(qv, kv)) / math.sqrt(d)))
            total = sum(sims)
            for i, s in enumerate(sims):
                weights[head, j, i] = s / total
            contexts[j, head * d : (head + 1) * d] = sum(
                weights[head, j, i] * vs[i] for i in range(j + 1)
            )
    return weights, contexts @ params.w_o.array


def _ref_rms(x, gain, eps):
    ms = (x * x).mean(axis=1, keepdims=True)
    return x / np.sqrt(ms + eps) * gain


def _ref_single_head(q_src, kv_src, wq, wk, wv, wo):
    q = q_src @ wq.array
    k = kv_src @ wk.array
    v = kv_src @ wv.array
    logits = q @ k.T / math.sqrt(q.shape[1])
    e = np.exp(logits)
    w = e / e.sum(axis=1, keepdims=True)
    return (w @ v) @ wo.array


def reference_project_frame(params, frame, x_prev):
    """Naive block-by-block re-evaluation of one projector step."""
    x = x_prev.array.copy()
    fa = frame.array
    eps = params.norm_eps
    for blk in params.blocks:
        a = _ref_rms(x, blk.g_self.array, eps)
        x = x + _ref_single_head(a, a, blk.self_wq, blk.self_wk, blk.self_wv, blk.self_wo)
        c = _ref_rms(x, blk.g_cross.array, eps)
        x = x + _ref_single_head(c, fa, blk.cross_wq, blk.cross_wk, blk.cross_wv, blk.cross_wo)
        f = _ref_rms(x, blk.g_ffn.array, eps)
        hmid = f @ blk.ffn_w1.array
        hmid = hmid / (1.0 + np.exp(-hmid))
        x = x + hmid @ blk.ffn_w2.array
    return x


# --------------------------------------------------------------------------
# small builders shared by checks


def _mixed_case(rng, heads, head_dim, n_visual, n_text, base=10000.0, max_pos=None):
    md = heads * head_dim
    params = AttentionParams.init(rng.derive(1), heads, head_dim, 0.3)
    n = n_visual + n_text
    x = gaussian_init(rng.derive(2), (n, md), 1.0)
    mask = ModalityMask([True] * n_visual + [False] * n_text)
    table = RotaryTable(head_dim, max_pos or max(n + 64, 128), base)
    return params, x, mask, list(range(n)), table


def _distance_pair(rng, heads, head_dim, n_visual, gap_a, gap_b):
    """Two sequences sharing visual block and query content, different gaps."""
    md = heads * head_dim
    params = AttentionParams.init(rng.derive(1), heads, head_dim, 0.3)
    vis = gaussian_init(rng.derive(2), (n_visual, md), 1.0)
    query = gaussian_init(rng.derive(3), (1, md), 1.0)
    longest = max(gap_a, gap_b)
    fill = gaussian_init(rng.derive(4), (max(longest, 1), md), 1.0)
    table = RotaryTable(head_dim, n_visual + longest + 8)

    def build(gap):
        rows = [vis]
        if gap > 0:
            rows.append(Tensor(fill.array[:gap]))
        rows.append(query)
        x = Tensor(np.concatenate([r.array for r in rows], axis=0))
        mask = ModalityMask([True] * n_visual + [False] * (gap + 1))
        return x, mask, list(range(n_visual + gap + 1))

    return params, table, build


# --------------------------------------------------------------------------
# the checks


def check_matmul_oracle():
    rng = SeededRng(101)
    a = gaussian_init(rng, (7, 5), 1.0)
    b = gaussian_init(rng, (5, 3), 1.0)
    got = matmul(a, b).array
    want = np.zeros((7, 3))
    for i in range(7):
        for j in range(3):
            acc = 0.0
            for t in range(5):
                acc += float(a.array[i, t]) * float(b.array[t, j])
            want[i, j] = acc
    return _result("numerics.matmul_oracle", np.max(np.abs(got - want)), 1e-12)


def check_matmul_associativity():
    rng = SeededRng(102)
    a = gaussian_init(rng, (6, 5), 1.0)
    b = gaussian_init(rng, (5, 7), 1.0)
    c = gaussian_init(rng, (7, 4), 1.0)
    left = matmul(matmul(a, b), c).array
    right = matmul(a, matmul(b, c)).array
    return _result("numerics.matmul_associativity", np.max(np.abs(left - right)), 1e-10)


def check_softmax_rows():
    rng = SeededRng(103)
    x = gaussian_init(rng, (9, 9), 3.0)
    causal = np.tril(np.ones((9, 9), dtype=bool))
    y = softmax_rows(x, causal).array
    sums = np.abs(y.sum(axis=1) - 1.0).max()
    masked_ok = bool(np.all(y[~causal] == 0.0))
    big = softmax_rows(Tensor([[1000.0, 1000.1]])).array
    stable_ok = bool(np.all(np.isfinite(big))) and abs(big.sum() - 1.0) < 1e-12
    shifted = softmax_rows(Tensor(x.array + 123.0), causal).array
    shift_res = np.max(np.abs(shifted - y))
    return _result(
        "numerics.softmax_rows",
        max(sums, shift_res),
        1e-12,
        detail="masked_zero=%s stable=%s" % (masked_ok, stable_ok),
        extra_ok=masked_ok and stable_ok,
    )


def check_rng_reproducibility():
    a = SeededRng(7).gaussian(64).array
    b = SeededRng(7).gaussian(64).array
    c = SeededRng(8).gaussian(64).array
    same = a.tobytes() == b.tobytes()
    differs = a.tobytes() != c.tobytes()
    return _result(
        "numerics.rng_reproducibility",
        0.0 if (same and differs) else 1.0,
        0.0,
        detail="same_seed=%s cross_seed_differs=%s" % (same, differs),
    )


def check_rng_moments():
    g = SeededRng(2024).gaussian(1_000_000).array
    mean_err = abs(float(g.mean()))
    var_err = abs(float(g.var()) - 1.0)
    return _result(
        "numerics.rng_moments",
        max(mean_err / 0.005, var_err / 0.01),
        1.0,
        detail="mean=%.4f var=%.4f" % (g.mean(), g.var()),
    )


def check_gaussian_init():
    rng = SeededRng(11)
    t = gaussian_init(rng, (200, 50), 0.02)
    std = float(t.array.std())
    ratio_err = abs(std / 0.02 - 1.0)
    try:
        gaussian_init(SeededRng(1), (2, 2), 0.0)
        rejected = False
    except ValueError:
        rejected = True
    return _result(
        "numerics.gaussian_init",
        ratio_err,
        0.05,
        detail="std=%.5f zero_scale_rejected=%s" % (std, rejected),
        extra_ok=rejected,
    )


def check_rotary_norms():
    rng = SeededRng(21)
    table = RotaryTable(16, 300)
    x = gaussian_init(rng, (64, 16), 1.0)
    pos = [int(SeededRng(5).derive(i).randint(300)) for i in range(64)]
    y = apply_rotary(table, x, pos)
    res = np.max(np.abs(np.linalg.norm(y.array, axis=1) - np.linalg.norm(x.array, axis=1)))
    return _result("rope.norm_preservation", res, 1e-12)


def check_rotary_relative():
    rng = SeededRng(22)
    table = RotaryTable(8, 600)
    worst = 0.0
    for i in range(1000):
        r = rng.derive(i)
        q = r.gaussian(8).array
        k = r.gaussian(8).array
        m = r.randint(250)
        n = r.randint(250)
        off = r.randint(300)
        a = relative_similarity_check(table, q, k, m, n)
        b = relative_similarity_check(table, q, k, m + off, n + off)
        worst = max(worst, abs(a - b))
    return _result("rope.relative_similarity", worst, 1e-10)


def check_rotary_zero_identity():
    rng = SeededRng(23)
    table = RotaryTable(12, 50)
    x = gaussian_init(rng, (9, 12), 1.0)
    at_zero = apply_rotary(table, x, [0] * 9)
    exact = at_zero.array.tobytes() == x.array.tobytes()
    return _result(
        "rope.zero_position_identity",
        0.0 if exact else 1.0,
        0.0,
        detail="bit_exact=%s" % exact,
    )


def check_rotary_angles():
    table = RotaryTable(10, 40, base=300.0)
    worst = 0.0
    for pos in (0, 1, 7, 39):
        for i in range(5):
            ang = table.angle(pos, i)
            worst = max(worst, abs(float(table.cos.array[pos, i]) - math.cos(ang)))
            worst = max(worst, abs(float(table.sin.array[pos, i]) - math.sin(ang)))
    return _result("rope.table_matches_angle_formula", worst, 1e-12)


def check_attention_single_token():
    rng = SeededRng(31)
    worst = 0.0
    ok = True
    for strategy in ALL_STRATEGIES:
        params, x, mask, pos, table = _mixed_case(rng, 2, 8, 0, 1)
        out, trace = attention_forward(params, x, mask, pos, strategy, table)
        want = matmul(matmul(x, params.w_v), params.w_o).array
        worst = max(worst, float(np.max(np.abs(out.array - want))))
        ok = ok and trace.weights.shape == (2, 1, 1) and float(trace.weights.array.max()) == 1.0
    return _result("attention.single_token_identity", worst, 1e-13, extra_ok=ok)


def check_attention_causality_and_sums():
    rng = SeededRng(32)
    worst_sum = 0.0
    strict_upper = 0.0
    for strategy in ALL_STRATEGIES:
        params, x, mask, pos, table = _mixed_case(rng, 2, 8, 5, 6)
        _, trace = attention_forward(params, x, mask, pos, strategy, table)
        w = trace.weights.array
        for h in range(w.shape[0]):
            strict_upper = max(strict_upper, float(np.max(np.abs(np.triu(w[h], 1)))))
        worst_sum = max(worst_sum, float(np.max(np.abs(w.sum(axis=2) - 1.0))))
    return _result(
        "attention.causality_and_row_sums",
        max(worst_sum, strict_upper),
        1e-12,
        detail="strict_upper=%.1e" % strict_upper,
    )


def check_equal_distance():
    worst_edvt = 0.0
    least_rope = math.inf
    cases = 0
    for seed in range(12):
        rng = SeededRng(4000 + seed)
        heads = 1 + seed % 3
        head_dim = (4, 8, 16)[seed % 3]
        n_visual = 2 + seed % 5
        gap_a = seed % 4
        gap_b = gap_a + 1 + 3 * (seed % 7)
        params, table, build = _distance_pair(rng, heads, head_dim, n_visual, gap_a, gap_b)
        rows = {}
        for strategy in (PositionalStrategy.EDVT, PositionalStrategy.ROPE_ALL):
            per_gap = []
            for gap in (gap_a, gap_b):
                x, mask, pos = build(gap)
                _, trace = attention_forward(params, x, mask, pos, strategy, table)
                per_gap.append(visual_logit_row(trace, len(mask) - 1))
            rows[strategy] = per_gap
        dev_e = float(np.max(np.abs(rows[PositionalStrategy.EDVT][0] - rows[PositionalStrategy.EDVT][1])))
        dev_r = float(np.max(np.abs(rows[PositionalStrategy.ROPE_ALL][0] - rows[PositionalStrategy.ROPE_ALL][1])))
        worst_edvt = max(worst_edvt, dev_e)
        least_rope = min(least_rope, dev_r)
        cases += 1
    return _result(
        "attention.equal_distance",
        worst_edvt,
        1e-15,
        detail="cases=%d rope_all_min_dev=%.2e" % (cases, least_rope),
        extra_ok=least_rope > 1e-6,
    )


def check_degeneration_text_only():
    worst = 0.0
    for seed in range(10):
        rng = SeededRng(5000 + seed)
        params, x, mask, pos, table = _mixed_case(rng, 2, 8, 0, 4 + seed)
        out_e, _ = attention_forward(params, x, mask, pos, PositionalStrategy.EDVT, table)
        out_r, _ = attention_forward(params, x, mask, pos, PositionalStrategy.ROPE_ALL, table)
        worst = max(worst, float(np.max(np.abs(out_e.array - out_r.array))))
    return _result("attention.text_only_degeneration", worst, 1e-12)


def check_degeneration_nopos_merge():
    rng = SeededRng(51)
    params, x, mask, pos, table = _mixed_case(rng, 2, 8, 4, 5)
    out_n, trace_n = attention_forward(params, x, mask, pos, PositionalStrategy.NOPOS)
    _, trace_r = attention_forward(params, x, mask, pos, PositionalStrategy.ROPE_ALL, table)
    exact = True
    for h in range(params.heads):
        merged = merge_logits(
            Tensor(trace_r.logits_plain.array[h]),
            Tensor(trace_r.logits_rotated.array[h]),
            [True] * len(mask),
        )
        exact = exact and merged.array.tobytes() == trace_n.logits_merged.array[h].tobytes()
    return _result(
        "attention.nopos_is_all_visual_merge",
        0.0 if exact else 1.0,
        0.0,
        detail="bit_exact=%s" % exact,
    )


def check_attention_oracle():
    worst = 0.0
    count = 0
    for seed in range(4):
        rng = SeededRng(6000 + seed)
        heads = 1 + seed % 2
        head_dim = 4 if seed % 2 else 8
        flags = [bool(SeededRng(seed).derive(i).randint(2)) for i in range(6)]
        md = heads * head_dim
        params = AttentionParams.init(rng.derive(1), heads, head_dim, 0.4)
        x = gaussian_init(rng.derive(2), (6, md), 1.0)
        mask = ModalityMask(flags)
        table = RotaryTable(head_dim, 64)
        for strategy in ALL_STRATEGIES:
            out, trace = attention_forward(params, x, mask, list(range(6)), strategy, table)
            ref_w, ref_out = reference_attention(params, x, mask, list(range(6)), strategy, table.base)
            worst = max(worst, float(np.max(np.abs(trace.weights.array - ref_w))))
            worst = max(worst, float(np.max(np.abs(out.array - ref_out))))
            count += 1
    return _result("attention.matches_reference_evaluation", worst, 1e-12,
                   detail="instances=%d" % count)


def check_fixvpe_pinning():
    rng = SeededRng(61)
    params, x, mask, pos, table = _mixed_case(rng, 2, 8, 4, 4)
    _, trace = attention_forward(params, x, mask, pos, PositionalStrategy.FIX_VPE, table)
    vis = mask.visual_indices()
    sub_m = trace.logits_merged.array[:, vis, :][:, :, vis]
    sub_p = trace.logits_plain.array[:, vis, :][:, :, vis]
    exact = sub_m.tobytes() == sub_p.tobytes()
    return _result(
        "attention.fixvpe_pins_visual_to_zero",
        0.0 if exact else 1.0,
        0.0,
        detail="visual_block_bit_equals_plain=%s" % exact,
    )


def check_rqek_not_distance_free():
    rng = SeededRng(62)
    params, table, build = _distance_pair(rng, 2, 8, 4, 0, 9)
    devs = []
    for strategy in (PositionalStrategy.ROPE_QUERY_EDVT_KEY,):
        rows = []
        for gap in (0, 9):
            x, mask, pos = build(gap)
            _, trace = attention_forward(params, x, mask, pos, strategy, table)
            rows.append(visual_logit_row(trace, len(mask) - 1))
        devs.append(float(np.max(np.abs(rows[0] - rows[1]))))
    dev = min(devs)
    return _result(
        "attention.rotated_query_breaks_distance_freedom",
        0.0 if dev > 1e-6 else 1.0,
        0.0,
        detail="deviation=%.2e" % dev,
    )


def _toy_projector(rng, blocks=2):
    return ProjectorParams(rng, k=2, feat_dim=5, proj_dim=6, ffn_dim=12,
                           model_dim=8, blocks=blocks, scale=0.3)


def _toy_video(rng, frames=4, l=3, feat=5):
    return VideoFeatures(gaussian_init(rng, (frames, l, feat), 1.0))


def check_projector_independent_locality():
    rng = SeededRng(71)
    params = _toy_projector(rng.derive(0))
    video = _toy_video(rng.derive(1))
    tokens = project_video(params, video, ChainingMode.INDEPENDENT)
    altered = video.tensor.array.copy()
    altered[2] += 1.5
    tokens2 = project_video(params, VideoFeatures(Tensor(altered)), ChainingMode.INDEPENDENT)
    same = all(
        tokens.array[i].tobytes() == tokens2.array[i].tobytes() for i in (0, 1, 3)
    )
    changed = tokens.array[2].tobytes() != tokens2.array[2].tobytes()
    return _result(
        "projector.independent_frame_locality",
        0.0 if (same and changed) else 1.0,
        0.0,
        detail="untouched_frames_bit_equal=%s edited_frame_changed=%s" % (same, changed),
    )


def check_projector_sequential_prefix():
    rng = SeededRng(72)
    params = _toy_projector(rng.derive(0))
    video = _toy_video(rng.derive(1))
    tokens = project_video(params, video, ChainingMode.SEQUENTIAL)
    altered = video.tensor.array.copy()
    altered[2] += 1.5
    tokens2 = project_video(params, VideoFeatures(Tensor(altered)), ChainingMode.SEQUENTIAL)
    prefix_same = all(tokens.array[i].tobytes() == tokens2.array[i].tobytes() for i in (0, 1))
    suffix_changed = all(
        tokens.array[i].tobytes() != tokens2.array[i].tobytes() for i in (2, 3)
    )
    return _result(
        "projector.sequential_prefix_causality",
        0.0 if (prefix_same and suffix_changed) else 1.0,
        0.0,
        detail="prefix_bit_equal=%s suffix_changed=%s" % (prefix_same, suffix_changed),
    )


def check_projector_first_frame_agreement():
    rng = SeededRng(73)
    params = _toy_projector(rng.derive(0))
    video = _toy_video(rng.derive(1))
    ind = project_video(params, video, ChainingMode.INDEPENDENT)
    seq = project_video(params, video, ChainingMode.SEQUENTIAL)
    exact = ind.array[0].tobytes() == seq.array[0].tobytes()
    return _result(
        "projector.first_frame_mode_agreement",
        0.0 if exact else 1.0,
        0.0,
        detail="bit_exact=%s" % exact,
    )


def check_subsample_rules():
    cases = [
        (5, 2, ChainingMode.INDEPENDENT, [0, 2, 4]),
        (5, 2, ChainingMode.SEQUENTIAL, [0, 2, 4]),
        (8, 8, ChainingMode.INDEPENDENT, [0]),
        (8, 8, ChainingMode.SEQUENTIAL, [7]),
        (8, 3, ChainingMode.INDEPENDENT, [0, 3, 6]),
        (8, 3, ChainingMode.SEQUENTIAL, [1, 4, 7]),
        (4, 1, ChainingMode.SEQUENTIAL, [0, 1, 2, 3]),
    ]
    bad = [
        (t, s, m.value)
        for t, s, m, want in cases
        if subsample_frame_indices(t, s, m) != want
    ]
    return _result(
        "projector.subsample_index_rules",
        float(len(bad)),
        0.0,
        detail=("violations=%r" % bad) if bad else "all cases hold",
    )


def check_projector_oracle():
    rng = SeededRng(74)
    worst = 0.0
    for seed in range(6):
        r = rng.derive(seed)
        params = _toy_projector(r.derive(0), blocks=1 + seed % 2)
        frame = gaussian_init(r.derive(1), (3, 5), 1.0)
        x_prev = gaussian_init(r.derive(2), (2, 6), 1.0)
        got = project_frame(params, frame, x_prev).array
        want = reference_project_frame(params, frame, x_prev)
        worst = max(worst, float(np.max(np.abs(got - want))))
    return _result("projector.matches_reference_blocks", worst, 1e-12)


def check_primitive_gradients():
    rng = SeededRng(81)
    table = RotaryTable(6, 32)
    params = {
        "w": gaussian_init(rng.derive(0), (5, 6), 0.5),
        "u": gaussian_init(rng.derive(1), (6, 6), 0.5),
        "g": Tensor.ones((1, 6)),
        "e": gaussian_init(rng.derive(2), (7, 6), 0.5),
    }
    reg = ParamRegistry()
    reg.add_group("all", params)
    x0 = gaussian_init(rng.derive(3), (4, 5), 1.0)
    probe = gaussian_init(rng.derive(4), (4, 6), 1.0)
    flags = [True, False, True, False]

    def f():
        h = matmul(x0, params["w"])
        h = rms_norm(h, params["g"])
        rot = apply_rotary_selected(table, h, [1, 3, NO_ROTATION, 7])
        plain = matmul(h, transpose(matmul(gather_rows(params["e"], [0, 2, 4, 6]), params["u"])))
        rotp = matmul(rot, transpose(rot))
        merged = merge_logits(plain, rotp, flags)
        w = softmax_rows(merged, np.tril(np.ones((4, 4), dtype=bool)))
        mixed = matmul(w, silu(h))
        top = concat_rows([slice_rows(mixed, 0, 2), slice_rows(mixed, 2, 4)])
        scaled = div(sub(top, probe), Tensor.full((4, 6), 3.0))
        ce = cross_entropy(slice_rows(mul(scaled, probe), 0, 1), 2)
        return add(mean_all(scaled), ce)

    err = fd_gradcheck(f, reg, coords_per_group=120)
    return _result("grad.primitive_fd_agreement", err, 1e-6)


def check_freeze_and_optimizers():
    rng = SeededRng(82)
    a = {"w": gaussian_init(rng.derive(0), (3, 3), 1.0)}
    b = {"w": gaussian_init(rng.derive(1), (3, 3), 1.0)}
    reg = ParamRegistry()
    reg.add_group("hot", a)
    reg.add_group("cold", b, frozen=True)
    target = gaussian_init(rng.derive(2), (3, 3), 1.0)

    def loss():
        d1 = sub(a["w"], target)
        d2 = sub(b["w"], target)
        return sum_all(mul(d1, d1)) + sum_all(mul(d2, d2))

    losses = []
    opt = Adam(0.1)
    cold_before = b["w"].array.tobytes()
    grads_seen_for_cold = False
    for _ in range(60):
        with GradTape() as tape:
            value = loss()
        grads = tape.backward(value)
        grads_seen_for_cold = grads_seen_for_cold or grads.has(b["w"])
        losses.append(value.item())
        opt.step(reg, grads)
    cold_unchanged = b["w"].array.tobytes() == cold_before
    descended = losses[-1] < 0.5 * losses[0]

    sgd_reg = ParamRegistry()
    c = {"w": gaussian_init(SeededRng(9).derive(0), (3, 3), 1.0)}
    sgd_reg.add_group("hot", c)
    sgd_opt = Sgd(0.1)
    first = last = None
    for _ in range(40):
        with GradTape() as tape:
            d = sub(c["w"], target)
            value = sum_all(mul(d, d))
        if first is None:
            first = value.item()
        sgd_opt.step(sgd_reg, tape.backward(value))
        last = value.item()
    sgd_descended = last < 0.1 * first

    ok = cold_unchanged and descended and grads_seen_for_cold and sgd_descended
    return _result(
        "grad.freeze_and_optimizer_descent",
        0.0 if ok else 1.0,
        0.0,
        detail="frozen_unchanged=%s frozen_grads_computed=%s adam_descends=%s sgd_descends=%s"
        % (cold_unchanged, grads_seen_for_cold, descended, sgd_descended),
    )


def _toy_decoder(rng, strategy=PositionalStrategy.EDVT, vocab=12, tie_head=False, scale=0.25):
    config = DecoderConfig(
        vocab_size=vocab, layers=2, heads=2, head_dim=6, ffn_dim=16,
        strategy=strategy, tie_head=tie_head, max_positions=64, init_scale=scale,
    )
    return DecoderParams(config, rng)


def check_assembly_layout():
    rng = SeededRng(91)
    visual = gaussian_init(rng, (3, 2, 12), 1.0)
    seq = assemble(visual, [4, 9])
    mask_ok = seq.modality_mask().flags == (True,) * 6 + (False,) * 2
    pos_ok = seq.positions() == list(range(8))
    flat = visual.array.reshape(6, 12)
    order_ok = all(
        seq[i].vector.array.tobytes() == np.ascontiguousarray(flat[i]).tobytes()
        for i in range(6)
    )
    text_ok = seq.text_ids() == [4, 9]
    ok = mask_ok and pos_ok and order_ok and text_ok
    return _result(
        "model.assembly_layout",
        0.0 if ok else 1.0,
        0.0,
        detail="mask=%s positions=%s frame_major=%s text=%s"
        % (mask_ok, pos_ok, order_ok, text_ok),
    )


def check_decode_determinism():
    rng = SeededRng(92)
    params = _toy_decoder(rng.derive(0))
    seq = MixedSequence([TextSlot(1), TextSlot(5), TextSlot(3)])
    a = greedy_decode(params, seq, 6, stop_id=11)
    b = greedy_decode(params, seq, 6, stop_id=11)
    ok = a == b and 1 <= len(a) <= 6
    return _result(
        "model.greedy_decode_determinism",
        0.0 if ok else 1.0,
        0.0,
        detail="tokens=%r" % (a,),
    )


def check_checkpoint_roundtrip():
    rng = SeededRng(93)
    params = _toy_decoder(rng.derive(0))
    named = params.named_tensors()
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "ck.bin")
        save_checkpoint(path, named)
        loaded = load_checkpoint(path)
    ok = set(loaded) == set(named) and all(
        loaded[k].array.tobytes() == named[k].array.tobytes() for k in named
    )
    return _result(
        "model.checkpoint_roundtrip",
        0.0 if ok else 1.0,
        0.0,
        detail="tensors=%d" % len(named),
    )


def check_episode_reproducibility():
    rng = SeededRng(94)
    spec = TaskSpec.create(rng.derive(0))
    a = sample_episode(spec, SeededRng(777), 8)
    b = sample_episode(spec, SeededRng(777), 8)
    ok = (
        a.label == b.label
        and a.distractor_ids == b.distractor_ids
        and a.video.tensor.array.tobytes() == b.video.tensor.array.tobytes()
    )
    sep = spec.min_prototype_distance()
    sep_ok = sep > 4.0 * spec.sigma
    return _result(
        "synth.episode_reproducibility",
        0.0 if (ok and sep_ok) else 1.0,
        0.0,
        detail="identical=%s prototype_min_dist=%.3f" % (ok, sep),
    )


def check_chance_level():
    rng = SeededRng(95)
    spec = TaskSpec.create(rng.derive(0))
    decoder = _toy_decoder(rng.derive(1), vocab=spec.vocab_size, scale=0.02)
    projector = ProjectorParams(
        rng.derive(2), k=2, feat_dim=spec.feat_dim, proj_dim=8, ffn_dim=16,
        model_dim=decoder.config.model_dim, blocks=2, scale=0.02,
    )
    losses = []
    for i in range(20):
        ep = sample_episode(spec, SeededRng(31000 + i), (0, 8)[i % 2])
        losses.append(
            episode_loss(decoder, projector, ep, ChainingMode.INDEPENDENT).item()
        )
    mean_loss = sum(losses) / len(losses)
    chance = math.log(spec.classes)
    uniform = cross_entropy(Tensor.zeros((1, spec.classes)), 3).item()
    uniform_res = abs(uniform - chance)
    return _result(
        "synth.chance_level_and_uniform_loss",
        abs(mean_loss - chance),
        0.5,
        detail="mean=%.3f lnC=%.3f uniform_residual=%.1e" % (mean_loss, chance, uniform_res),
        extra_ok=uniform_res <= 1e-12,
    )


ALL_CHECKS = [
    check_matmul_oracle,
    check_matmul_associativity,
    check_softmax_rows,
    check_rng_reproducibility,
    check_rng_moments,
    check_gaussian_init,
    check_rotary_norms,
    check_rotary_relative,
    check_rotary_zero_identity,
    check_rotary_angles,
    check_attention_single_token,
    check_attention_causality_and_sums,
    check_equal_distance,
    check_degeneration_text_only,
    check_degeneration_nopos_merge,
    check_attention_oracle,
    check_fixvpe_pinning,
    check_rqek_not_distance_free,
    check_projector_independent_locality,
    check_projector_sequential_prefix,
    check_projector_first_frame_agreement,
    check_subsample_rules,
    check_projector_oracle,
    check_primitive_gradients,
    check_freeze_and_optimizers,
    check_assembly_layout,
    check_decode_determinism,
    check_checkpoint_roundtrip,
    check_episode_reproducibility,
    check_chance_level,
]


def run_all_checks(tamper=None):
    """Run the suite; tamper='swap-merge' injects the merge-polarity fault."""
    if tamper not in (None, "swap-merge"):
        raise ValueError("unknown tamper mode %r" % tamper)
    results = []
    old = attention_mod.TAMPER_SWAP_MERGE
    attention_mod.TAMPER_SWAP_MERGE = tamper == "swap-merge"
    try:
        for fn in ALL_CHECKS:
            try:
                results.append(fn())
            except Exception as exc:  # a crashed check is a failed check
                results.append(
                    CheckResult(fn.__name__, False, math.inf, 0.0, "raised %r" % exc)
                )
    finally:
        attention_mod.TAMPER_SWAP_MERGE = old
    return results
