"""Acceptance gate: the eight release criteria, one test per criterion.

Each test prints a single PASS/FAIL line (visible with -s or on failure) and
asserts the criterion's tolerance and runtime budget. Tolerances are pinned
here on purpose; loosening one is a release decision, not a test edit.
"""

import math
import time

import numpy as np
import pytest

from edvtlab.attention import (
    ALL_STRATEGIES,
    AttentionParams,
    ModalityMask,
    PositionalStrategy,
    attention_forward,
    merge_logits,
    visual_logit_row,
)
from edvtlab.config import RunConfig, apply_overrides
from edvtlab.harness import cmd_attn_dump, cmd_gradcheck, cmd_sweep, cmd_train_toy
from edvtlab.model import DecoderConfig, DecoderParams, assemble, decoder_forward
from edvtlab.numerics import SeededRng, Tensor, gaussian_init
from edvtlab.projector import ProjectorParams, VideoFeatures, project_frame, project_video
from edvtlab.rope import RotaryTable, apply_rotary

from conftest import make_attention_case
from oracles import attention_oracle, projector_block_oracle

GOLDEN = "tests/golden"


def _report(num, label, ok, detail):
    print("criterion %d %-24s %s  %s" % (num, label, "PASS" if ok else "FAIL", detail))
    assert ok, "criterion %d (%s): %s" % (num, label, detail)


def _equal_distance_case(seed):
    """Visual block, optional text filler, then one text query token."""
    r = SeededRng(seed)
    heads = 1 + seed % 2
    head_dim = (4, 8)[seed % 2]
    n_visual = 3 + seed % 4
    gap = 1 + (seed * 7) % 64
    d = heads * head_dim
    params = AttentionParams.init(r.derive(1), heads, head_dim, 0.5)
    visual = gaussian_init(r.derive(2), (n_visual, d), 1.0).array
    query = gaussian_init(r.derive(3), (1, d), 1.0).array
    filler = gaussian_init(r.derive(4), (gap, d), 1.0).array
    table = RotaryTable(head_dim, 128)

    def run(strategy, with_gap):
        rows = [visual, filler, query] if with_gap else [visual, query]
        x = Tensor(np.concatenate(rows, axis=0))
        n = x.shape[0]
        flags = [i < n_visual for i in range(n)]
        _, trace = attention_forward(params, x, ModalityMask(flags),
                                     list(range(n)), strategy, table)
        return visual_logit_row(trace, n - 1)

    return run, n_visual, gap


def test_1_equal_distance_gate():
    t0 = time.monotonic()
    worst_edvt = 0.0
    worst_rope = math.inf
    for i in range(50):
        run, n_visual, gap = _equal_distance_case(1000 + i)
        near = run(PositionalStrategy.EDVT, False)
        far = run(PositionalStrategy.EDVT, True)
        assert near.shape == far.shape == (near.shape[0], n_visual)
        worst_edvt = max(worst_edvt, float(np.abs(near - far).max()))
        near_r = run(PositionalStrategy.ROPE_ALL, False)
        far_r = run(PositionalStrategy.ROPE_ALL, True)
        worst_rope = min(worst_rope, float(np.abs(near_r - far_r).max()))
    elapsed = time.monotonic() - t0
    ok = worst_edvt <= 1e-15 and worst_rope > 1e-6 and elapsed < 10.0
    _report(1, "equal_distance", ok,
            "edvt max dev %.3e (<=1e-15), rope_all min dev %.3e (>1e-6), %.1fs (<10s)"
            % (worst_edvt, worst_rope, elapsed))


def test_2_text_only_degeneration_gate():
    t0 = time.monotonic()
    worst = 0.0
    nopos_exact = True
    for i in range(50):
        r = SeededRng(2000 + i)
        cfg = DecoderConfig(vocab_size=17, layers=2, heads=2, head_dim=4,
                            ffn_dim=16, max_positions=64, init_scale=0.1)
        params = DecoderParams(cfg, r.derive(1))
        length = 4 + i % 13
        ids = [int(v) for v in r.derive(2).randints(length, cfg.vocab_size)]
        seq = assemble(None, ids)
        a = decoder_forward(params, seq, strategy="edvt")
        b = decoder_forward(params, seq, strategy="rope_all")
        worst = max(worst, float(np.abs(a.array - b.array).max()))
        if i < 10:
            _, traces = decoder_forward(params, seq, strategy="nopos",
                                        collect_traces=True)
            for trace in traces:
                for h in range(cfg.heads):
                    want = merge_logits(Tensor(trace.logits_plain.array[h]),
                                        Tensor(trace.logits_rotated.array[h]),
                                        [True] * length)
                    got = trace.logits_merged.array[h]
                    if got.tobytes() != want.array.tobytes():
                        nopos_exact = False
    elapsed = time.monotonic() - t0
    ok = worst <= 1e-12 and nopos_exact and elapsed < 5.0
    _report(2, "text_only_degeneration", ok,
            "edvt/rope_all max dev %.3e (<=1e-12), nopos merge bit-exact %s, %.1fs (<5s)"
            % (worst, nopos_exact, elapsed))


def test_3_rotation_relative_distance_gate():
    rng = np.random.default_rng(30)
    tables = {}
    worst_rel = 0.0
    worst_norm = 0.0
    identity_exact = True
    for _ in range(1000):
        head_dim = int(rng.choice([4, 8, 16]))
        base = float(rng.choice([1000.0, 10000.0, 100000.0]))
        key = (head_dim, base)
        if key not in tables:
            tables[key] = RotaryTable(head_dim, 256, base)
        table = tables[key]
        m, n = int(rng.integers(0, 200)), int(rng.integers(0, 200))
        q = Tensor(rng.normal(size=(1, head_dim)))
        k = Tensor(rng.normal(size=(1, head_dim)))
        qm = apply_rotary(table, q, [m]).array[0]
        kn = apply_rotary(table, k, [n]).array[0]
        got = float(np.dot(qm, kn))
        if m >= n:
            ref = float(np.dot(apply_rotary(table, q, [m - n]).array[0], k.array[0]))
        else:
            ref = float(np.dot(q.array[0], apply_rotary(table, k, [n - m]).array[0]))
        worst_rel = max(worst_rel, abs(got - ref))
        worst_norm = max(worst_norm, abs(float(np.linalg.norm(qm))
                                         - float(np.linalg.norm(q.array[0]))))
        if apply_rotary(table, q, [0]).array.tobytes() != q.array.tobytes():
            identity_exact = False
    ok = worst_rel <= 1e-10 and worst_norm <= 1e-12 and identity_exact
    _report(3, "rotation_relative", ok,
            "relative dev %.3e (<=1e-10), norm dev %.3e (<=1e-12), R0 bit-exact %s"
            % (worst_rel, worst_norm, identity_exact))


def test_4_scalar_oracle_gate():
    strategies = [s.value for s in ALL_STRATEGIES]
    worst_attn = 0.0
    for i in range(100):
        n = 2 + i % 7
        heads = 1 + i % 2
        head_dim = 4 if i % 3 else 6
        n_visual = i % (n + 1)
        params, x, mask, positions, table = make_attention_case(
            3000 + i, n, heads, head_dim, n_visual)
        strategy = strategies[i % len(strategies)]
        out, _ = attention_forward(params, x, mask, positions,
                                   PositionalStrategy.from_name(strategy), table)
        want = attention_oracle(params, x.array, list(mask.as_bool_array()),
                                positions, strategy)
        worst_attn = max(worst_attn, float(np.abs(out.array - want).max()))

    worst_proj = 0.0
    for j in range(20):
        r = SeededRng(4000 + j)
        blocks = 1 + j % 3
        params = ProjectorParams(r.derive(1), k=2 + j % 3, feat_dim=5,
                                 proj_dim=6, ffn_dim=10, model_dim=8,
                                 blocks=blocks)
        frame = gaussian_init(r.derive(2), (3, 5), 1.0)
        got = project_frame(params, frame, params.p)
        want = params.p.array.copy()
        for blk in params.blocks:
            want = projector_block_oracle(blk, want, frame.array, params.norm_eps)
        worst_proj = max(worst_proj, float(np.abs(got.array - want).max()))

    ok = worst_attn <= 1e-12 and worst_proj <= 1e-12
    _report(4, "scalar_oracle", ok,
            "attention dev %.3e, projector dev %.3e (both <=1e-12)"
            % (worst_attn, worst_proj))


def test_5_gradient_gate(tmp_path, capsys):
    t0 = time.monotonic()
    cfg = apply_overrides(RunConfig(), {"out_dir": str(tmp_path)})
    status = cmd_gradcheck(cfg, all_combos=True, coords_per_group=64,
                           tolerance=1e-6)
    elapsed = time.monotonic() - t0
    out = capsys.readouterr().out
    combos = out.count("gradcheck strategy=")
    ok = status == 0 and combos == 5 * 2 * 4 and elapsed < 60.0
    _report(5, "finite_difference", ok,
            "status %d, %d group lines over 10 combos, %.1fs (<60s)"
            % (status, combos, elapsed))


def test_6_projector_causality_gate():
    prefix_ok = True
    local_ok = True
    t1_ok = True
    for j in range(20):
        r = SeededRng(5000 + j)
        params = ProjectorParams(r.derive(1), k=2, feat_dim=5, proj_dim=6,
                                 ffn_dim=10, model_dim=8, blocks=2)
        t = 3 + j % 4
        base = gaussian_init(r.derive(2), (t * 2 * 5, 1), 1.0).array.reshape(t, 2, 5)
        bump = base.copy()
        i = j % t
        bump[i] += 1.0
        seq_a = project_video(params, VideoFeatures(Tensor(base)), "sequential")
        seq_b = project_video(params, VideoFeatures(Tensor(bump)), "sequential")
        for f in range(i):
            if seq_a.array[f].tobytes() != seq_b.array[f].tobytes():
                prefix_ok = False
        ind_a = project_video(params, VideoFeatures(Tensor(base)), "independent")
        ind_b = project_video(params, VideoFeatures(Tensor(bump)), "independent")
        for f in range(t):
            same = ind_a.array[f].tobytes() == ind_b.array[f].tobytes()
            if same != (f != i):
                local_ok = False
        one = VideoFeatures(Tensor(np.ascontiguousarray(base[:1])))
        if (project_video(params, one, "independent").array.tobytes()
                != project_video(params, one, "sequential").array.tobytes()):
            t1_ok = False
    ok = prefix_ok and local_ok and t1_ok
    _report(6, "projector_causality", ok,
            "sequential prefix stable %s, independent local %s, t=1 bit-exact %s"
            % (prefix_ok, local_ok, t1_ok))


def test_7_golden_outputs_gate(tmp_path, capsys):
    sweep_dir = tmp_path / "sweep"
    dump_dir = tmp_path / "dump"
    assert cmd_sweep(apply_overrides(RunConfig(), {"out_dir": str(sweep_dir)})) == 0
    assert cmd_attn_dump(apply_overrides(RunConfig(), {"out_dir": str(dump_dir)})) == 0
    capsys.readouterr()

    stable = []
    files = [("sweep", sweep_dir, "sweep.csv"),
             ("dump", dump_dir, "records.csv"),
             ("dump", dump_dir, "attn_layer0_head0.pgm"),
             ("dump", dump_dir, "attn_layer0_head1.pgm"),
             ("dump", dump_dir, "attn_layer1_head0.pgm"),
             ("dump", dump_dir, "attn_layer1_head1.pgm")]
    for golden_sub, out_dir, name in files:
        fresh = (out_dir / name).read_bytes()
        pinned = open("%s/%s/%s" % (GOLDEN, golden_sub, name), "rb").read()
        stable.append(fresh == pinned)

    # the dump must cover the 128-visual-token, 4-group raster shape
    cfg = RunConfig()
    tokens = cfg.dump_frames * cfg.proj_queries
    rows = (dump_dir / "records.csv").read_text().splitlines()[1:]
    groups = {row.split(",")[3] for row in rows if row.split(",")[3].startswith("g")}
    shape_ok = tokens == 128 and groups == {"g0", "g1", "g2", "g3"}

    ok = all(stable) and shape_ok
    _report(7, "golden_outputs", ok,
            "byte-stable %d/%d files, %d visual tokens in %d groups"
            % (sum(stable), len(stable), tokens, len(groups)))


def test_8_training_gate(tmp_path, capsys):
    t0 = time.monotonic()
    base = {"out_dir": str(tmp_path / "train")}
    cfg = apply_overrides(RunConfig(), base)
    assert cfg.freeze == ["decoder", "embeddings", "head"]  # projector-only training
    status, results = cmd_train_toy(cfg, stop_factor=0.5)
    initial, final, final_step = results["edvt"]

    frozen_cfg = apply_overrides(RunConfig(), {"out_dir": str(tmp_path / "lr0"),
                                               "lr": "0"})
    status0, _ = cmd_train_toy(frozen_cfg)
    capsys.readouterr()
    rows = (tmp_path / "lr0" / "metrics_edvt.csv").read_text().splitlines()[1:]
    losses = [float(row.split(",")[1]) for row in rows]
    drift = max(losses) - min(losses)

    acc_rows = (tmp_path / "train" / "accuracy_edvt.csv").read_text().splitlines()
    report_ok = len(acc_rows) == 1 + len(cfg.distractor_lengths)

    elapsed = time.monotonic() - t0
    ok = (status == 0 and status0 == 0 and final <= 0.5 * initial
          and final_step <= cfg.steps and drift <= 1e-12 and report_ok
          and elapsed < 300.0)
    _report(8, "training_toy", ok,
            "loss %.3f->%.3f at step %d (<=0.5x), lr=0 drift %.1e (<=1e-12), "
            "accuracy report %s, %.0fs (<300s)"
            % (initial, final, final_step, drift, report_ok, elapsed))
