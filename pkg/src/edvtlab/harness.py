"""Command implementations behind the CLI.

Everything here is deterministic given the config: all randomness flows
from config.seed through derived streams, files are written with repr float
formatting, and the only timestamped line anywhere is the `# generated`
header of effective_config.txt (golden comparisons skip # lines).

Episode-level work (training batches, eval sets) runs per episode on its
own tape, and a worker pool may execute episodes concurrently; results
always merge in episode-index order, so worker count never changes output.
"""

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from datetime import datetime, timezone

import numpy as np

from .attention import ALL_STRATEGIES, PositionalStrategy, visual_logit_row
from .checks import CheckFailure, run_all_checks
from .config import config_lines
from .grad import GradTape, Gradients, ParamRegistry, fd_gradcheck_report, make_optimizer
from .model import DecoderConfig, DecoderParams, assemble, decoder_forward, save_checkpoint
from .numerics import SeededRng
from .projector import ChainingMode, ProjectorParams, project_video
from .synth import (
    TaskSpec,
    episode_loss,
    episode_prediction,
    sample_episode,
)


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


# --------------------------------------------------------------------------
# world building


def build_task(config, frames=None):
    root = SeededRng(config.seed)
    return TaskSpec.create(
        root.derive(2),
        classes=config.classes,
        feat_dim=config.feat_dim,
        vectors_per_frame=config.frame_vectors,
        frames=frames if frames is not None else config.frames,
        sigma=config.sigma,
        distractor_vocab=config.distractor_vocab,
    )


def build_models(config, task, strategy=None):
    root = SeededRng(config.seed)
    decoder_config = DecoderConfig(
        vocab_size=task.vocab_size,
        layers=config.layers,
        heads=config.heads,
        head_dim=config.head_dim,
        ffn_dim=config.ffn_dim,
        strategy=PositionalStrategy.from_name(strategy or config.strategy),
        tie_head=config.tie_head,
        norm_eps=config.norm_eps,
        rope_base=config.rope_base,
        max_positions=config.max_positions,
        init_scale=config.init_scale,
    )
    decoder = DecoderParams(decoder_config, root.derive(3))
    projector = ProjectorParams(
        root.derive(4),
        k=config.proj_queries,
        feat_dim=config.feat_dim,
        proj_dim=config.proj_dim,
        ffn_dim=config.proj_ffn_dim,
        model_dim=decoder_config.model_dim,
        blocks=config.proj_blocks,
        scale=config.init_scale,
        norm_eps=config.norm_eps,
    )
    return decoder, projector


def build_registry(config, decoder, projector):
    registry = ParamRegistry()
    registry.add_group("projector", projector)
    for name, view in decoder.registry_views().items():
        registry.add_group(name, view)
    for name in config.freeze:
        if registry.has_group(name):
            registry.set_frozen(name)
    return registry


# --------------------------------------------------------------------------
# output helpers


def _fmt(value):
    return repr(float(value))


def ensure_out_dir(config):
    os.makedirs(config.out_dir, exist_ok=True)
    return config.out_dir


def echo_config(config):
    """Print and persist the effective configuration."""
    out_dir = ensure_out_dir(config)
    lines = config_lines(config)
    stamp = datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")
    path = os.path.join(out_dir, "effective_config.txt")
    with open(path, "w") as fh:
        fh.write("# generated %s\n" % stamp)
        for line in lines:
            fh.write(line + "\n")
    for line in lines:
        print("config: %s" % line)
    return path


def write_pgm(path, image):
    """Plain-text (P2) grayscale raster; brighter = larger weight."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError("PGM image must be 2-D")
    h, w = img.shape
    with open(path, "w") as fh:
        fh.write("P2\n%d %d\n255\n" % (w, h))
        for row in img:
            fh.write(" ".join(str(int(v)) for v in row) + "\n")


def _to_gray(matrix):
    peak = float(matrix.max())
    if peak <= 0.0:
        return np.zeros(matrix.shape, dtype=np.int64)
    return np.floor(255.0 * matrix / peak + 0.5).astype(np.int64)


def group_key_columns(weights, n_visual, groups):
    """Sum visual-key columns into `groups` contiguous blocks; text stays per-key."""
    n = weights.shape[0]
    if n_visual % groups != 0:
        raise ValueError("%d visual keys do not split into %d groups" % (n_visual, groups))
    span = n_visual // groups
    cols = [weights[:, g * span : (g + 1) * span].sum(axis=1) for g in range(groups)]
    out = np.empty((n, groups + (n - n_visual)), dtype=np.float64)
    for g, c in enumerate(cols):
        out[:, g] = c
    out[:, groups:] = weights[:, n_visual:]
    return out


# --------------------------------------------------------------------------
# check / gradcheck commands


def cmd_check(config, tamper=None):
    echo_config(config)
    results = run_all_checks(tamper=tamper)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print("checks: %d passed, %d failed" % (len(results) - len(failed), len(failed)))
    return 1 if failed else 0


def _loss_builder(config, task, decoder, projector, strategy, mode, episodes):
    mode = ChainingMode.from_name(mode) if not isinstance(mode, ChainingMode) else mode

    def f():
        total = None
        for ep in episodes:
            loss = episode_loss(decoder, projector, ep, mode, strategy=strategy,
                                stride=config.stride)
            total = loss if total is None else total + loss
        return total * (1.0 / len(episodes))

    return f


def cmd_gradcheck(config, all_combos=False, coords_per_group=200, tolerance=1e-6):
    """Finite-difference gate over the full episode pipeline."""
    echo_config(config)
    small = replace(
        config,
        classes=3, feat_dim=4, frame_vectors=2, frames=4, distractor_vocab=4,
        proj_queries=2, proj_dim=6, proj_blocks=2, proj_ffn_dim=8,
        layers=1, heads=2, head_dim=4, ffn_dim=12, init_scale=0.25,
    )
    if all_combos:
        combos = [(s.value, m.value) for s in ALL_STRATEGIES for m in ChainingMode]
    else:
        combos = [(config.strategy, config.mode)]
    worst = 0.0
    status = 0
    for strategy, mode in combos:
        task = build_task(small)
        decoder, projector = build_models(small, task, strategy=strategy)
        registry = build_registry(small, decoder, projector)
        episodes = [
            sample_episode(task, SeededRng(config.seed).derive(10).derive(i), (0, 2)[i % 2])
            for i in range(2)
        ]
        f = _loss_builder(small, task, decoder, projector, strategy, mode, episodes)
        report = fd_gradcheck_report(f, registry, coords_per_group=coords_per_group)
        for group in sorted(report):
            err = report[group]
            worst = max(worst, err)
            ok = err <= tolerance
            status = status if ok else 1
            print(
                "gradcheck strategy=%s mode=%s group=%-10s max_rel_err=%.3e %s"
                % (strategy, mode, group, err, "ok" if ok else "EXCEEDS %g" % tolerance)
            )
    print("gradcheck: worst max_rel_err=%.3e (tolerance %g)" % (worst, tolerance))
    return status


# --------------------------------------------------------------------------
# attention dump


def cmd_attn_dump(config, merge_visual=None, strategy=None):
    merge_visual = merge_visual if merge_visual is not None else config.merge_visual
    strategy = PositionalStrategy.from_name(strategy or config.strategy)
    out_dir = ensure_out_dir(config)
    echo_config(config)

    task = build_task(config, frames=config.dump_frames)
    decoder, projector = build_models(config, task, strategy=strategy.value)
    ep = sample_episode(task, SeededRng(config.seed).derive(20), config.dump_text)
    visual = project_video(projector, ep.video, ChainingMode.from_name(config.mode),
                           config.stride)
    seq = assemble(visual, ep.prompt_ids)
    n_visual = visual.shape[0] * visual.shape[1]
    if n_visual % merge_visual != 0:
        raise CheckFailure(
            "merge group count %d does not divide %d visual tokens"
            % (merge_visual, n_visual)
        )
    logits, traces = decoder_forward(decoder, seq, strategy=strategy, collect_traces=True)

    records_path = os.path.join(out_dir, "records.csv")
    worst_mass = 0.0
    with open(records_path, "w") as fh:
        fh.write("layer,head,query,key,weight\n")
        for layer_idx, trace in enumerate(traces):
            w = trace.weights.array
            for head in range(w.shape[0]):
                grouped = group_key_columns(w[head], n_visual, merge_visual)
                sums = grouped.sum(axis=1)
                causal_floor = np.ones(len(seq))
                worst_mass = max(worst_mass, float(np.max(np.abs(sums - causal_floor))))
                labels = ["g%d" % g for g in range(merge_visual)] + [
                    "t%d" % i for i in range(n_visual, len(seq))
                ]
                for query in range(grouped.shape[0]):
                    for col, label in enumerate(labels):
                        fh.write(
                            "%d,%d,%d,%s,%s\n"
                            % (layer_idx, head, query, label, _fmt(grouped[query, col]))
                        )
                img_path = os.path.join(
                    out_dir, "attn_layer%d_head%d.pgm" % (layer_idx, head)
                )
                write_pgm(img_path, _to_gray(grouped))
    print(
        "attn-dump: %d layers x %d heads, %d slots (%d visual in %d groups), "
        "worst row-mass error %.2e" % (
            len(traces), decoder.config.heads, len(seq), n_visual, merge_visual, worst_mass,
        )
    )
    print("attn-dump: wrote %s" % records_path)
    if worst_mass > 1e-9:
        raise CheckFailure("grouped attention mass deviates from 1 by %.2e" % worst_mass)
    return 0


# --------------------------------------------------------------------------
# distance sweep


def cmd_sweep(config, lengths=None, strategies=None):
    lengths = list(lengths) if lengths is not None else list(config.distractor_lengths)
    if strategies is None:
        names = [s.value for s in ALL_STRATEGIES]
    else:
        names = [PositionalStrategy.from_name(s).value for s in strategies]
    out_dir = ensure_out_dir(config)
    echo_config(config)

    task = build_task(config)
    ep_rng = SeededRng(config.seed).derive(21)
    base = sample_episode(task, ep_rng, max(lengths))
    mode = ChainingMode.from_name(config.mode)

    rows = []
    logits_by = {}
    mass_by = {}
    for name in names:
        strategy = PositionalStrategy.from_name(name)
        decoder, projector = build_models(config, task, strategy=name)
        visual = project_video(projector, base.video, mode, config.stride)
        n_visual = visual.shape[0] * visual.shape[1]
        for d in lengths:
            prompt = base.distractor_ids[:d] + [task.query_id]
            seq = assemble(visual, prompt)
            _, traces = decoder_forward(decoder, seq, strategy=strategy, collect_traces=True)
            trace = traces[0]
            qidx = len(seq) - 1
            vrow = visual_logit_row(trace, qidx)
            weights = trace.weights.array
            for head in range(vrow.shape[0]):
                for key in range(vrow.shape[1]):
                    rows.append((name, d, head, "logit", str(key), vrow[head, key]))
                mass = float(weights[head, qidx, :n_visual].sum())
                rows.append((name, d, head, "mass", "-", mass))
                mass_by.setdefault((name, head), []).append(mass)
            logits_by[(name, d)] = vrow

    path = os.path.join(out_dir, "sweep.csv")
    with open(path, "w") as fh:
        fh.write("strategy,distractors,head,kind,key,value\n")
        for name, d, head, kind, key, value in rows:
            fh.write("%s,%d,%d,%s,%s,%s\n" % (name, d, head, kind, key, _fmt(value)))
    print("sweep: wrote %s (%d rows)" % (path, len(rows)))

    status = 0
    if "edvt" in names and len(lengths) > 1:
        ref = logits_by[("edvt", lengths[0])]
        dev = max(
            float(np.max(np.abs(logits_by[("edvt", d)] - ref))) for d in lengths[1:]
        )
        ok = dev <= 1e-15
        status = status if ok else 1
        print("sweep: edvt visual logits max deviation %.3e (tolerance 1e-15) %s"
              % (dev, "ok" if ok else "VIOLATION"))
    if "rope_all" in names and len(lengths) > 1:
        ref = logits_by[("rope_all", lengths[0])]
        dev = max(
            float(np.max(np.abs(logits_by[("rope_all", d)] - ref))) for d in lengths[1:]
        )
        ok = dev > 1e-6
        status = status if ok else 1
        print("sweep: rope_all visual logits max deviation %.3e (must exceed 1e-6) %s"
              % (dev, "ok" if ok else "VIOLATION"))
    for (name, head), masses in sorted(mass_by.items()):
        drift = all(b <= a for a, b in zip(masses, masses[1:]))
        print("sweep: visual mass %s head %d: %s%s"
              % (name, head, " -> ".join("%.4f" % m for m in masses),
                 "" if drift else " (not monotone)"))
    if status:
        raise CheckFailure("sweep distance assertions failed")
    return 0


# --------------------------------------------------------------------------
# toy training


def _episode_for_index(task, data_root, lengths, index):
    seed_rng = data_root.derive(index)
    d = lengths[index % len(lengths)]
    return sample_episode(task, seed_rng, d)


def _episode_grads(config, task, decoder, projector, registry, strategy, mode, ep):
    with GradTape() as tape:
        try:
            loss = episode_loss(decoder, projector, ep, mode, strategy=strategy,
                                stride=config.stride)
        except ValueError as exc:
            # structurally valid sequences only reach this through non-finite
            # logits (overflowed parameters), so surface it as divergence
            raise DivergenceError("episode forward failed: %s" % exc) from exc
    grads = tape.backward(loss)
    flat = {}
    for group in registry.groups():
        for name, tensor in registry.named_tensors(group).items():
            flat[(group, name)] = grads.wrt(tensor).array
    return loss.item(), flat


def _params_finite(registry):
    for _, _, tensor in registry.all_parameters():
        if not np.all(np.isfinite(tensor.array)):
            return False
    return True


def _mean_eval_loss(config, decoder, projector, strategy, mode, episodes, pool):
    def one(ep):
        try:
            return episode_loss(decoder, projector, ep, mode, strategy=strategy,
                                stride=config.stride).item()
        except ValueError as exc:
            raise DivergenceError("eval forward failed: %s" % exc) from exc

    if pool is None:
        values = [one(ep) for ep in episodes]
    else:
        values = list(pool.map(one, episodes))
    return sum(values) / len(values)


def cmd_train_toy(config, strategies=None, stop_factor=None):
    out_dir = ensure_out_dir(config)
    echo_config(config)
    if strategies is None:
        names = [config.strategy]
    elif strategies == "all" or strategies == ["all"]:
        names = [s.value for s in ALL_STRATEGIES]
    else:
        names = [PositionalStrategy.from_name(s).value for s in strategies]

    lengths = list(config.distractor_lengths)
    mode = ChainingMode.from_name(config.mode)
    task = build_task(config)
    root = SeededRng(config.seed)
    train_root = root.derive(6)
    eval_loss_root = root.derive(7)
    eval_acc_root = root.derive(8)

    eval_set = [
        _episode_for_index(task, eval_loss_root, lengths, i)
        for i in range(config.eval_episodes)
    ]
    acc_sets = {
        d: [sample_episode(task, eval_acc_root.derive(d * 100003 + i), d)
            for i in range(config.eval_episodes)]
        for d in lengths
    }

    pool = ThreadPoolExecutor(max_workers=config.workers) if config.workers > 1 else None
    results = {}
    try:
        for name in names:
            decoder, projector = build_models(config, task, strategy=name)
            registry = build_registry(config, decoder, projector)
            optimizer = make_optimizer(config.optimizer, config.lr)
            trainable = registry.trainable_groups()
            print("train-toy[%s]: trainable groups: %s (frozen: %s)"
                  % (name, ",".join(trainable) or "none",
                     ",".join(g for g in registry.groups() if registry.is_frozen(g))))

            metrics = []
            initial = _mean_eval_loss(config, decoder, projector, name, mode, eval_set, pool)
            metrics.append((0, initial))
            print("train-toy[%s]: step 0 eval_loss %.6f" % (name, initial))

            def batch_losses(step):
                base = (step - 1) * config.batch_size
                indices = list(range(base, base + config.batch_size))

                def one(i):
                    ep = _episode_for_index(task, train_root, lengths, i)
                    return _episode_grads(config, task, decoder, projector, registry,
                                          name, mode, ep)

                if pool is None:
                    return [one(i) for i in indices]
                return list(pool.map(one, indices))

            final_step = config.steps
            for step in range(1, config.steps + 1):
                outs = batch_losses(step)
                mean_loss = sum(o[0] for o in outs) / len(outs)
                if not math.isfinite(mean_loss):
                    raise DivergenceError(
                        "non-finite training loss %r at step %d (%s)" % (mean_loss, step, name)
                    )
                summed = {}
                for _, flat in outs:
                    for key, arr in flat.items():
                        acc = summed.get(key)
                        summed[key] = arr if acc is None else acc + arr
                by_id = {}
                scale = 1.0 / len(outs)
                for (group, pname), arr in summed.items():
                    tensor = registry.named_tensors(group)[pname]
                    by_id[id(tensor)] = arr * scale
                optimizer.step(registry, Gradients(by_id, None))
                if not _params_finite(registry):
                    raise DivergenceError(
                        "non-finite parameters after step %d (%s)" % (step, name)
                    )

                if step % config.log_every == 0 or step == config.steps:
                    eval_loss = _mean_eval_loss(config, decoder, projector, name, mode,
                                                eval_set, pool)
                    if not math.isfinite(eval_loss):
                        raise DivergenceError(
                            "non-finite eval loss at step %d (%s)" % (step, name)
                        )
                    metrics.append((step, eval_loss))
                    print("train-toy[%s]: step %d eval_loss %.6f" % (name, step, eval_loss))
                    if stop_factor is not None and eval_loss <= stop_factor * initial:
                        final_step = step
                        break

            metrics_path = os.path.join(out_dir, "metrics_%s.csv" % name)
            with open(metrics_path, "w") as fh:
                fh.write("step,eval_loss\n")
                for step, value in metrics:
                    fh.write("%d,%s\n" % (step, _fmt(value)))

            acc_path = os.path.join(out_dir, "accuracy_%s.csv" % name)
            with open(acc_path, "w") as fh:
                fh.write("strategy,distractors,accuracy\n")
                for d in lengths:
                    def predict(ep):
                        return episode_prediction(decoder, projector, ep, mode,
                                                  strategy=name, stride=config.stride)

                    if pool is None:
                        preds = [predict(ep) for ep in acc_sets[d]]
                    else:
                        preds = list(pool.map(predict, acc_sets[d]))
                    hits = sum(1 for p, ep in zip(preds, acc_sets[d]) if p == ep.label)
                    acc = hits / len(acc_sets[d])
                    fh.write("%s,%d,%s\n" % (name, d, _fmt(acc)))
                    print("train-toy[%s]: accuracy at D=%d: %.4f" % (name, d, acc))

            named = {}
            for pname, tensor in decoder.named_tensors().items():
                named["decoder." + pname] = tensor
            for pname, tensor in projector.named_tensors().items():
                named["projector." + pname] = tensor
            ckpt_path = os.path.join(out_dir, "checkpoint_%s.bin" % name)
            save_checkpoint(ckpt_path, named)

            final = metrics[-1][1]
            print(
                "train-toy[%s]: initial %.6f final %.6f ratio %.4f over %d steps"
                % (name, initial, final, final / initial if initial else math.inf, final_step)
            )
            results[name] = (initial, final, final_step)
    finally:
        if pool is not None:
            pool.shutdown()
    return 0, results
