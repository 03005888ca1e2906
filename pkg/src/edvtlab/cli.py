"""Command-line entry point.

Exit codes: 0 success, 1 check/assertion failure, 2 usage or configuration
error, 3 numerical divergence during training.
"""

import argparse
import sys

from .checks import CheckFailure
from .config import ConfigError, load_config
from .harness import (
    DivergenceError,
    cmd_attn_dump,
    cmd_check,
    cmd_gradcheck,
    cmd_sweep,
    cmd_train_toy,
)

_STRATEGY_NAMES = ("nopos", "rope_all", "edvt", "fix_vpe", "rope_query_edvt_key")


def _add_common(parser):
    parser.add_argument("--config", metavar="PATH", help="key = value configuration file")
    parser.add_argument("--seed", type=int, help="root seed (overrides the file)")
    parser.add_argument("--out", metavar="DIR", help="output directory")
    parser.add_argument(
        "--set", action="append", default=[], metavar="KEY=VALUE", dest="assignments",
        help="override any config field; repeatable",
    )


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="edvtlab",
        description="Dual-plane rotary attention testbed: invariant checks, "
        "gradient checks, attention dumps, distractor sweeps, toy training.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("check", help="run every module invariant check")
    p.add_argument(
        "--tamper", choices=["swap-merge"],
        help="inject a merge-mask polarity fault (mutation test; the suite must go red)",
    )
    _add_common(p)

    p = sub.add_parser("gradcheck", help="finite-difference gate on the full pipeline")
    p.add_argument("--all-combos", action="store_true",
                   help="check every strategy x chaining-mode pair")
    p.add_argument("--coords", type=int, default=200,
                   help="sampled coordinates per parameter group (default 200)")
    p.add_argument("--strategy", choices=_STRATEGY_NAMES)
    p.add_argument("--mode", choices=["independent", "sequential"])
    _add_common(p)

    p = sub.add_parser("attn-dump", help="write grouped attention records and rasters")
    p.add_argument("--merge-visual", type=int, metavar="G",
                   help="number of contiguous visual-key groups")
    p.add_argument("--strategy", choices=_STRATEGY_NAMES)
    _add_common(p)

    p = sub.add_parser("sweep", help="visual logits and mass across distractor lengths")
    p.add_argument("--lengths", metavar="D0,D1,...",
                   help="distractor lengths (default from config)")
    p.add_argument("--strategy", choices=_STRATEGY_NAMES + ("all",), default="all",
                   help="one strategy, or all (default)")
    p.add_argument("--mode", choices=["independent", "sequential"])
    _add_common(p)

    p = sub.add_parser("train-toy", help="train the projector on the synthetic task")
    p.add_argument("--strategy", choices=_STRATEGY_NAMES + ("all",),
                   help="one strategy, or all for a comparison run")
    p.add_argument("--mode", choices=["independent", "sequential"])
    p.add_argument("--freeze", metavar="G0,G1,...",
                   help="frozen parameter groups (default from config)")
    p.add_argument("--workers", type=int, help="episode-level worker threads")
    p.add_argument("--stop-factor", type=float, default=None,
                   help="stop once eval loss reaches this fraction of the initial loss")
    _add_common(p)

    return parser


def _overrides_from(args):
    overrides = {}
    for pair in args.assignments:
        key, sep, value = pair.partition("=")
        if not sep:
            raise ConfigError(key.strip() or "--set", "expected KEY=VALUE, got %r" % pair)
        overrides[key.strip()] = value.strip()
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out_dir"] = args.out
    mapping = (
        ("mode", "mode"),
        ("freeze", "freeze"),
        ("workers", "workers"),
        ("merge_visual", "merge_visual"),
        ("lengths", "distractor_lengths"),
    )
    for attr, field in mapping:
        value = getattr(args, attr, None)
        if value is not None:
            overrides[field] = value
    strategy = getattr(args, "strategy", None)
    if strategy is not None and strategy != "all":
        overrides["strategy"] = strategy
    return overrides


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        config = load_config(args.config, _overrides_from(args))
        if args.command == "check":
            return cmd_check(config, tamper=args.tamper)
        if args.command == "gradcheck":
            return cmd_gradcheck(config, all_combos=args.all_combos,
                                 coords_per_group=args.coords)
        if args.command == "attn-dump":
            return cmd_attn_dump(config)
        if args.command == "sweep":
            strategies = None if args.strategy == "all" else [args.strategy]
            return cmd_sweep(config, strategies=strategies)
        if args.command == "train-toy":
            strategies = [args.strategy] if args.strategy is not None else None
            status, _ = cmd_train_toy(config, strategies=strategies,
                                      stop_factor=args.stop_factor)
            return status
        parser.error("unknown command %r" % args.command)
    except ConfigError as exc:
        print("config error: %s" % exc, file=sys.stderr)
        return 2
    except CheckFailure as exc:
        print("check failure: %s" % exc, file=sys.stderr)
        return 1
    except DivergenceError as exc:
        print("divergence: %s" % exc, file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
