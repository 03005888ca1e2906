"""Flat key=value run configuration.

One namespace, no sections. A config file holds `key = value` lines (blank
lines and # comments ignored); CLI flags override file values; anything the
schema does not know is an error, not a warning. Every command echoes the
effective configuration it ran with to out_dir/effective_config.txt.
"""

from dataclasses import dataclass, fields, replace

from .attention import PositionalStrategy
from .projector import ChainingMode


class ConfigError(ValueError):
    """Bad configuration; carries the offending field name."""

    def __init__(self, field, message):
        self.field = field
        super().__init__("config field %r: %s" % (field, message))


def _parse_bool(raw):
    low = raw.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError("expected a boolean, got %r" % raw)


def _parse_int_list(raw):
    raw = raw.strip()
    if not raw:
        return []
    return [int(v.strip()) for v in raw.split(",")]


def _parse_str_list(raw):
    raw = raw.strip()
    if not raw:
        return []
    return [v.strip() for v in raw.split(",") if v.strip()]


_PARSERS = {
    "int": int,
    "float": float,
    "str": lambda raw: raw.strip(),
    "bool": _parse_bool,
    "int_list": _parse_int_list,
    "str_list": _parse_str_list,
}


def _format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


@dataclass
class RunConfig:
    # global
    seed: int = 1
    strategy: str = "edvt"
    mode: str = "independent"
    out_dir: str = "out"
    workers: int = 1
    # task
    classes: int = 8
    feat_dim: int = 16
    frame_vectors: int = 4
    frames: int = 4
    sigma: float = 0.1
    distractor_vocab: int = 16
    distractor_lengths: list = None
    # projector
    proj_queries: int = 2
    proj_dim: int = 16
    proj_blocks: int = 2
    proj_ffn_dim: int = 32
    stride: int = 1
    # decoder
    layers: int = 2
    heads: int = 2
    head_dim: int = 16
    ffn_dim: int = 64
    tie_head: bool = False
    max_positions: int = 512
    rope_base: float = 10000.0
    norm_eps: float = 1e-6
    # 0.1 keeps the initial loss at chance while leaving the frozen readout
    # enough dynamic range for projector-only training to converge
    init_scale: float = 0.1
    # training
    steps: int = 2000
    batch_size: int = 8
    lr: float = 0.002
    optimizer: str = "adam"
    log_every: int = 50
    eval_episodes: int = 64
    freeze: list = None
    # dumps
    dump_frames: int = 64
    dump_text: int = 24
    merge_visual: int = 4

    def __post_init__(self):
        if self.distractor_lengths is None:
            self.distractor_lengths = [0, 8, 32, 64]
        if self.freeze is None:
            self.freeze = ["decoder", "embeddings", "head"]


_FIELD_KINDS = {
    "seed": "int",
    "strategy": "str",
    "mode": "str",
    "out_dir": "str",
    "workers": "int",
    "classes": "int",
    "feat_dim": "int",
    "frame_vectors": "int",
    "frames": "int",
    "sigma": "float",
    "distractor_vocab": "int",
    "distractor_lengths": "int_list",
    "proj_queries": "int",
    "proj_dim": "int",
    "proj_blocks": "int",
    "proj_ffn_dim": "int",
    "stride": "int",
    "layers": "int",
    "heads": "int",
    "head_dim": "int",
    "ffn_dim": "int",
    "tie_head": "bool",
    "max_positions": "int",
    "rope_base": "float",
    "norm_eps": "float",
    "init_scale": "float",
    "steps": "int",
    "batch_size": "int",
    "lr": "float",
    "optimizer": "str",
    "log_every": "int",
    "eval_episodes": "int",
    "freeze": "str_list",
    "dump_frames": "int",
    "dump_text": "int",
    "merge_visual": "int",
}

assert set(_FIELD_KINDS) == {f.name for f in fields(RunConfig)}

_FREEZABLE = ("projector", "decoder", "embeddings", "head")


def parse_config_file(path):
    """Read a key=value file into a raw {field: value} dict."""
    raw = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(
                    "line %d" % lineno, "expected key = value, got %r" % stripped
                )
            key, _, value = stripped.partition("=")
            key = key.strip()
            if key not in _FIELD_KINDS:
                raise ConfigError(key, "unknown key (line %d of %s)" % (lineno, path))
            if key in raw:
                raise ConfigError(key, "duplicated on line %d" % lineno)
            try:
                raw[key] = _PARSERS[_FIELD_KINDS[key]](value.strip())
            except ValueError as exc:
                raise ConfigError(key, str(exc)) from exc
    return raw


def apply_overrides(config, overrides):
    """New RunConfig with string overrides parsed per the schema."""
    parsed = {}
    for key, value in overrides.items():
        if key not in _FIELD_KINDS:
            raise ConfigError(key, "unknown key")
        if isinstance(value, str):
            try:
                parsed[key] = _PARSERS[_FIELD_KINDS[key]](value)
            except ValueError as exc:
                raise ConfigError(key, str(exc)) from exc
        else:
            parsed[key] = value
    return replace(config, **parsed)


def load_config(path=None, overrides=None):
    base = RunConfig()
    if path is not None:
        base = replace(base, **parse_config_file(path))
    if overrides:
        base = apply_overrides(base, overrides)
    validate_config(base)
    return base


def validate_config(c):
    def need(cond, field, message):
        if not cond:
            raise ConfigError(field, message)

    try:
        PositionalStrategy.from_name(c.strategy)
    except ValueError as exc:
        raise ConfigError("strategy", str(exc)) from exc
    try:
        ChainingMode.from_name(c.mode)
    except ValueError as exc:
        raise ConfigError("mode", str(exc)) from exc
    need(c.workers >= 1, "workers", "must be >= 1")
    need(c.classes >= 2, "classes", "must be >= 2")
    need(c.feat_dim >= 1, "feat_dim", "must be >= 1")
    need(c.frame_vectors >= 1, "frame_vectors", "must be >= 1")
    need(c.frames >= 1, "frames", "must be >= 1")
    need(c.sigma > 0, "sigma", "must be > 0")
    need(c.distractor_vocab >= 1, "distractor_vocab", "must be >= 1")
    need(len(c.distractor_lengths) >= 1, "distractor_lengths", "must list at least one length")
    need(all(d >= 0 for d in c.distractor_lengths), "distractor_lengths", "lengths must be >= 0")
    need(c.proj_queries >= 1, "proj_queries", "must be >= 1")
    need(c.proj_dim >= 1, "proj_dim", "must be >= 1")
    need(c.proj_blocks >= 1, "proj_blocks", "must be >= 1")
    need(c.proj_ffn_dim >= 1, "proj_ffn_dim", "must be >= 1")
    need(c.stride >= 1, "stride", "must be >= 1")
    need(c.layers >= 1, "layers", "must be >= 1")
    need(c.heads >= 1, "heads", "must be >= 1")
    need(c.head_dim >= 2 and c.head_dim % 2 == 0, "head_dim", "must be even and >= 2")
    need(c.ffn_dim >= 1, "ffn_dim", "must be >= 1")
    need(c.max_positions >= 1, "max_positions", "must be >= 1")
    need(c.rope_base > 0, "rope_base", "must be > 0")
    need(c.norm_eps > 0, "norm_eps", "must be > 0")
    need(c.init_scale > 0, "init_scale", "must be > 0")
    need(c.steps >= 1, "steps", "must be >= 1")
    need(c.batch_size >= 1, "batch_size", "must be >= 1")
    need(c.lr >= 0, "lr", "must be >= 0")
    need(c.optimizer in ("sgd", "adam"), "optimizer", "must be sgd or adam")
    need(c.log_every >= 1, "log_every", "must be >= 1")
    need(c.eval_episodes >= 1, "eval_episodes", "must be >= 1")
    for name in c.freeze:
        need(name in _FREEZABLE, "freeze",
             "unknown group %r (expected subset of %s)" % (name, ",".join(_FREEZABLE)))
    need(c.dump_frames >= 1, "dump_frames", "must be >= 1")
    need(c.dump_text >= 0, "dump_text", "must be >= 0")
    need(c.merge_visual >= 1, "merge_visual", "must be >= 1")
    visual_tokens = c.dump_frames * c.proj_queries
    need(visual_tokens % c.merge_visual == 0, "merge_visual",
         "must divide the %d visual tokens of a dump" % visual_tokens)
    longest = c.frames * c.proj_queries + max(c.distractor_lengths) + 1
    need(longest <= c.max_positions, "max_positions",
         "sequence of %d slots exceeds max_positions %d" % (longest, c.max_positions))
    dump_len = visual_tokens + c.dump_text + 1
    need(dump_len <= c.max_positions, "max_positions",
         "dump sequence of %d slots exceeds max_positions %d" % (dump_len, c.max_positions))
    return c


def config_lines(c):
    """Deterministic key = value lines, sorted by key."""
    out = []
    for name in sorted(_FIELD_KINDS):
        out.append("%s = %s" % (name, _format_value(getattr(c, name))))
    return out
