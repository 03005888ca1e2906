"""Equal-distance dual-plane rotary attention on a synthetic video QA task.

A small, fully deterministic stack: float64 kernels (compiled extension with
a pure-Python twin), tape-based reverse-mode gradients, a rotary table with
per-token rotation assignment, dual-plane attention with modality-based
logit merging, a query-bank visual projector with optional frame chaining,
a pre-norm decoder, and a seeded synthetic recall task used to train the
projector against a frozen decoder.
"""

from ._kernels import BACKEND as KERNEL_BACKEND
from .attention import (
    ALL_STRATEGIES,
    AttentionParams,
    AttentionTrace,
    ModalityMask,
    PositionalStrategy,
    attention_forward,
    merge_logits,
    visual_logit_row,
)
from .checks import CheckFailure, CheckResult, run_all_checks
from .config import ConfigError, RunConfig, load_config, validate_config
from .grad import (
    Adam,
    Gradients,
    GradTape,
    ParamRegistry,
    Sgd,
    backward,
    fd_gradcheck,
    fd_gradcheck_report,
    make_optimizer,
)
from .harness import DivergenceError
from .model import (
    DecoderConfig,
    DecoderParams,
    MixedSequence,
    TextSlot,
    VisualSlot,
    assemble,
    decoder_forward,
    greedy_decode,
    load_checkpoint,
    save_checkpoint,
)
from .numerics import SeededRng, Tensor, gaussian_init
from .projector import (
    ChainingMode,
    ProjectorParams,
    VideoFeatures,
    project_frame,
    project_video,
    subsample_frame_indices,
)
from .rope import NO_ROTATION, RotaryTable, apply_rotary, apply_rotary_selected
from .synth import (
    Episode,
    TaskSpec,
    episode_from_seed,
    episode_loss,
    episode_prediction,
    read_episodes,
    sample_episode,
    write_episodes,
)

__version__ = "0.1.0"

__all__ = [
    "ALL_STRATEGIES",
    "Adam",
    "AttentionParams",
    "AttentionTrace",
    "ChainingMode",
    "CheckFailure",
    "CheckResult",
    "ConfigError",
    "DecoderConfig",
    "DecoderParams",
    "DivergenceError",
    "Episode",
    "GradTape",
    "Gradients",
    "KERNEL_BACKEND",
    "MixedSequence",
    "ModalityMask",
    "NO_ROTATION",
    "ParamRegistry",
    "PositionalStrategy",
    "ProjectorParams",
    "RotaryTable",
    "RunConfig",
    "SeededRng",
    "Sgd",
    "TaskSpec",
    "Tensor",
    "TextSlot",
    "VideoFeatures",
    "VisualSlot",
    "apply_rotary",
    "apply_rotary_selected",
    "assemble",
    "attention_forward",
    "backward",
    "decoder_forward",
    "episode_from_seed",
    "episode_loss",
    "episode_prediction",
    "fd_gradcheck",
    "fd_gradcheck_report",
    "gaussian_init",
    "greedy_decode",
    "load_checkpoint",
    "load_config",
    "make_optimizer",
    "merge_logits",
    "project_frame",
    "project_video",
    "read_episodes",
    "run_all_checks",
    "sample_episode",
    "save_checkpoint",
    "subsample_frame_indices",
    "validate_config",
    "visual_logit_row",
    "write_episodes",
    "__version__",
]
