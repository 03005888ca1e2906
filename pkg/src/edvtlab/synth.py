"""Synthetic recall task: classify which prototype generated the video.

Each episode draws a class c, renders t frames of l feature vectors as
prototype[c] plus N(0, sigma^2) noise, then builds a text prompt of D
distractor tokens followed by the query token. The target answer is the
class id; the model reads it off the final position's logits restricted to
the answer ids. With C well-separated prototypes the video fully determines
the answer, distractors carry no information, and chance level is ln C.

Vocabulary layout: ids [0, C) are answers, [C, C + distractor_vocab) are
distractor tokens, then the query id and the stop id. Episodes serialize as
one line each (seed, class, distractor ids) and regenerate from the seed on
read, which doubles as an integrity check.
"""

import math

import numpy as np

from .model import assemble, decoder_forward
from .numerics import SeededRng, Tensor, cross_entropy, gaussian_init, slice_cols, slice_rows
from .projector import ChainingMode, VideoFeatures, project_video


class TaskSpec:
    """Frozen description of the task distribution, prototypes included."""

    def __init__(self, prototypes, classes, feat_dim, vectors_per_frame, frames,
                 sigma, distractor_vocab):
        if not isinstance(prototypes, Tensor) or prototypes.shape != (classes, feat_dim):
            raise ValueError("prototypes must be a (classes, feat_dim) Tensor")
        self.prototypes = prototypes
        self.classes = int(classes)
        self.feat_dim = int(feat_dim)
        self.vectors_per_frame = int(vectors_per_frame)
        self.frames = int(frames)
        self.sigma = float(sigma)
        self.distractor_vocab = int(distractor_vocab)
        if self.classes < 2:
            raise ValueError("need at least 2 classes, got %d" % self.classes)
        if min(self.feat_dim, self.vectors_per_frame, self.frames) < 1:
            raise ValueError("feat_dim, vectors_per_frame and frames must be >= 1")
        if not self.sigma > 0.0:
            raise ValueError("sigma must be > 0, got %g" % self.sigma)
        if self.distractor_vocab < 1:
            raise ValueError("distractor_vocab must be >= 1")

    # vocabulary layout
    @property
    def answer_ids(self):
        return range(0, self.classes)

    @property
    def distractor_ids(self):
        return range(self.classes, self.classes + self.distractor_vocab)

    @property
    def query_id(self):
        return self.classes + self.distractor_vocab

    @property
    def stop_id(self):
        return self.classes + self.distractor_vocab + 1

    @property
    def vocab_size(self):
        return self.classes + self.distractor_vocab + 2

    def min_prototype_distance(self):
        p = self.prototypes.array
        best = math.inf
        for i in range(self.classes):
            for j in range(i + 1, self.classes):
                d = float(np.linalg.norm(p[i] - p[j]))
                if d < best:
                    best = d
        return best

    @classmethod
    def create(cls, rng, classes=8, feat_dim=16, vectors_per_frame=4, frames=4,
               sigma=0.1, distractor_vocab=16, separation=4.0):
        """Draw prototypes, resampling until all pairs sit > separation*sigma apart."""
        if not isinstance(rng, SeededRng):
            raise TypeError("rng must be a SeededRng")
        floor = separation * sigma
        for _ in range(1000):
            prototypes = gaussian_init(rng, (classes, feat_dim), 1.0)
            spec = cls(prototypes, classes, feat_dim, vectors_per_frame, frames,
                       sigma, distractor_vocab)
            if spec.min_prototype_distance() > floor:
                return spec
        raise RuntimeError(
            "could not separate %d prototypes beyond %g after 1000 draws"
            % (classes, floor)
        )


class Episode:
    """One sampled episode. seed regenerates it; num_classes sizes the answer slice."""

    __slots__ = ("video", "prompt_ids", "label", "distractor_ids", "seed", "num_classes")

    def __init__(self, video, prompt_ids, label, distractor_ids, seed, num_classes):
        self.video = video
        self.prompt_ids = list(prompt_ids)
        self.label = int(label)
        self.distractor_ids = list(distractor_ids)
        self.seed = int(seed)
        self.num_classes = int(num_classes)


def sample_episode(spec, rng, distractors):
    """Draw one episode from a fresh stream.

    Draw order is fixed (class, then frame noise, then distractor ids) so a
    seed fully determines the episode. Pass a freshly seeded rng: the stored
    seed only regenerates the episode if no draws were consumed before.
    """
    if not isinstance(spec, TaskSpec):
        raise TypeError("spec must be a TaskSpec")
    if not isinstance(rng, SeededRng):
        raise TypeError("rng must be a SeededRng")
    distractors = int(distractors)
    if distractors < 0:
        raise ValueError("distractor count must be >= 0, got %d" % distractors)
    label = rng.randint(spec.classes)
    t, l, f = spec.frames, spec.vectors_per_frame, spec.feat_dim
    noise = rng.gaussian(t * l * f).array.reshape(t, l, f) * spec.sigma
    frames = noise + spec.prototypes.array[label][None, None, :]
    video = VideoFeatures(Tensor._wrap(np.ascontiguousarray(frames)))
    if distractors > 0:
        raw = rng.randints(distractors, spec.distractor_vocab)
        distractor_ids = [spec.classes + r for r in raw]
    else:
        distractor_ids = []
    prompt_ids = distractor_ids + [spec.query_id]
    return Episode(video, prompt_ids, label, distractor_ids, rng.seed, spec.classes)


def episode_from_seed(spec, seed, distractors):
    return sample_episode(spec, SeededRng(seed), distractors)


def episode_loss(decoder_params, projector_params, ep, mode, strategy=None, stride=1):
    """Cross-entropy of the true class on the final position's answer logits.

    Uniform logits give exactly ln(num_classes): the loss reads only the
    answer-id slice, never the distractor/query/stop ids.
    """
    mode = mode if isinstance(mode, ChainingMode) else ChainingMode.from_name(mode)
    visual = project_video(projector_params, ep.video, mode, stride)
    seq = assemble(visual, ep.prompt_ids)
    logits = decoder_forward(decoder_params, seq, strategy=strategy)
    last = slice_rows(logits, logits.shape[0] - 1, logits.shape[0])
    answers = slice_cols(last, 0, ep.num_classes)
    return cross_entropy(answers, ep.label)


def episode_prediction(decoder_params, projector_params, ep, mode, strategy=None, stride=1):
    """Arg-max answer id at the final position (ties -> smallest id)."""
    mode = mode if isinstance(mode, ChainingMode) else ChainingMode.from_name(mode)
    visual = project_video(projector_params, ep.video, mode, stride)
    seq = assemble(visual, ep.prompt_ids)
    logits = decoder_forward(decoder_params, seq, strategy=strategy)
    return int(np.argmax(logits.array[-1, : ep.num_classes]))


# --------------------------------------------------------------------------
# line-oriented episode files


def episode_line(ep):
    ids = ",".join(str(i) for i in ep.distractor_ids) if ep.distractor_ids else "-"
    return "%d %d %s" % (ep.seed, ep.label, ids)


def write_episodes(path, episodes):
    with open(path, "w") as fh:
        fh.write("# episodes v1: seed label distractor_ids\n")
        for ep in episodes:
            fh.write(episode_line(ep) + "\n")


def read_episodes(path, spec):
    """Regenerate episodes from their seeds, verifying stored fields match."""
    episodes = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ValueError("%s:%d: expected 'seed label ids'" % (path, lineno))
            seed, label = int(parts[0]), int(parts[1])
            ids = [] if parts[2] == "-" else [int(v) for v in parts[2].split(",")]
            ep = episode_from_seed(spec, seed, len(ids))
            if ep.label != label or ep.distractor_ids != ids:
                raise ValueError(
                    "%s:%d: stored episode does not regenerate from its seed"
                    % (path, lineno)
                )
            episodes.append(ep)
    return episodes
