"""Synthetic causal-temporal video corpus and its JSONL file format.

Each video is a chain of distinct events. Every event type has a prototype
feature vector; a frame is its event's prototype plus Gaussian noise. Causal
structure comes from a dataset-level causal graph over event types: a
non-adjacent pair of events (i, j) in a video is causally linked iff the
type graph has the edge type_i -> type_j (each type edge is drawn once with
probability ``causal_edge_prob``). Consecutive events are always linked.
Because the graph is over types, the causal links of a video can be inferred
from what is visible in its frames.

Caption grammar (whitespace tokens)::

    <bos> e1 then e2 then ... en [because ei so ej]* <eos>

with one ``because ... so ...`` clause per non-adjacent causal pair in
lexicographic (i, j) order.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .decoder import SPECIAL_TOKENS, Vocabulary
from .losses import CausalAnnotation

EVENT_NAMES = (
    "push", "roll", "fall", "break", "spill", "open", "close", "light",
    "burn", "melt", "jump", "land", "throw", "catch", "hit", "bounce",
    "drop", "crack", "pour", "splash", "slide", "stop", "kick", "fly",
)
THEN, BECAUSE, SO = "then", "because", "so"
CONNECTIVES = (THEN, BECAUSE, SO)
BOS_TOKEN, EOS_TOKEN = SPECIAL_TOKENS[1], SPECIAL_TOKENS[2]


class DatasetFormatError(ValueError):
    pass


class DatasetSchemaError(DatasetFormatError):
    pass


class VocabularyOverflowError(ValueError):
    pass


@dataclass(frozen=True)
class GeneratorConfig:
    n_event_types: int = 8
    n_events_per_video: tuple[int, int] = (1, 3)
    frames_per_event: tuple[int, int] = (1, 2)
    d_v: int = 16
    feature_noise_sigma: float = 0.5
    causal_edge_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "n_events_per_video", tuple(self.n_events_per_video))
        object.__setattr__(self, "frames_per_event", tuple(self.frames_per_event))
        if self.n_event_types < 1:
            raise ValueError("n_event_types must be positive")
        if self.n_event_types > len(EVENT_NAMES):
            raise VocabularyOverflowError(
                f"n_event_types={self.n_event_types} exceeds the {len(EVENT_NAMES)} available event names")
        for name in ("n_events_per_video", "frames_per_event"):
            lo, hi = getattr(self, name)
            if not 1 <= lo <= hi:
                raise ValueError(f"{name} must be a non-empty range of positive ints, got {(lo, hi)}")
        if self.n_events_per_video[1] > self.n_event_types:
            raise ValueError("n_events_per_video exceeds n_event_types (events in a video are distinct)")
        if self.d_v < 1:
            raise ValueError("d_v must be positive")
        if self.feature_noise_sigma < 0:
            raise ValueError("feature_noise_sigma must be non-negative")
        if not 0.0 <= self.causal_edge_prob <= 1.0:
            raise ValueError("causal_edge_prob must lie in [0, 1]")

    @property
    def max_frames(self) -> int:
        return self.n_events_per_video[1] * self.frames_per_event[1]

    @property
    def max_caption_tokens(self) -> int:
        """Longest possible caption including <bos> and <eos>."""
        n = self.n_events_per_video[1]
        extra_pairs = max(0, (n - 1) * (n - 2) // 2)
        return 2 + (2 * n - 1) + 4 * extra_pairs


@dataclass(frozen=True)
class VideoSample:
    frames: np.ndarray                      # [T, d_v]
    caption: tuple[str, ...]                # <bos> ... <eos>
    causal_edges: tuple[tuple[int, int], ...]  # (cause_frame, effect_frame)
    event_ids: tuple[int, ...]              # event index (position in the chain) per frame

    def __post_init__(self):
        frames = np.array(self.frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[0] < 1 or frames.shape[1] < 1:
            raise DatasetFormatError(f"frames must be a non-empty [T, d_v] matrix, got {frames.shape}")
        frames.flags.writeable = False
        object.__setattr__(self, "frames", frames)
        caption = tuple(self.caption)
        if len(caption) < 2 or caption[0] != BOS_TOKEN or caption[-1] != EOS_TOKEN:
            raise DatasetFormatError("caption must start with <bos> and end with <eos>")
        if any(tok in (BOS_TOKEN, EOS_TOKEN) for tok in caption[1:-1]):
            raise DatasetFormatError("<bos>/<eos> may only appear at the caption ends")
        object.__setattr__(self, "caption", caption)
        edges = tuple((int(a), int(b)) for a, b in self.causal_edges)
        t = frames.shape[0]
        for a, b in edges:
            if not (0 <= a < t and 0 <= b < t) or a == b:
                raise DatasetFormatError(f"causal edge {(a, b)} invalid for {t} frames")
        object.__setattr__(self, "causal_edges", edges)
        event_ids = tuple(int(e) for e in self.event_ids)
        if len(event_ids) != t:
            raise DatasetFormatError(f"{len(event_ids)} event ids for {t} frames")
        object.__setattr__(self, "event_ids", event_ids)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def annotation(self) -> CausalAnnotation:
        return CausalAnnotation.from_edges(self.n_frames, self.causal_edges)

    @property
    def words(self) -> tuple[str, ...]:
        """Caption without <bos>/<eos>."""
        return self.caption[1:-1]

    def event_sequence(self) -> list[str]:
        """Ground-truth event names in temporal order (read from the narrative part)."""
        names = []
        for tok in self.words:
            if tok == BECAUSE:
                break
            if tok != THEN:
                names.append(tok)
        return names

    def has_nonchain_edge(self) -> bool:
        return BECAUSE in self.words

    def __eq__(self, other) -> bool:
        if not isinstance(other, VideoSample):
            return NotImplemented
        return (np.array_equal(self.frames, other.frames) and self.caption == other.caption
                and self.causal_edges == other.causal_edges and self.event_ids == other.event_ids)

    __hash__ = None


@dataclass(frozen=True)
class World:
    """Dataset-level ground truth shared by every video of a corpus."""

    names: tuple[str, ...]
    prototypes: np.ndarray      # [n_event_types, d_v]
    type_graph: np.ndarray      # [n_event_types, n_event_types] bool, cause -> effect


def make_world(config: GeneratorConfig, rng: np.random.Generator) -> World:
    k = config.n_event_types
    prototypes = rng.normal(size=(k, config.d_v))
    graph = rng.random((k, k)) < config.causal_edge_prob
    np.fill_diagonal(graph, False)
    return World(EVENT_NAMES[:k], prototypes, graph)


def compose_caption(names: Sequence[str], pairs: Iterable[tuple[int, int]]) -> tuple[str, ...]:
    tokens = [BOS_TOKEN]
    for i, name in enumerate(names):
        if i:
            tokens.append(THEN)
        tokens.append(name)
    for i, j in sorted(pairs):
        tokens += [BECAUSE, names[i], SO, names[j]]
    tokens.append(EOS_TOKEN)
    return tuple(tokens)


def _sample_video(config: GeneratorConfig, world: World, rng: np.random.Generator) -> VideoSample:
    n_events = int(rng.integers(config.n_events_per_video[0], config.n_events_per_video[1] + 1))
    types = rng.choice(config.n_event_types, size=n_events, replace=False)
    counts = rng.integers(config.frames_per_event[0], config.frames_per_event[1] + 1, size=n_events)
    frames, event_ids, anchors = [], [], []
    for e, (etype, count) in enumerate(zip(types, counts)):
        anchors.append(len(frames))
        for _ in range(int(count)):
            noise = rng.normal(size=config.d_v) * config.feature_noise_sigma
            frames.append(world.prototypes[etype] + noise)
            event_ids.append(e)
    chain = [(i, i + 1) for i in range(n_events - 1)]
    extra = [(i, j) for i in range(n_events) for j in range(i + 2, n_events)
             if world.type_graph[types[i], types[j]]]
    names = [world.names[t] for t in types]
    edges = sorted((anchors[i], anchors[j]) for i, j in chain + extra)
    return VideoSample(np.array(frames), compose_caption(names, extra), tuple(edges), tuple(event_ids))


def generate_dataset(config: GeneratorConfig, n_samples: int) -> list[VideoSample]:
    """Deterministic in ``config.seed``."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = np.random.default_rng(config.seed)
    world = make_world(config, rng)
    return [_sample_video(config, world, rng) for _ in range(n_samples)]


def generator_world(config: GeneratorConfig) -> World:
    return make_world(config, np.random.default_rng(config.seed))


def generator_vocabulary(config: GeneratorConfig) -> Vocabulary:
    """The closed word set of a generator configuration."""
    return Vocabulary(list(EVENT_NAMES[: config.n_event_types]) + list(CONNECTIVES))


def build_vocabulary(samples: Iterable[VideoSample]) -> Vocabulary:
    words = sorted({tok for s in samples for tok in s.words})
    return Vocabulary(words)


def dataset_stats(samples: Sequence[VideoSample]) -> dict:
    vocab = build_vocabulary(samples)
    lengths = [len(s.words) for s in samples]
    return {
        "n_samples": len(samples),
        "vocab_size": len(vocab),
        "mean_caption_length": float(np.mean(lengths)),
        "causal_fraction": float(np.mean([s.has_nonchain_edge() for s in samples])),
        "mean_frames": float(np.mean([s.n_frames for s in samples])),
    }


# --------------------------------------------------------------------------
# JSONL


def sample_to_json(sample: VideoSample) -> str:
    record = {
        "frames": sample.frames.tolist(),
        "caption": list(sample.caption),
        "causal_edges": [list(e) for e in sample.causal_edges],
        "event_ids": list(sample.event_ids),
    }
    return json.dumps(record, allow_nan=False)


def write_dataset(samples: Iterable[VideoSample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in samples:
            fh.write(sample_to_json(s) + "\n")


def _parse_line(line: str, lineno: int) -> VideoSample:
    try:
        record = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"line {lineno}: malformed JSON ({exc.msg})") from None
    if not isinstance(record, dict):
        raise DatasetFormatError(f"line {lineno}: expected a JSON object")
    missing = {"frames", "caption", "causal_edges", "event_ids"} - record.keys()
    if missing:
        raise DatasetFormatError(f"line {lineno}: missing fields {sorted(missing)}")
    frames = record["frames"]
    if (not isinstance(frames, list) or not frames
            or not all(isinstance(r, list) and r for r in frames)
            or len({len(r) for r in frames}) != 1):
        raise DatasetFormatError(f"line {lineno}: frames must be a non-empty rectangular array")
    for row in frames:
        for v in row:
            if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
                raise DatasetFormatError(f"line {lineno}: non-numeric frame value {v!r}")
    caption = record["caption"]
    if not isinstance(caption, list) or not all(isinstance(t, str) for t in caption):
        raise DatasetFormatError(f"line {lineno}: caption must be an array of strings")
    try:
        return VideoSample(np.array(frames, dtype=np.float64), caption,
                           [tuple(e) for e in record["causal_edges"]], record["event_ids"])
    except (DatasetFormatError, TypeError, ValueError) as exc:
        raise DatasetFormatError(f"line {lineno}: {exc}") from None


def read_dataset(path: str | Path) -> list[VideoSample]:
    samples = []
    d_v = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            sample = _parse_line(line, lineno)
            if d_v is None:
                d_v = sample.frames.shape[1]
            elif sample.frames.shape[1] != d_v:
                raise DatasetSchemaError(
                    f"line {lineno}: frame dimension {sample.frames.shape[1]} differs from {d_v}")
            samples.append(sample)
    if not samples:
        raise DatasetFormatError(f"{path}: no samples")
    return samples
