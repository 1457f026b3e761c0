"""Training objectives: caption cross-entropy, auxiliary causal/temporal terms, contrastive alignment."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .decoder import PAD


class InvalidInputError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.5
    lambda2: float = 0.5
    tau: float = 0.07
    batch_size: int = 8

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")


@dataclass(frozen=True)
class CausalAnnotation:
    """Frame-level causal graph; ``adjacency[cause, effect] == 1``."""

    adjacency: np.ndarray

    def __post_init__(self):
        adj = np.asarray(self.adjacency, dtype=np.float64)
        if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
            raise InvalidInputError(f"adjacency must be square, got {adj.shape}")
        if not np.isin(adj, (0.0, 1.0)).all():
            raise InvalidInputError("adjacency entries must be 0 or 1")
        if np.any(np.diag(adj)):
            raise InvalidInputError("adjacency must have a zero diagonal")
        adj.flags.writeable = False
        object.__setattr__(self, "adjacency", adj)

    @classmethod
    def from_edges(cls, n_frames: int, edges: Sequence[Sequence[int]]) -> "CausalAnnotation":
        adj = np.zeros((n_frames, n_frames))
        for cause, effect in edges:
            adj[cause, effect] = 1.0
        return cls(adj)

    @property
    def n_frames(self) -> int:
        return self.adjacency.shape[0]

    def cause_distribution(self) -> np.ndarray:
        """Row i: uniform distribution over the causes of frame i (zero row if none)."""
        causes = self.adjacency.T
        totals = causes.sum(axis=1, keepdims=True)
        return np.divide(causes, totals, out=np.zeros_like(causes), where=totals > 0)

    @property
    def annotated_rows(self) -> np.ndarray:
        return self.adjacency.sum(axis=0) > 0


def _zero() -> Tensor:
    return ad.constant(0.0)


def caption_cross_entropy(logits: Tensor, targets: Sequence[int]) -> Tensor:
    """Mean over non-PAD positions of -log softmax(logits)[i, targets[i]]."""
    targets = list(targets)
    n, v = logits.shape
    if len(targets) == 0:
        raise ValueError("caption_cross_entropy needs at least one target")
    if len(targets) != n:
        raise ad.ShapeError(f"{len(targets)} targets for {n} logit rows")
    flat = [i * v + t for i, t in enumerate(targets) if t != PAD]
    if not flat:
        raise ValueError("every target position is PAD")
    picked = ad.take(ad.log_softmax(logits), flat)
    return ad.scale(ad.mean(picked), -1.0)


def causal_alignment_loss(attention: Tensor, annotation: CausalAnnotation) -> Tensor:
    """Mean KL(annotated causes || attention row) over heads and annotated rows.

    Rows without annotated causes are skipped; 0 log 0 is taken as 0.
    """
    if attention.ndim != 3 or attention.shape[1:] != (annotation.n_frames,) * 2:
        raise ad.ShapeError(f"attention {attention.shape} vs annotation over {annotation.n_frames} frames")
    if np.any(attention.data.sum(axis=-1) <= 0):
        raise InvalidInputError("attention row sums to zero")
    target = annotation.cause_distribution()
    rows = np.flatnonzero(annotation.annotated_rows)
    if rows.size == 0:
        return _zero()
    n_heads, t, _ = attention.shape
    idx, weight = [], []
    for h in range(n_heads):
        for i in rows:
            for j in np.flatnonzero(target[i]):
                idx.append((h * t + i) * t + j)
                weight.append(target[i, j])
    weight = np.asarray(weight)
    picked = attention.data.reshape(-1)[idx]
    if np.any(picked <= 0):
        raise InvalidInputError("attention assigns zero mass to an annotated cause")
    neg_entropy = float((weight * np.log(weight)).sum())
    cross = ad.sum(ad.mul(ad.log(ad.take(attention, idx)), ad.constant(weight)))
    kl_total = ad.sub(ad.constant(neg_entropy), cross)
    return ad.scale(kl_total, 1.0 / (n_heads * rows.size))


def temporal_consistency_loss(h_t: Tensor) -> Tensor:
    """(1 / (T-1)) * sum_t ||h[t+1] - h[t]||^2 / d_model, and 0 for a single frame."""
    t, d = h_t.shape
    if t == 1:
        return _zero()
    diff_op = np.zeros((t - 1, t))
    diff_op[np.arange(t - 1), np.arange(1, t)] = 1.0
    diff_op[np.arange(t - 1), np.arange(t - 1)] = -1.0
    diff = ad.matmul(ad.constant(diff_op), h_t)
    return ad.scale(ad.sum(ad.mul(diff, diff)), 1.0 / ((t - 1) * d))


def contrastive_loss(video_emb: Tensor, text_emb: Tensor, weights: LossWeights) -> Tensor:
    """One-directional (video -> text) InfoNCE with cosine similarity and in-batch negatives."""
    if video_emb.shape != text_emb.shape or video_emb.ndim != 2:
        raise ad.ShapeError(f"embedding shapes {video_emb.shape} and {text_emb.shape} differ")
    for name, emb in (("video", video_emb), ("text", text_emb)):
        if np.any(np.linalg.norm(emb.data, axis=1) == 0):
            raise InvalidInputError(f"zero-norm {name} embedding row")
    b = video_emb.shape[0]
    sims = ad.matmul(ad.l2_normalize(video_emb), ad.transpose(ad.l2_normalize(text_emb)))
    log_p = ad.log_softmax(ad.scale(sims, 1.0 / weights.tau))
    matched = ad.take(log_p, [i * b + i for i in range(b)])
    return ad.scale(ad.mean(matched), -1.0)


def finetune_loss(caption_loss: Tensor, causal_loss: Tensor, temporal_loss: Tensor,
                  weights: LossWeights) -> Tensor:
    """caption + lambda1 * causal + lambda2 * temporal."""
    parts = [caption_loss, causal_loss, temporal_loss]
    parts = [p if isinstance(p, Tensor) else ad.constant(p) for p in parts]
    for p in parts:
        if not np.isfinite(p.data).all():
            raise InvalidInputError("loss components must be finite")
    caption, causal, temporal = parts
    return ad.add(ad.add(caption, ad.scale(causal, weights.lambda1)), ad.scale(temporal, weights.lambda2))


# --------------------------------------------------------------------------
# batched forms: per-sample losses averaged over B stacked (padded) samples


def batch_caption_cross_entropy(logits: Tensor, targets: Sequence[Sequence[int]]) -> Tensor:
    """Mean over samples of :func:`caption_cross_entropy`; ``logits`` is [B * N_max, |V|]."""
    batch = len(targets)
    rows, v = logits.shape
    if batch == 0 or rows % batch:
        raise ad.ShapeError(f"{rows} logit rows cannot hold {batch} samples")
    n_max = rows // batch
    idx, w = [], []
    for b, seq in enumerate(targets):
        if len(seq) > n_max:
            raise ad.ShapeError(f"sample {b}: {len(seq)} targets exceed {n_max} rows")
        valid = [(i, tok) for i, tok in enumerate(seq) if tok != PAD]
        if not valid:
            raise ValueError(f"sample {b} has no scored target")
        for i, tok in valid:
            idx.append((b * n_max + i) * v + tok)
            w.append(1.0 / (len(valid) * batch))
    picked = ad.take(ad.log_softmax(logits), idx)
    return ad.scale(ad.sum(ad.mul(picked, ad.constant(w))), -1.0)


def batch_causal_alignment_loss(attention: Tensor, annotations: Sequence[CausalAnnotation],
                                n_heads: int) -> Tensor:
    """Mean over samples of :func:`causal_alignment_loss`; ``attention`` is [B * heads, T_max, T_max]."""
    batch = len(annotations)
    bh, t_max, _ = attention.shape
    if bh != batch * n_heads:
        raise ad.ShapeError(f"attention {attention.shape} vs {batch} samples x {n_heads} heads")
    if np.any(attention.data.sum(axis=-1) <= 0):
        raise InvalidInputError("attention row sums to zero")
    idx, w = [], []
    neg_entropy = 0.0
    for b, annot in enumerate(annotations):
        if annot.n_frames > t_max:
            raise ad.ShapeError(f"annotation over {annot.n_frames} frames exceeds {t_max}")
        rows = np.flatnonzero(annot.annotated_rows)
        if rows.size == 0:
            continue
        target = annot.cause_distribution()
        for i in rows:
            p = target[i][target[i] > 0]
            neg_entropy += float((p * np.log(p)).sum()) / (rows.size * batch)
        for h in range(n_heads):
            for i in rows:
                for j in np.flatnonzero(target[i]):
                    idx.append(((b * n_heads + h) * t_max + i) * t_max + j)
                    w.append(target[i, j] / (n_heads * rows.size * batch))
    if not idx:
        return _zero()
    if np.any(attention.data.reshape(-1)[idx] <= 0):
        raise InvalidInputError("attention assigns zero mass to an annotated cause")
    cross = ad.sum(ad.mul(ad.log(ad.take(attention, idx)), ad.constant(w)))
    return ad.sub(ad.constant(neg_entropy), cross)


def batch_temporal_consistency_loss(h_t: Tensor, lengths: Sequence[int]) -> Tensor:
    """Mean over samples of :func:`temporal_consistency_loss`; ``h_t`` is [B * T_max, d]."""
    batch = len(lengths)
    rows, d = h_t.shape
    t_max = rows // batch
    pairs, weight = [], []
    for b, t in enumerate(lengths):
        for k in range(t - 1):
            pairs.append(b * t_max + k)
            weight.append(1.0 / ((t - 1) * d * batch))
    if not pairs:
        return _zero()
    diff_op = np.zeros((len(pairs), rows))
    r = np.arange(len(pairs))
    diff_op[r, np.asarray(pairs) + 1] = 1.0
    diff_op[r, np.asarray(pairs)] = -1.0
    diff = ad.matmul(ad.constant(diff_op), h_t)
    w = np.repeat(np.asarray(weight)[:, None], d, axis=1)
    return ad.sum(ad.mul(ad.mul(diff, diff), ad.constant(w)))
