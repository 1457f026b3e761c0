"""The full captioner: CTRM encoder + decoder + contrastive projections, and its batch objectives."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .ctrm import CtrmConfig, Encoded, encode, encode_batch, init_ctrm_params, normalize_ablation
from .data import VideoSample
from .decoder import DecoderConfig, Vocabulary, decoder_logits_batch, init_decoder_params
from .layers import glorot
from .losses import (LossWeights, batch_caption_cross_entropy, batch_causal_alignment_loss,
                     batch_temporal_consistency_loss, contrastive_loss, finetune_loss)

STAGES = ("pretrain", "finetune", "contrastive", "joint")


@dataclass(frozen=True)
class ModelConfig:
    d_v: int
    vocab_size: int
    ctrm: CtrmConfig = field(default_factory=CtrmConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)

    def __post_init__(self):
        if self.ctrm.d_model != self.decoder.d_model:
            raise ValueError("encoder and decoder widths must agree")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        return cls(d["d_v"], d["vocab_size"], CtrmConfig(**d["ctrm"]), DecoderConfig(**d["decoder"]))


def init_param_arrays(config: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    arrays = init_ctrm_params(rng, config.d_v, config.ctrm)
    arrays.update(init_decoder_params(rng, config.vocab_size, config.decoder))
    d = config.ctrm.d_model
    arrays["con.video"] = glorot(rng, d, d)
    arrays["con.text"] = glorot(rng, d, d)
    return arrays


def as_parameters(arrays: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: ad.parameter(v, k) for k, v in arrays.items()}


@dataclass
class LossBreakdown:
    total: Tensor
    caption: Tensor | None = None
    causal: Tensor | None = None
    temporal: Tensor | None = None
    contrast: Tensor | None = None

    def values(self) -> dict[str, float]:
        out = {"loss": self.total.item()}
        for name in ("caption", "causal", "temporal", "contrast"):
            part = getattr(self, name)
            if part is not None:
                out[name] = part.item()
        return out


def encode_sample(sample: VideoSample, params: Mapping[str, Tensor], config: ModelConfig,
                  ablation=frozenset()) -> Encoded:
    return encode(ad.constant(sample.frames), params, config.ctrm, ablation)


def encode_samples(samples: Sequence[VideoSample], params: Mapping[str, Tensor], config: ModelConfig,
                   ablation=frozenset()) -> Encoded:
    return encode_batch([s.frames for s in samples], params, config.ctrm, ablation)


def pooled_embeddings(encoded: Encoded, samples: Sequence[VideoSample],
                      params: Mapping[str, Tensor], vocab: Vocabulary) -> tuple[Tensor, Tensor]:
    """Projected mean-pooled temporal embeddings and caption-token embeddings, one row per sample."""
    batch, t_max = encoded.batch, encoded.t_max
    frame_pool = np.zeros((batch, batch * t_max))
    for b, t in enumerate(encoded.lengths):
        frame_pool[b, b * t_max: b * t_max + t] = 1.0 / t
    token_ids, spans = [], []
    for s in samples:
        ids = vocab.encode(s.words or s.caption)
        spans.append((len(token_ids), len(ids)))
        token_ids += ids
    token_pool = np.zeros((batch, len(token_ids)))
    for b, (start, n) in enumerate(spans):
        token_pool[b, start:start + n] = 1.0 / n
    video = ad.matmul(ad.matmul(ad.constant(frame_pool), encoded.h_t), params["con.video"])
    tokens = ad.embedding(params["dec.embed"], token_ids)
    text = ad.matmul(ad.matmul(ad.constant(token_pool), tokens), params["con.text"])
    return video, text


def batch_objective(samples: Sequence[VideoSample], params: Mapping[str, Tensor], config: ModelConfig,
                    vocab: Vocabulary, stage: str, weights: LossWeights,
                    ablation=frozenset()) -> LossBreakdown:
    """Loss of one mini-batch for a training stage.

    pretrain: caption cross-entropy; finetune: caption + l1 * causal + l2 * temporal;
    contrastive: InfoNCE alone; joint: pretrain + finetune + contrastive.
    Per-sample terms are averaged over the batch.
    """
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    if not samples:
        raise ValueError("empty batch")
    ablation = normalize_ablation(ablation)
    enc = encode_samples(samples, params, config, ablation)
    out = LossBreakdown(total=None)  # type: ignore[arg-type]
    if stage in ("pretrain", "finetune", "joint"):
        captions = [vocab.encode(s.caption) for s in samples]
        logits = decoder_logits_batch([c[:-1] for c in captions], enc.h_t, enc.lengths,
                                      params, config.decoder)
        out.caption = batch_caption_cross_entropy(logits, [c[1:] for c in captions])
    if stage in ("finetune", "joint"):
        if enc.attention is None:
            out.causal = ad.constant(0.0)
        else:
            out.causal = batch_causal_alignment_loss(enc.attention, [s.annotation for s in samples],
                                                     config.ctrm.n_heads)
        out.temporal = batch_temporal_consistency_loss(enc.h_t, enc.lengths)
    if stage in ("contrastive", "joint"):
        video, text = pooled_embeddings(enc, samples, params, vocab)
        out.contrast = contrastive_loss(video, text, weights)

    if stage == "pretrain":
        out.total = out.caption
    elif stage == "finetune":
        out.total = finetune_loss(out.caption, out.causal, out.temporal, weights)
    elif stage == "contrastive":
        out.total = out.contrast
    else:
        fine = finetune_loss(out.caption, out.causal, out.temporal, weights)
        out.total = ad.add(ad.add(out.caption, fine), out.contrast)
    return out
