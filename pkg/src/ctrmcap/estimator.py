"""scikit-learn style front end: ``CTRMCaptioner().fit(samples).predict(videos)``."""
from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .data import VideoSample, build_vocabulary
from .losses import LossWeights
from .metrics import evaluate_corpus
from .model import encode_samples
from .training import STAGE_ORDER, Checkpoint, TrainConfig, decode_dataset, run_pipeline
from .validation import check_positive_int, check_samples, check_videos


def _frames_only(frames: np.ndarray) -> VideoSample:
    # decoding needs frames only; a one-event placeholder caption keeps VideoSample valid
    return VideoSample(frames=frames, caption=("<bos>", "<eos>"), causal_edges=(), event_ids=(0,) * len(frames))


class CTRMCaptioner(BaseEstimator):
    """Video captioner trained with the staged schedule.

    ``fit`` takes annotated :class:`VideoSample` objects. ``predict`` and
    ``transform`` accept samples or bare ``[T, d_v]`` frame matrices.
    """

    def __init__(self, stages: Sequence[str] = ("pretrain", "finetune"), epochs: int = 20,
                 batch_size: int = 16, learning_rate: float = 2e-3, d_model: int = 32, n_heads: int = 4,
                 n_trl_layers: int = 2, n_dec_layers: int = 2, ffn_dim: int = 64,
                 causal_mask_mode: str = "lower_triangular", lambda1: float = 0.5, lambda2: float = 0.5,
                 tau: float = 0.07, ablation: Sequence[str] = (), decoding: str = "greedy",
                 max_frames: int = 16, max_caption_len: int = 16, seed: int = 0):
        self.stages = stages
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.d_model = d_model
        self.n_heads = n_heads
        self.n_trl_layers = n_trl_layers
        self.n_dec_layers = n_dec_layers
        self.ffn_dim = ffn_dim
        self.causal_mask_mode = causal_mask_mode
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.tau = tau
        self.ablation = ablation
        self.decoding = decoding
        self.max_frames = max_frames
        self.max_caption_len = max_caption_len
        self.seed = seed

    def _stage_configs(self) -> list[TrainConfig]:
        stages = list(self.stages)
        if stages != ["joint"]:
            unknown = [s for s in stages if s not in STAGE_ORDER]
            if unknown:
                raise ValueError(f"unknown stages {unknown}")
        weights = LossWeights(self.lambda1, self.lambda2, self.tau, self.batch_size)
        return [TrainConfig(stage=s, epochs=check_positive_int(self.epochs, "epochs"),
                            batch_size=check_positive_int(self.batch_size, "batch_size"),
                            learning_rate=self.learning_rate, loss_weights=weights,
                            ablation=tuple(self.ablation), seed=self.seed, d_model=self.d_model,
                            n_heads=self.n_heads, n_trl_layers=self.n_trl_layers, ffn_dim=self.ffn_dim,
                            causal_mask_mode=self.causal_mask_mode, max_frames=self.max_frames,
                            n_dec_layers=self.n_dec_layers, max_caption_len=self.max_caption_len)
                for s in stages]

    def fit(self, X, y=None):
        """Train on annotated samples; ``y`` is ignored (captions live in the samples)."""
        samples = check_samples(X)
        result = run_pipeline(self._stage_configs(), samples, vocab=build_vocabulary(samples))
        self.checkpoint_: Checkpoint = result.checkpoint
        self.vocabulary_ = result.checkpoint.vocab
        self.loss_log_ = [s["loss_log"] for s in result.report["stages"]]
        self.n_features_in_ = samples[0].frames.shape[1]
        return self

    def _check_fitted(self) -> Checkpoint:
        if not hasattr(self, "checkpoint_"):
            raise NotFittedError("CTRMCaptioner is not fitted yet; call fit first")
        return self.checkpoint_

    def _as_samples(self, X) -> list[VideoSample]:
        frames = check_videos(X, self.n_features_in_, self.max_frames)
        return [x if isinstance(x, VideoSample) else _frames_only(f) for x, f in zip(X, frames)]

    def predict(self, X) -> list[list[str]]:
        """Caption every video (special tokens stripped)."""
        ckpt = self._check_fitted()
        ids = decode_dataset(self._as_samples(X), ckpt, self.decoding)
        return [ckpt.vocab.decode(seq) for seq in ids]

    def transform(self, X) -> np.ndarray:
        """Mean-pooled temporal embeddings, one ``d_model`` row per video."""
        ckpt = self._check_fitted()
        samples = self._as_samples(X)
        enc = encode_samples(samples, ckpt.parameters(), ckpt.model, ckpt.ablation)
        h = enc.h_t.data.reshape(enc.batch, enc.t_max, -1)
        lengths = np.asarray(enc.lengths)
        mask = np.arange(enc.t_max)[None, :] < lengths[:, None]
        return (h * mask[..., None]).sum(axis=1) / lengths[:, None]

    def score(self, X, y=None) -> float:
        """Corpus BLEU-4 of the predicted captions against the samples' own captions."""
        samples = check_samples(X)
        hyps = self.predict(samples)
        corpus = [(str(i), h, [list(s.words)]) for i, (h, s) in enumerate(zip(hyps, samples))]
        return evaluate_corpus(corpus).bleu4

