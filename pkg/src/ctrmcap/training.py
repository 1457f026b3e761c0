"""Stage training, checkpoints, evaluation and the multi-stage pipeline."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .ctrm import ABLATIONS, CtrmConfig, normalize_ablation
from .data import BECAUSE, SO, THEN, VideoSample, build_vocabulary
from .decoder import (DecoderConfig, Vocabulary, VocabularyError, beam_decode, greedy_decode,
                      greedy_decode_batch, token_log_probs)
from .losses import LossWeights
from .metrics import MetricReport, evaluate_corpus
from .model import (STAGES, ModelConfig, as_parameters, batch_objective, encode_sample,
                    encode_samples, init_param_arrays)
from .optim import Adam, clip_by_global_norm

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"CTRMCKPT"
CHECKPOINT_VERSION = 1
STAGE_ORDER = ("pretrain", "finetune", "contrastive")


class ConfigError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "pretrain"
    epochs: int = 10
    batch_size: int = 8
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip_norm: float | None = 1.0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    ablation: tuple[str, ...] = ()
    seed: int = 0
    # model shape; only used when a stage starts from scratch
    d_model: int = 32
    n_heads: int = 4
    n_trl_layers: int = 2
    ffn_dim: int = 64
    causal_mask_mode: str = "lower_triangular"
    max_frames: int = 16
    n_dec_layers: int = 2
    max_caption_len: int = 16
    beam_width: int = 3

    def __post_init__(self):
        if isinstance(self.loss_weights, Mapping):
            object.__setattr__(self, "loss_weights", LossWeights(**self.loss_weights))
        object.__setattr__(self, "ablation", tuple(sorted(set(self.ablation))))
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be non-negative")
        if self.grad_clip_norm is not None and self.grad_clip_norm <= 0:
            raise ConfigError("grad_clip_norm must be positive or null")
        bad = set(self.ablation) - set(ABLATIONS)
        if bad:
            raise ConfigError(f"unknown ablation flags {sorted(bad)}")
        try:
            self.model_shape()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def model_shape(self) -> tuple[CtrmConfig, DecoderConfig]:
        ctrm = CtrmConfig(self.d_model, self.n_heads, self.n_trl_layers, self.ffn_dim,
                          self.causal_mask_mode, self.max_frames)
        dec = DecoderConfig(self.d_model, self.n_dec_layers, self.n_heads, self.ffn_dim,
                            self.max_caption_len, self.beam_width)
        return ctrm, dec

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["ablation"] = list(self.ablation)
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        d = dict(d)
        if "loss_weights" in d:
            lw = d["loss_weights"]
            if isinstance(lw, Mapping):
                lw_names = {f.name for f in dataclasses.fields(LossWeights)}
                if set(lw) - lw_names:
                    raise ConfigError(f"unknown loss_weights keys {sorted(set(lw) - lw_names)}")
                try:
                    d["loss_weights"] = LossWeights(**lw)
                except ValueError as exc:
                    raise ConfigError(str(exc)) from None
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    model: ModelConfig
    vocab: Vocabulary
    stage: str
    config: dict
    epoch: int = 0                      # completed epochs of ``stage``
    step: int = 0                       # optimizer steps taken in ``stage``
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    loss_log: list[dict] = field(default_factory=list)
    format_version: int = CHECKPOINT_VERSION

    @property
    def ablation(self) -> frozenset[str]:
        return normalize_ablation(self.config.get("ablation", ()))

    def parameters(self) -> dict[str, ad.Tensor]:
        return as_parameters(self.params)

    def same_state(self, other: "Checkpoint") -> bool:
        """Bit-for-bit equality of parameters, optimizer state and bookkeeping."""
        def same(a, b):
            return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)
        return (same(self.params, other.params) and same(self.adam_m, other.adam_m)
                and same(self.adam_v, other.adam_v) and self.step == other.step
                and self.epoch == other.epoch and self.stage == other.stage
                and self.loss_log == other.loss_log and self.vocab == other.vocab)


# --------------------------------------------------------------------------
# checkpoint container: magic, u32 version, u64 header length, JSON header, raw float64 LE


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    arrays, index, offset = [], [], 0
    for group, table in (("param", ckpt.params), ("adam_m", ckpt.adam_m), ("adam_v", ckpt.adam_v)):
        for name in sorted(table):
            arr = np.ascontiguousarray(table[name], dtype="<f8")
            index.append({"group": group, "name": name, "shape": list(arr.shape), "offset": offset})
            arrays.append(arr.tobytes())
            offset += arr.nbytes
    header = {
        "format_version": ckpt.format_version,
        "stage": ckpt.stage,
        "epoch": ckpt.epoch,
        "step": ckpt.step,
        "config": ckpt.config,
        "config_hash": hashlib.sha256(json.dumps(ckpt.config, sort_keys=True).encode()).hexdigest()[:16],
        "model": ckpt.model.to_dict(),
        "vocab": ckpt.vocab.tokens,
        "loss_log": ckpt.loss_log,
        "arrays": index,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for chunk in arrays:
            fh.write(chunk)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    pos = len(CHECKPOINT_MAGIC)
    version, hlen = struct.unpack_from("<IQ", raw, pos)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    pos += struct.calcsize("<IQ")
    header = json.loads(raw[pos:pos + hlen])
    body = memoryview(raw)[pos + hlen:]
    tables: dict[str, dict[str, np.ndarray]] = {"param": {}, "adam_m": {}, "adam_v": {}}
    for item in header["arrays"]:
        count = int(np.prod(item["shape"], dtype=np.int64))
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=item["offset"])
        tables[item["group"]][item["name"]] = arr.reshape(item["shape"]).astype(np.float64)
    return Checkpoint(
        params=tables["param"], model=ModelConfig.from_dict(header["model"]),
        vocab=Vocabulary.from_tokens(header["vocab"]), stage=header["stage"], config=header["config"],
        epoch=header["epoch"], step=header["step"], adam_m=tables["adam_m"], adam_v=tables["adam_v"],
        loss_log=header["loss_log"], format_version=header["format_version"],
    )


# --------------------------------------------------------------------------
# training


@dataclass
class StageResult:
    checkpoint: Checkpoint
    loss_log: list[dict]
    completed: bool = True


def fresh_checkpoint(config: TrainConfig, dataset: Sequence[VideoSample], vocab: Vocabulary | None = None) -> Checkpoint:
    vocab = vocab or build_vocabulary(dataset)
    ctrm, dec = config.model_shape()
    model = ModelConfig(d_v=dataset[0].frames.shape[1], vocab_size=len(vocab), ctrm=ctrm, decoder=dec)
    return Checkpoint(params=init_param_arrays(model, config.seed), model=model, vocab=vocab,
                      stage="init", config=config.to_dict())


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def _validate_dataset(dataset: Sequence[VideoSample], ckpt: Checkpoint) -> None:
    if not dataset:
        raise ValueError("dataset is empty")
    for s in dataset:
        if s.frames.shape[1] != ckpt.model.d_v:
            raise ConfigError(f"frame width {s.frames.shape[1]} != model input width {ckpt.model.d_v}")
        missing = [w for w in s.words if w not in ckpt.vocab]
        if missing:
            raise VocabularyError(f"caption words {missing} are not in the model vocabulary")


def run_stage(config: TrainConfig, dataset: Sequence[VideoSample], init: Checkpoint | None = None,
              vocab: Vocabulary | None = None, stop_after_epochs: int | None = None,
              on_epoch_end: Callable[[Checkpoint], None] | None = None) -> StageResult:
    """Train one stage with Adam over seed-shuffled mini-batches.

    ``init`` may be a checkpoint of an earlier stage (parameters are reused,
    the optimizer restarts) or a partial checkpoint of this very stage and
    config (training resumes where it stopped).
    """
    if init is None:
        init = fresh_checkpoint(config, dataset, vocab)
    resume = init.stage == config.stage and init.config == config.to_dict()
    _validate_dataset(dataset, init)
    opt = Adam(config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_eps)
    if resume:
        opt.m = {k: v.copy() for k, v in init.adam_m.items()}
        opt.v = {k: v.copy() for k, v in init.adam_v.items()}
        opt.t = init.step
        epoch, loss_log = init.epoch, list(init.loss_log)
    else:
        epoch, loss_log = 0, []
    params = {k: v.copy() for k, v in init.params.items()}
    ablation = normalize_ablation(config.ablation)
    model, vocab = init.model, init.vocab

    def snapshot() -> Checkpoint:
        return Checkpoint(params=params, model=model, vocab=vocab, stage=config.stage,
                          config=config.to_dict(), epoch=epoch, step=opt.t,
                          adam_m=dict(opt.m), adam_v=dict(opt.v), loss_log=list(loss_log))

    ran = 0
    while epoch < config.epochs:
        if stop_after_epochs is not None and ran >= stop_after_epochs:
            return StageResult(snapshot(), loss_log, completed=False)
        order = epoch_order(config.seed, epoch, len(dataset))
        sums: dict[str, float] = {}
        n_batches = 0
        for b, start in enumerate(range(0, len(order), config.batch_size)):
            batch = [dataset[i] for i in order[start:start + config.batch_size]]
            tensors = as_parameters(params)
            with ad.Tape() as tape:
                parts = batch_objective(batch, tensors, model, vocab, config.stage,
                                        config.loss_weights, ablation)
            values = parts.values()
            if not math.isfinite(values["loss"]):
                raise TrainingError(f"non-finite loss {values['loss']} at step {opt.t + 1} "
                                    f"(epoch {epoch}, batch {b}) in stage {config.stage}")
            grads = ad.gradient(tape, parts.total, tensors)
            grads, _ = clip_by_global_norm(grads, config.grad_clip_norm)
            params = opt.step(params, grads)
            for k, v in values.items():
                sums[k] = sums.get(k, 0.0) + v
            n_batches += 1
        epoch += 1
        ran += 1
        entry = {"epoch": epoch, **{k: v / n_batches for k, v in sums.items()}}
        loss_log.append(entry)
        log.debug("stage %s epoch %d loss %.6f", config.stage, epoch, entry["loss"])
        if on_epoch_end is not None:
            on_epoch_end(snapshot())
    return StageResult(snapshot(), loss_log)


# --------------------------------------------------------------------------
# evaluation


def decode_sample(sample: VideoSample, ckpt: Checkpoint, decoding: str = "greedy",
                  params: Mapping[str, ad.Tensor] | None = None) -> list[int]:
    params = params or ckpt.parameters()
    h_t = encode_sample(sample, params, ckpt.model, ckpt.ablation).h_t
    if decoding == "greedy":
        return greedy_decode(h_t, params, ckpt.model.decoder)
    if decoding == "beam":
        return beam_decode(h_t, params, ckpt.model.decoder)
    raise ConfigError(f"decoding must be 'greedy' or 'beam', got {decoding!r}")


def decode_dataset(dataset: Sequence[VideoSample], ckpt: Checkpoint, decoding: str = "greedy",
                   chunk: int = 64) -> list[list[int]]:
    """Decode many samples; greedy decoding runs in padded chunks."""
    if decoding not in ("greedy", "beam"):
        raise ConfigError(f"decoding must be 'greedy' or 'beam', got {decoding!r}")
    params = ckpt.parameters()
    if decoding == "beam":
        return [decode_sample(s, ckpt, decoding, params) for s in dataset]
    out: list[list[int]] = []
    for start in range(0, len(dataset), chunk):
        part = dataset[start:start + chunk]
        enc = encode_samples(part, params, ckpt.model, ckpt.ablation)
        out += greedy_decode_batch(enc.h_t, enc.lengths, params, ckpt.model.decoder)
    return out


def caption_sample(sample: VideoSample, ckpt: Checkpoint, decoding: str = "greedy") -> tuple[list[str], list[float]]:
    """Detokenized caption and the log-probability of every emitted token."""
    params = ckpt.parameters()
    ids = decode_sample(sample, ckpt, decoding, params)
    h_t = encode_sample(sample, params, ckpt.model, ckpt.ablation).h_t
    lps = token_log_probs(ids, h_t, params, ckpt.model.decoder)
    return ckpt.vocab.decode(ids, strip=False), [float(x) for x in lps]


def narrative_events(words: Sequence[str]) -> list[str]:
    names = []
    for tok in words:
        if tok in (BECAUSE, SO):
            break
        if tok != THEN:
            names.append(tok)
    return names


def has_causal_connective(words: Sequence[str]) -> bool:
    return BECAUSE in words or SO in words


@dataclass
class EvalResult:
    metrics: MetricReport
    causal_recall: float | None        # connective present, over samples with a non-chain edge
    causal_accuracy: float             # connective presence == ground truth, over all samples
    temporal_order: float              # narrative events identical to the ground-truth order
    hypotheses: list[list[str]]

    def to_dict(self) -> dict:
        return {
            "metrics": self.metrics.to_dict(include_per_sample=False),
            "causal_recall": self.causal_recall,
            "causal_accuracy": self.causal_accuracy,
            "temporal_order": self.temporal_order,
        }


def evaluate(ckpt: Checkpoint, dataset: Sequence[VideoSample], decoding: str = "greedy",
             hypotheses: Sequence[Sequence[str]] | None = None) -> EvalResult:
    """Decode every sample and score it against its reference caption.

    ``hypotheses`` bypasses decoding (used to score fixed captions).
    """
    for s in dataset:
        missing = [w for w in s.words if w not in ckpt.vocab]
        if missing:
            raise VocabularyError(f"dataset words {missing} are missing from the checkpoint vocabulary")
    if hypotheses is None:
        hypotheses = [ckpt.vocab.decode(ids) for ids in decode_dataset(list(dataset), ckpt, decoding)]
    hyps = [list(h) for h in hypotheses]
    corpus = [(str(i), h, [list(s.words)]) for i, (h, s) in enumerate(zip(hyps, dataset))]
    report = evaluate_corpus(corpus)
    gt_causal = [s.has_nonchain_edge() for s in dataset]
    pred_causal = [has_causal_connective(h) for h in hyps]
    positives = [p for p, g in zip(pred_causal, gt_causal) if g]
    return EvalResult(
        metrics=report,
        causal_recall=float(np.mean(positives)) if positives else None,
        causal_accuracy=float(np.mean([p == g for p, g in zip(pred_causal, gt_causal)])),
        temporal_order=float(np.mean([narrative_events(h) == s.event_sequence()
                                      for h, s in zip(hyps, dataset)])),
        hypotheses=hyps,
    )


# --------------------------------------------------------------------------
# pipeline


def check_stage_order(configs: Sequence[TrainConfig]) -> None:
    stages = [c.stage for c in configs]
    if not stages:
        raise ConfigError("pipeline needs at least one stage")
    if "joint" in stages:
        if stages != ["joint"]:
            raise ConfigError("joint mode must be the only stage of a pipeline")
        return
    ranks = [STAGE_ORDER.index(s) for s in stages]
    if any(b <= a for a, b in zip(ranks, ranks[1:])):
        raise ConfigError(f"stages must run in order {' -> '.join(STAGE_ORDER)}, got {stages}")


@dataclass
class PipelineResult:
    checkpoint: Checkpoint
    report: dict
    stage_checkpoints: list[Checkpoint]
    completed: bool = True


def run_pipeline(configs: Sequence[TrainConfig], train_data: Sequence[VideoSample],
                 eval_data: Sequence[VideoSample] | None = None, checkpoint_dir: str | Path | None = None,
                 vocab: Vocabulary | None = None, decoding: str = "greedy",
                 stop_after_epochs: int | None = None, evaluate_each_stage: bool = False) -> PipelineResult:
    """Chain stages with checkpoint hand-off.

    With ``checkpoint_dir`` a checkpoint is written after every epoch and an
    interrupted pipeline resumes from the latest one. ``stop_after_epochs``
    simulates an interruption after that many epochs in this call.
    """
    check_stage_order(configs)
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    budget = stop_after_epochs
    current: Checkpoint | None = None
    stage_reports, stage_ckpts = [], []
    for i, config in enumerate(configs):
        path = ckpt_dir / f"stage{i}_{config.stage}.ckpt" if ckpt_dir is not None else None
        init = current
        if path is not None and path.exists():
            init = load_checkpoint(path)
        save = (lambda c, p=path: save_checkpoint(c, p)) if path is not None else None
        already = init.epoch if init is not None and init.stage == config.stage else 0
        result = run_stage(config, train_data, init, vocab, stop_after_epochs=budget, on_epoch_end=save)
        if budget is not None:
            budget -= result.checkpoint.epoch - already
        current = result.checkpoint
        if not result.completed:
            return PipelineResult(current, {"status": "interrupted", "stages": stage_reports},
                                  stage_ckpts, completed=False)
        entry = {"stage": config.stage, "config": config.to_dict(), "loss_log": result.loss_log}
        if evaluate_each_stage and eval_data is not None:
            entry["evaluation"] = evaluate(current, eval_data, decoding).to_dict()
        stage_reports.append(entry)
        stage_ckpts.append(current)
    report = {"status": "complete", "stages": stage_reports}
    if eval_data is not None:
        report["evaluation"] = evaluate(current, eval_data, decoding).to_dict()
    return PipelineResult(current, report, stage_ckpts)
