"""Finite-difference verification of every primitive and of the composed training losses."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .ctrm import CtrmConfig
from .data import GeneratorConfig, build_vocabulary, generate_dataset
from .decoder import DecoderConfig
from .losses import (CausalAnnotation, LossWeights, caption_cross_entropy, causal_alignment_loss,
                     contrastive_loss, finetune_loss, temporal_consistency_loss)

TOLERANCE = 1e-4
STEP = 1e-5

Case = tuple[dict[str, np.ndarray], Callable[[dict[str, ad.Tensor]], ad.Tensor]]
Builder = Callable[[np.random.Generator], Case]


def _away_from_zero(rng, shape, low=0.1):
    return rng.choice((-1.0, 1.0), size=shape) * rng.uniform(low, 1.0, size=shape)


def _project(y: ad.Tensor, w: np.ndarray) -> ad.Tensor:
    # a random linear read-out turns any tensor into a scalar with a non-trivial gradient
    return ad.sum(ad.mul(y, ad.constant(w)))


def _unary(op, shape, sample=lambda rng, s: rng.normal(size=s)) -> Builder:
    def build(rng):
        x = sample(rng, shape)
        y_shape = op(ad.constant(x)).shape
        w = rng.normal(size=y_shape)
        return {"x": x}, lambda p: _project(op(p["x"]), w)
    return build


def _binary(op, shape_a, shape_b) -> Builder:
    def build(rng):
        a, b = rng.normal(size=shape_a), rng.normal(size=shape_b)
        w = rng.normal(size=op(ad.constant(a), ad.constant(b)).shape)
        return {"a": a, "b": b}, lambda p: _project(op(p["a"], p["b"]), w)
    return build


def _layer_norm(rng) -> Case:
    values = {"x": rng.normal(size=(3, 5)), "gain": rng.normal(size=5), "bias": rng.normal(size=5)}
    w = rng.normal(size=(3, 5))
    return values, lambda p: _project(ad.layer_norm(p["x"], p["gain"], p["bias"]), w)


def _row_softmax(rng) -> Case:
    x = rng.normal(size=(2, 4, 4))
    mask = np.tril(np.ones((4, 4), dtype=bool))
    w = rng.normal(size=x.shape)
    return {"x": x}, lambda p: _project(ad.row_softmax(p["x"], mask), w)


def _embedding(rng) -> Case:
    table = rng.normal(size=(6, 3))
    ids = rng.integers(0, 6, size=7)
    w = rng.normal(size=(7, 3))
    return {"table": table}, lambda p: _project(ad.embedding(p["table"], ids), w)


def _take(rng) -> Case:
    x = rng.normal(size=(3, 4))
    idx = rng.integers(0, 12, size=9)
    w = rng.normal(size=9)
    return {"x": x}, lambda p: _project(ad.take(p["x"], idx), w)


def _concat(rng) -> Case:
    a, b = rng.normal(size=(2, 3)), rng.normal(size=(4, 3))
    w = rng.normal(size=(6, 3))
    return {"a": a, "b": b}, lambda p: _project(ad.concat([p["a"], p["b"]]), w)


PRIMITIVE_CASES: dict[str, Builder] = {
    "add": _binary(ad.add, (3, 4), (3, 4)),
    "sub": _binary(ad.sub, (3, 4), (3, 4)),
    "mul": _binary(ad.mul, (3, 4), (3, 4)),
    "scale": _unary(lambda x: ad.scale(x, -1.7), (3, 4)),
    "add_row": _binary(ad.add_row, (3, 4), (4,)),
    "matmul": _binary(ad.matmul, (2, 3, 4), (2, 4, 5)),
    "transpose": _unary(ad.transpose, (2, 3, 4)),
    "reshape": _unary(lambda x: ad.reshape(x, (4, 3)), (3, 4)),
    "split_heads": _unary(lambda x: ad.split_heads(x, 2, batch=2), (6, 4)),
    "merge_heads": _unary(lambda x: ad.merge_heads(x, batch=2), (4, 3, 2)),
    "relu": _unary(ad.relu, (3, 4), _away_from_zero),
    "log": _unary(ad.log, (3, 4), lambda rng, s: rng.uniform(0.5, 2.0, size=s)),
    "row_softmax": _row_softmax,
    "log_softmax": _unary(ad.log_softmax, (3, 5)),
    "layer_norm": _layer_norm,
    "embedding": _embedding,
    "take": _take,
    "concat": _concat,
    "sum": _unary(lambda x: ad.sum(x, axis=0), (3, 4)),
    "l2_normalize": _unary(ad.l2_normalize, (3, 4), _away_from_zero),
}


# --------------------------------------------------------------------------
# composed losses


def _causal_case(rng, n_heads=2, t=4):
    scores = rng.normal(size=(n_heads, t, t))
    mask = np.tril(np.ones((t, t), dtype=bool))
    annotation = CausalAnnotation.from_edges(t, [(0, 2), (1, 2), (0, 3)])
    return scores, mask, annotation


def _caption_loss_case(rng) -> Case:
    logits = rng.normal(size=(5, 7))
    targets = list(rng.integers(1, 7, size=5))
    targets[2] = 0  # one PAD position is skipped
    return {"logits": logits}, lambda p: caption_cross_entropy(p["logits"], targets)


def _finetune_loss_case(rng) -> Case:
    logits = rng.normal(size=(5, 7))
    targets = list(rng.integers(1, 7, size=5))
    scores, mask, annotation = _causal_case(rng)
    weights = LossWeights(lambda1=rng.uniform(0.1, 1.0), lambda2=rng.uniform(0.1, 1.0))

    def fn(p):
        attention = ad.row_softmax(p["scores"], mask)
        return finetune_loss(caption_cross_entropy(p["logits"], targets),
                             causal_alignment_loss(attention, annotation),
                             temporal_consistency_loss(p["h_t"]), weights)

    return {"logits": logits, "scores": scores, "h_t": rng.normal(size=(4, 6))}, fn


def _contrastive_loss_case(rng) -> Case:
    weights = LossWeights(tau=rng.uniform(0.2, 1.0))
    values = {"video": rng.normal(size=(4, 6)), "text": rng.normal(size=(4, 6))}
    return values, lambda p: contrastive_loss(p["video"], p["text"], weights)


LOSS_CASES: dict[str, Builder] = {
    "loss.caption": _caption_loss_case,
    "loss.finetune": _finetune_loss_case,
    "loss.contrastive": _contrastive_loss_case,
}


def micro_model(seed: int):
    """A tiny seeded model, its vocabulary and a 3-sample batch."""
    from .model import ModelConfig, init_param_arrays
    gen = GeneratorConfig(n_event_types=4, n_events_per_video=(2, 3), frames_per_event=(1, 2),
                          d_v=3, causal_edge_prob=0.5, seed=seed)
    samples = generate_dataset(gen, 3)
    vocab = build_vocabulary(samples)
    config = ModelConfig(d_v=3, vocab_size=len(vocab),
                         ctrm=CtrmConfig(d_model=4, n_heads=2, n_trl_layers=1, ffn_dim=6,
                                         max_frames=gen.max_frames),
                         decoder=DecoderConfig(d_model=4, n_layers=1, n_heads=2, ffn_dim=6,
                                               max_caption_len=gen.max_caption_tokens))
    return config, vocab, samples, init_param_arrays(config, seed)


def _model_case(stage: str) -> Builder:
    def build(rng):
        from .model import batch_objective
        config, vocab, samples, values = micro_model(int(rng.integers(2 ** 31)))
        weights = LossWeights(tau=0.5)
        return values, lambda p: batch_objective(samples, p, config, vocab, stage, weights).total
    return build


MODEL_CASES: dict[str, Builder] = {f"model.{s}": _model_case(s) for s in (
    "pretrain", "finetune", "contrastive", "joint")}

# coordinates probed per end-to-end model check (the full parameter set is too large)
MODEL_COORDINATES = 24


def _sampled_check(values, fn, rng, n_coords: int, h: float) -> float:
    analytic = ad.analytic_gradient(fn, values)
    names = sorted(values)
    sizes = np.array([values[k].size for k in names])
    picks = rng.choice(sizes.sum(), size=min(n_coords, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    for flat in sorted(int(i) for i in picks):
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        name, pos = names[k], flat - offsets[k]
        plus = {n: np.array(v) for n, v in values.items()}
        minus = {n: np.array(v) for n, v in values.items()}
        plus[name].reshape(-1)[pos] += h
        minus[name].reshape(-1)[pos] -= h
        num = (fn(ad._as_params(plus)).item() - fn(ad._as_params(minus)).item()) / (2 * h)
        ana = analytic[name].reshape(-1)[pos]
        worst = max(worst, abs(ana - num) / max(1.0, abs(num)))
    return worst


@dataclass
class CheckResult:
    name: str
    worst_error: float
    seeds: int

    @property
    def passed(self) -> bool:
        return self.worst_error <= TOLERANCE


@dataclass
class GradCheckReport:
    results: list[CheckResult] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def failures(self) -> list[str]:
        return [r.name for r in self.results if not r.passed]

    def lines(self) -> list[str]:
        out = [f"{'PASS' if r.passed else 'FAIL'} {r.name:<18} worst_rel_err={r.worst_error:.3e} seeds={r.seeds}"
               for r in self.results]
        out.append(f"{'PASS' if self.passed else 'FAIL'} overall ({len(self.results)} checks, {self.seconds:.1f}s)")
        return out

    def to_dict(self) -> dict:
        return {"passed": self.passed, "seconds": self.seconds, "tolerance": TOLERANCE,
                "checks": {r.name: {"worst_rel_err": r.worst_error, "seeds": r.seeds, "passed": r.passed}
                           for r in self.results}}


def run_gradcheck(seeds: int = 20, base_seed: int = 0, h: float = STEP,
                  include_model: bool = True) -> GradCheckReport:
    """Every registered primitive and composed loss, at ``seeds`` random draws each."""
    start = time.perf_counter()
    report = GradCheckReport()
    full = [(n, b, None) for n, b in {**PRIMITIVE_CASES, **LOSS_CASES}.items()]
    if include_model:
        full += [(n, b, MODEL_COORDINATES) for n, b in MODEL_CASES.items()]
    for idx, (name, build, coords) in enumerate(full):
        worst = 0.0
        for s in range(seeds):
            rng = np.random.default_rng([base_seed, idx, s])
            values, fn = build(rng)
            if coords is None:
                err = ad.max_relative_error(ad.analytic_gradient(fn, values), ad.numeric_gradient(fn, values, h))
            else:
                err = _sampled_check(values, fn, rng, coords, h)
            worst = max(worst, err)
        report.results.append(CheckResult(name, worst, seeds))
    report.seconds = time.perf_counter() - start
    return report
