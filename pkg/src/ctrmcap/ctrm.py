"""Causal dynamics encoder and temporal relational learner.

Frame features ``[T, d_v]`` are projected to ``d_model`` and passed through a
(by default lower-triangular masked) self-attention block, giving the causal
attention and causal embeddings. Fixed sinusoidal positions are then added
and a stack of pre-norm transformer encoder blocks produces the temporal
embeddings consumed by the caption decoder.

The ``*_batch`` functions run several zero-padded videos at once; the
per-video functions are the single-sample case of the same code.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import (Params, attention, feed_forward, glorot, init_attention, init_ffn, init_norm,
                     key_mask, linear, norm, pad_rows, sinusoid_table)

MASK_MODES = ("lower_triangular", "unmasked")
ABLATIONS = ("disable_cde", "disable_trl", "disable_ctrm")


class CapacityError(ValueError):
    """More frames than the positional table holds."""


@dataclass(frozen=True)
class CtrmConfig:
    d_model: int = 32
    n_heads: int = 4
    n_trl_layers: int = 2
    ffn_dim: int = 64
    causal_mask_mode: Literal["lower_triangular", "unmasked"] = "lower_triangular"
    max_frames: int = 16

    def __post_init__(self):
        for name in ("d_model", "n_heads", "ffn_dim", "max_frames"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.n_trl_layers < 0:
            raise ValueError("n_trl_layers must be non-negative")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.causal_mask_mode not in MASK_MODES:
            raise ValueError(f"causal_mask_mode must be one of {MASK_MODES}")


@dataclass(frozen=True)
class CdeOutput:
    attention: Tensor   # [n_heads, T, T]
    embeddings: Tensor  # [T, d_model]


@dataclass(frozen=True)
class Encoded:
    h_t: Tensor               # [B * T_max, d_model]; rows past a video's length are padding
    attention: Tensor | None  # [B * n_heads, T_max, T_max]; None when the CDE is ablated
    lengths: tuple[int, ...]

    @property
    def batch(self) -> int:
        return len(self.lengths)

    @property
    def t_max(self) -> int:
        return self.h_t.shape[0] // len(self.lengths)


def positional_encoding(config: CtrmConfig) -> np.ndarray:
    return sinusoid_table(config.max_frames, config.d_model)


def init_ctrm_params(rng: np.random.Generator, d_v: int, config: CtrmConfig) -> dict[str, np.ndarray]:
    d = config.d_model
    params = {"cde.w_in": glorot(rng, d_v, d), "cde.b_in": np.zeros(d)}
    params.update(init_attention(rng, "cde.attn", d))
    for layer in range(config.n_trl_layers):
        prefix = f"trl.{layer}"
        params.update(init_norm(f"{prefix}.ln1", d))
        params.update(init_attention(rng, f"{prefix}.attn", d))
        params.update(init_norm(f"{prefix}.ln2", d))
        params.update(init_ffn(rng, f"{prefix}.ffn", d, config.ffn_dim))
    return params


def normalize_ablation(ablation) -> frozenset[str]:
    flags = frozenset(ablation)
    unknown = flags - set(ABLATIONS)
    if unknown:
        raise ValueError(f"unknown ablation flags: {sorted(unknown)}")
    if "disable_ctrm" in flags:
        flags = flags | {"disable_cde", "disable_trl"}
    return flags


def _check_width(width: int, params: Params) -> None:
    w_in = params["cde.w_in"]
    if width != w_in.shape[0]:
        raise ad.ShapeError(f"frame width {width} does not match input projection {w_in.shape}")


def _check_length(t: int, config: CtrmConfig) -> None:
    if t > config.max_frames:
        raise CapacityError(f"{t} frames exceed max_frames={config.max_frames}")


def pack_frames(frames: Sequence[np.ndarray], params: Params, config: CtrmConfig) -> tuple[Tensor, tuple[int, ...]]:
    """Zero-pad videos to a common length; returns [B * T_max, d_v] and the true lengths."""
    lengths = tuple(int(f.shape[0]) for f in frames)
    for f in frames:
        if f.ndim != 2:
            raise ad.ShapeError(f"frames must be [T, d_v], got {f.shape}")
        _check_width(f.shape[1], params)
        _check_length(f.shape[0], config)
    return ad.constant(pad_rows(frames, max(lengths))), lengths


def _project(x: Tensor, params: Params) -> Tensor:
    return linear(x, params["cde.w_in"], params["cde.b_in"])


def _cde(x: Tensor, lengths: tuple[int, ...], params: Params, config: CtrmConfig) -> tuple[Tensor, Tensor]:
    t_max = x.shape[0] // len(lengths)
    mask = key_mask(lengths, t_max, t_max, config.n_heads,
                    causal=config.causal_mask_mode == "lower_triangular")
    h_c, weights = attention(x, x, params, "cde.attn", config.n_heads, mask, batch=len(lengths))
    return h_c, weights


def _add_positions(h: Tensor, batch: int, config: CtrmConfig) -> Tensor:
    t_max = h.shape[0] // batch
    _check_length(t_max, config)
    table = positional_encoding(config)[:t_max]
    return ad.add(h, ad.constant(np.tile(table, (batch, 1))))


def _trl(x: Tensor, lengths: tuple[int, ...], params: Params, config: CtrmConfig) -> Tensor:
    t_max = x.shape[0] // len(lengths)
    mask = key_mask(lengths, t_max, t_max, config.n_heads)
    for layer in range(config.n_trl_layers):
        prefix = f"trl.{layer}"
        h = norm(x, params, f"{prefix}.ln1")
        attended, _ = attention(h, h, params, f"{prefix}.attn", config.n_heads, mask, batch=len(lengths))
        x = ad.add(x, attended)
        x = ad.add(x, feed_forward(norm(x, params, f"{prefix}.ln2"), params, f"{prefix}.ffn"))
    return x


def _encode(x: Tensor, lengths: tuple[int, ...], params: Params, config: CtrmConfig,
            ablation) -> Encoded:
    ablation = normalize_ablation(ablation)
    h = _project(x, params)
    weights = None
    if "disable_cde" not in ablation:
        h, weights = _cde(h, lengths, params, config)
    h = _add_positions(h, len(lengths), config)
    if "disable_trl" not in ablation:
        h = _trl(h, lengths, params, config)
    return Encoded(h_t=h, attention=weights, lengths=lengths)


def encode_batch(frames: Sequence[np.ndarray], params: Params, config: CtrmConfig,
                 ablation=frozenset()) -> Encoded:
    """Encode several videos at once (padding never influences real rows)."""
    x, lengths = pack_frames(frames, params, config)
    return _encode(x, lengths, params, config, ablation)


def encode(frames: Tensor, params: Params, config: CtrmConfig, ablation=frozenset()) -> Encoded:
    """Single video -> temporal embeddings, honouring the ablation switches.

    disable_cde: the projected frames go straight to the TRL;
    disable_trl: H_t = H_c + P; disable_ctrm: H_t = projected frames + P.
    """
    _check_single(frames, params, config)
    return _encode(frames, (frames.shape[0],), params, config, ablation)


def _check_single(frames: Tensor, params: Params, config: CtrmConfig) -> None:
    if frames.ndim != 2:
        raise ad.ShapeError(f"frames must be [T, d_v], got {frames.shape}")
    _check_length(frames.shape[0], config)
    _check_width(frames.shape[1], params)


def cde_forward(frames: Tensor, params: Params, config: CtrmConfig) -> CdeOutput:
    _check_single(frames, params, config)
    h_c, weights = _cde(_project(frames, params), (frames.shape[0],), params, config)
    return CdeOutput(attention=weights, embeddings=h_c)


def trl_forward(cde_out: CdeOutput, params: Params, config: CtrmConfig) -> Tensor:
    h = cde_out.embeddings
    return _trl(_add_positions(h, 1, config), (h.shape[0],), params, config)
