"""Building blocks shared by the encoder and the decoder."""
from __future__ import annotations

import math
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

Params = Mapping[str, Tensor]


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def sinusoid_table(n_positions: int, width: int) -> np.ndarray:
    """Fixed positional table: column 2i is sin(t / 10000^(2i/width)), 2i+1 the cosine."""
    pos = np.arange(n_positions, dtype=np.float64)[:, None]
    two_i = np.arange(0, width, 2, dtype=np.float64)
    angle = pos / np.power(10000.0, two_i / width)
    table = np.zeros((n_positions, width))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle[:, : width // 2])
    return table


def init_attention(rng: np.random.Generator, prefix: str, d_model: int) -> dict[str, np.ndarray]:
    return {
        f"{prefix}.wq": glorot(rng, d_model, d_model),
        f"{prefix}.wk": glorot(rng, d_model, d_model),
        f"{prefix}.wv": glorot(rng, d_model, d_model),
        f"{prefix}.wo": glorot(rng, d_model, d_model),
        f"{prefix}.bo": np.zeros(d_model),
    }


def init_norm(prefix: str, d_model: int) -> dict[str, np.ndarray]:
    return {f"{prefix}.gain": np.ones(d_model), f"{prefix}.bias": np.zeros(d_model)}


def init_ffn(rng: np.random.Generator, prefix: str, d_model: int, ffn_dim: int) -> dict[str, np.ndarray]:
    return {
        f"{prefix}.w1": glorot(rng, d_model, ffn_dim),
        f"{prefix}.b1": np.zeros(ffn_dim),
        f"{prefix}.w2": glorot(rng, ffn_dim, d_model),
        f"{prefix}.b2": np.zeros(d_model),
    }


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = ad.matmul(x, w)
    return y if b is None else ad.add_row(y, b)


def norm(x: Tensor, p: Params, prefix: str) -> Tensor:
    return ad.layer_norm(x, p[f"{prefix}.gain"], p[f"{prefix}.bias"])


def feed_forward(x: Tensor, p: Params, prefix: str) -> Tensor:
    hidden = ad.relu(linear(x, p[f"{prefix}.w1"], p[f"{prefix}.b1"]))
    return linear(hidden, p[f"{prefix}.w2"], p[f"{prefix}.b2"])


def attention(query_in: Tensor, kv_in: Tensor, p: Params, prefix: str, n_heads: int,
              mask: np.ndarray | None = None, batch: int = 1) -> tuple[Tensor, Tensor]:
    """Multi-head scaled dot-product attention over ``batch`` stacked samples.

    Inputs are [batch * Tq, d_model] and [batch * Tk, d_model]. Returns the
    projected output [batch * Tq, d_model] and the attention weights
    [batch * n_heads, Tq, Tk]. Scores are divided by sqrt(d_model / n_heads).
    """
    d_model = query_in.shape[-1]
    dh = d_model // n_heads
    q = ad.split_heads(ad.matmul(query_in, p[f"{prefix}.wq"]), n_heads, batch)
    k = ad.split_heads(ad.matmul(kv_in, p[f"{prefix}.wk"]), n_heads, batch)
    v = ad.split_heads(ad.matmul(kv_in, p[f"{prefix}.wv"]), n_heads, batch)
    scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(dh))
    weights = ad.row_softmax(scores, mask)
    mixed = ad.merge_heads(ad.matmul(weights, v), batch)
    return linear(mixed, p[f"{prefix}.wo"], p[f"{prefix}.bo"]), weights


def key_mask(lengths: Sequence[int], n_queries: int, n_keys: int, n_heads: int,
             causal: bool = False) -> np.ndarray | None:
    """Boolean [batch * n_heads, n_queries, n_keys] mask hiding padded keys.

    With ``causal`` query i also only sees keys <= i. Returns None when
    nothing is hidden.
    """
    keys = np.arange(n_keys)[None, :] < np.asarray(lengths)[:, None]          # [B, Tk]
    mask = np.broadcast_to(keys[:, None, :], (len(lengths), n_queries, n_keys))
    if causal:
        mask = mask & causal_mask(max(n_queries, n_keys))[:n_queries, :n_keys][None]
    if mask.all():
        return None
    return np.repeat(mask, n_heads, axis=0)


def pad_rows(blocks: Sequence[np.ndarray], n_rows: int) -> np.ndarray:
    """Stack [T_b, w] blocks into [B * n_rows, w], zero-padding each block."""
    width = blocks[0].shape[1]
    out = np.zeros((len(blocks) * n_rows, width))
    for b, block in enumerate(blocks):
        out[b * n_rows: b * n_rows + block.shape[0]] = block
    return out


def causal_mask(n: int) -> np.ndarray:
    """Boolean [n, n] mask allowing position i to see positions <= i."""
    return np.tril(np.ones((n, n), dtype=bool))
