"""Autoregressive caption decoder, vocabulary, and greedy/beam search."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import (Params, attention, feed_forward, glorot, init_attention, init_ffn, init_norm,
                     key_mask, linear, norm, sinusoid_table)

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")


class VocabularyError(KeyError):
    pass


class Vocabulary:
    """Bijective token <-> id map; ids 0-3 are reserved for pad/bos/eos/unk."""

    def __init__(self, words: Iterable[str] = ()):
        self.tokens: list[str] = list(SPECIAL_TOKENS)
        self._index = {tok: i for i, tok in enumerate(self.tokens)}
        for w in words:
            if w not in self._index:
                self._index[w] = len(self.tokens)
                self.tokens.append(w)

    @classmethod
    def from_tokens(cls, tokens: Sequence[str]) -> "Vocabulary":
        if tuple(tokens[:4]) != SPECIAL_TOKENS:
            raise VocabularyError(f"vocabulary must start with {SPECIAL_TOKENS}")
        if len(set(tokens)) != len(tokens):
            raise VocabularyError("duplicate tokens in vocabulary")
        return cls(tokens[4:])

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def id(self, token: str) -> int:
        return self._index.get(token, UNK)

    def encode(self, tokens: Iterable[str], strict: bool = True) -> list[int]:
        ids = []
        for tok in tokens:
            if tok not in self._index:
                if strict:
                    raise VocabularyError(f"token {tok!r} not in vocabulary")
                ids.append(UNK)
            else:
                ids.append(self._index[tok])
        return ids

    def decode(self, ids: Iterable[int], strip: bool = True) -> list[str]:
        out = []
        for i in ids:
            i = int(i)
            if not 0 <= i < len(self.tokens):
                raise VocabularyError(f"token id {i} out of range")
            if strip and i in (PAD, BOS, EOS):
                continue
            out.append(self.tokens[i])
        return out


@dataclass(frozen=True)
class DecoderConfig:
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 4
    ffn_dim: int = 64
    max_caption_len: int = 16
    beam_width: int = 3

    def __post_init__(self):
        for name in ("d_model", "n_heads", "ffn_dim", "max_caption_len", "beam_width"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.n_layers < 0:
            raise ValueError("n_layers must be non-negative")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")


def init_decoder_params(rng: np.random.Generator, vocab_size: int, config: DecoderConfig) -> dict[str, np.ndarray]:
    d = config.d_model
    params = {"dec.embed": rng.normal(0.0, d ** -0.5, size=(vocab_size, d))}
    for layer in range(config.n_layers):
        prefix = f"dec.{layer}"
        params.update(init_norm(f"{prefix}.ln1", d))
        params.update(init_attention(rng, f"{prefix}.self", d))
        params.update(init_norm(f"{prefix}.ln2", d))
        params.update(init_attention(rng, f"{prefix}.cross", d))
        params.update(init_norm(f"{prefix}.ln3", d))
        params.update(init_ffn(rng, f"{prefix}.ffn", d, config.ffn_dim))
    params.update(init_norm("dec.ln_f", d))
    params["dec.w_o"] = glorot(rng, d, vocab_size)
    params["dec.b_o"] = np.zeros(vocab_size)
    return params


def _check_targets(targets: Sequence[int], vocab_size: int, config: DecoderConfig) -> None:
    n = len(targets)
    if n == 0:
        raise ValueError("targets must not be empty")
    if targets[0] != BOS:
        raise ValueError("targets must begin with BOS")
    if n > config.max_caption_len:
        raise ValueError(f"{n} target tokens exceed max_caption_len={config.max_caption_len}")
    if min(targets) < 0 or max(targets) >= vocab_size:
        raise VocabularyError(f"target id outside vocabulary of size {vocab_size}")


def decoder_hidden_batch(targets: Sequence[Sequence[int]], h_t: Tensor, frame_lengths: Sequence[int],
                         params: Params, config: DecoderConfig) -> Tensor:
    """Final decoder states [B * N_max, d_model] for B teacher-forced prefixes.

    ``h_t`` is [B * T_max, d_model] with per-sample frame counts ``frame_lengths``.
    Target sequences are PAD-extended to N_max; padded rows are meaningless.
    """
    vocab_size = params["dec.embed"].shape[0]
    batch = len(targets)
    if batch != len(frame_lengths):
        raise ad.ShapeError(f"{batch} target sequences for {len(frame_lengths)} videos")
    for seq in targets:
        _check_targets(seq, vocab_size, config)
    lengths = [len(seq) for seq in targets]
    n_max = max(lengths)
    t_max = h_t.shape[0] // batch
    ids = np.full((batch, n_max), PAD, dtype=np.int64)
    for b, seq in enumerate(targets):
        ids[b, :len(seq)] = seq
    x = ad.embedding(params["dec.embed"], ids.reshape(-1))
    table = sinusoid_table(config.max_caption_len, config.d_model)[:n_max]
    x = ad.add(x, ad.constant(np.tile(table, (batch, 1))))
    self_mask = key_mask(lengths, n_max, n_max, config.n_heads, causal=True)
    cross_mask = key_mask(frame_lengths, n_max, t_max, config.n_heads)
    for layer in range(config.n_layers):
        prefix = f"dec.{layer}"
        h = norm(x, params, f"{prefix}.ln1")
        x = ad.add(x, attention(h, h, params, f"{prefix}.self", config.n_heads, self_mask, batch)[0])
        h = norm(x, params, f"{prefix}.ln2")
        x = ad.add(x, attention(h, h_t, params, f"{prefix}.cross", config.n_heads, cross_mask, batch)[0])
        x = ad.add(x, feed_forward(norm(x, params, f"{prefix}.ln3"), params, f"{prefix}.ffn"))
    return norm(x, params, "dec.ln_f")


def decoder_logits_batch(targets: Sequence[Sequence[int]], h_t: Tensor, frame_lengths: Sequence[int],
                         params: Params, config: DecoderConfig) -> Tensor:
    hidden = decoder_hidden_batch(targets, h_t, frame_lengths, params, config)
    return linear(hidden, params["dec.w_o"], params["dec.b_o"])


def decoder_logits(targets: Sequence[int], h_t: Tensor, params: Params, config: DecoderConfig) -> Tensor:
    """Teacher-forced next-token logits [N, |V|] for one caption prefix.

    Row i depends only on targets[:i+1] and h_t.
    """
    return decoder_logits_batch([list(targets)], h_t, [h_t.shape[0]], params, config)


def _log_softmax(row: np.ndarray) -> np.ndarray:
    z = row - row.max()
    return z - np.log(np.exp(z).sum())


StepFn = Callable[[tuple[int, ...]], np.ndarray]


def greedy_search(step: StepFn, max_len: int, bos: int = BOS, eos: int = EOS) -> list[int]:
    """Append the argmax token (lowest id on ties) until EOS or ``max_len`` tokens."""
    seq = [bos]
    while len(seq) - 1 < max_len:
        tok = int(np.argmax(step(tuple(seq))))
        seq.append(tok)
        if tok == eos:
            break
    return seq[1:]


def _path_score(step: StepFn, seq: Sequence[int], bos: int) -> float:
    prefix, total = (bos,), 0.0
    for tok in seq:
        total += float(step(prefix)[tok])
        prefix += (tok,)
    return total


def beam_search(step: StepFn, max_len: int, width: int, bos: int = BOS, eos: int = EOS) -> list[int]:
    """Length-normalised beam search.

    Hypotheses end at EOS or at ``max_len`` tokens. The returned hypothesis
    maximises total log-probability divided by its token count; ties go to
    the lexicographically smallest id sequence. The greedy path always joins
    the finished pool, so the result never scores below greedy decoding.
    """
    if width < 1:
        raise ValueError("beam width must be >= 1")
    alive: list[tuple[tuple[int, ...], float]] = [((), 0.0)]
    finished: list[tuple[tuple[int, ...], float]] = []
    while alive:
        candidates = []
        for seq, score in alive:
            lp = step((bos,) + seq)
            for tok in range(lp.shape[0]):
                candidates.append((seq + (tok,), score + float(lp[tok])))
        candidates.sort(key=lambda c: (-c[1], c[0]))
        alive = []
        for seq, score in candidates[:width]:
            if seq[-1] == eos or len(seq) >= max_len:
                finished.append((seq, score))
            else:
                alive.append((seq, score))
    greedy = tuple(greedy_search(step, max_len, bos, eos))
    finished.append((greedy, _path_score(step, greedy, bos)))
    best = min(finished, key=lambda c: (-c[1] / len(c[0]), c[0]))
    return list(best[0])


def normalized_score(step: StepFn, seq: Sequence[int], bos: int = BOS) -> float:
    """Total log-probability of ``seq`` divided by its length."""
    return _path_score(step, seq, bos) / len(seq)


def _model_step(h_t: Tensor, params: Params, config: DecoderConfig) -> StepFn:
    cache: dict[tuple[int, ...], np.ndarray] = {}

    def step(prefix: tuple[int, ...]) -> np.ndarray:
        if prefix not in cache:
            cache[prefix] = _log_softmax(decoder_logits(prefix, h_t, params, config).data[-1])
        return cache[prefix]
    return step


def greedy_decode(h_t: Tensor, params: Params, config: DecoderConfig) -> list[int]:
    return greedy_search(_model_step(h_t, params, config), config.max_caption_len)


def beam_decode(h_t: Tensor, params: Params, config: DecoderConfig) -> list[int]:
    return beam_search(_model_step(h_t, params, config), config.max_caption_len, config.beam_width)


def greedy_decode_batch(h_t: Tensor, frame_lengths: Sequence[int], params: Params,
                        config: DecoderConfig) -> list[list[int]]:
    """Greedy decoding of several videos in lock-step; same result as per-video greedy_decode."""
    batch = len(frame_lengths)
    seqs = [[BOS] for _ in range(batch)]
    generated: list[list[int]] = [[] for _ in range(batch)]
    done = [False] * batch
    for _ in range(config.max_caption_len):
        logits = decoder_logits_batch(seqs, h_t, frame_lengths, params, config).data
        n = len(seqs[0])
        for b in range(batch):
            # finished rows keep a placeholder so every prefix has the same length
            tok = EOS if done[b] else int(np.argmax(_log_softmax(logits[b * n + n - 1])))
            seqs[b].append(tok)
            if not done[b]:
                generated[b].append(tok)
                done[b] = tok == EOS
        if all(done):
            break
    return generated


def token_log_probs(tokens: Sequence[int], h_t: Tensor, params: Params, config: DecoderConfig) -> np.ndarray:
    """Per-token log-probabilities of a generated sequence (BOS excluded from ``tokens``)."""
    tokens = list(tokens)
    if not tokens:
        return np.zeros(0)
    logits = decoder_logits([BOS] + tokens[:-1], h_t, params, config).data
    z = logits - logits.max(axis=1, keepdims=True)
    lsm = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return lsm[np.arange(len(tokens)), tokens]


def sequence_log_prob(tokens: Sequence[int], h_t: Tensor, params: Params, config: DecoderConfig) -> float:
    return float(token_log_probs(tokens, h_t, params, config).sum())
