"""Corpus-level caption metrics: BLEU-4, ROUGE-L and CIDEr-D.

Conventions follow the common captioning evaluation toolkit: BLEU with
clipped counts, closest-reference brevity penalty and no smoothing;
ROUGE-L as an LCS F-measure with beta = 1.2 keeping the best reference;
CIDEr-D with document frequencies from the references, clipped TF-IDF
n-gram vectors (n = 1..4), a Gaussian length penalty (sigma = 6) and a x10
scale.
"""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

Tokens = Sequence[str]

ROUGE_BETA = 1.2
CIDER_SIGMA = 6.0
MAX_N = 4


class MetricInputError(ValueError):
    pass


@dataclass(frozen=True)
class EvalEntry:
    sample_id: str
    hypothesis: tuple[str, ...]
    references: tuple[tuple[str, ...], ...]


@dataclass
class MetricReport:
    bleu4: float
    rougeL: float
    cider: float
    per_sample: dict[str, dict[str, float]] | None = field(default=None)

    def to_dict(self, include_per_sample: bool = True) -> dict:
        d = asdict(self)
        if not include_per_sample or d["per_sample"] is None:
            d.pop("per_sample")
        return d


def make_corpus(entries: Iterable) -> list[EvalEntry]:
    """Validate ``(id, hypothesis, references)`` triples (or EvalEntry objects)."""
    corpus = []
    seen = set()
    for e in entries:
        if not isinstance(e, EvalEntry):
            sid, hyp, refs = e
            e = EvalEntry(str(sid), tuple(hyp), tuple(tuple(r) for r in refs))
        if e.sample_id in seen:
            raise MetricInputError(f"duplicate sample id {e.sample_id!r}")
        if not e.references or any(len(r) == 0 for r in e.references):
            raise MetricInputError(f"sample {e.sample_id!r}: references must be non-empty")
        seen.add(e.sample_id)
        corpus.append(e)
    if not corpus:
        raise MetricInputError("empty corpus")
    return corpus


def ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


# --------------------------------------------------------------------------
# BLEU


def _closest_ref_length(hyp_len: int, refs: Sequence[Tokens]) -> int:
    return min((abs(len(r) - hyp_len), len(r)) for r in refs)[1]


def bleu4(corpus) -> float:
    corpus = make_corpus(corpus)
    matched = [0] * MAX_N
    total = [0] * MAX_N
    hyp_len = ref_len = 0
    for e in corpus:
        hyp_len += len(e.hypothesis)
        ref_len += _closest_ref_length(len(e.hypothesis), e.references)
        for n in range(1, MAX_N + 1):
            counts = ngrams(e.hypothesis, n)
            max_ref = Counter()
            for r in e.references:
                max_ref |= ngrams(r, n)
            matched[n - 1] += sum(min(c, max_ref[g]) for g, c in counts.items())
            total[n - 1] += max(0, len(e.hypothesis) - n + 1)
    if min(matched) == 0:
        return 0.0
    log_precision = sum(math.log(m / t) for m, t in zip(matched, total)) / MAX_N
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return bp * math.exp(log_precision)


# --------------------------------------------------------------------------
# ROUGE-L


def lcs_length(a: Tokens, b: Tokens) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_sentence(hypothesis: Tokens, references: Sequence[Tokens], beta: float = ROUGE_BETA) -> float:
    if not hypothesis:
        return 0.0
    best = 0.0
    b2 = beta * beta
    for ref in references:
        lcs = lcs_length(hypothesis, ref)
        if lcs == 0:
            continue
        p = lcs / len(hypothesis)
        r = lcs / len(ref)
        best = max(best, (1 + b2) * p * r / (r + b2 * p))
    return best


def rouge_l(corpus, beta: float = ROUGE_BETA) -> float:
    corpus = make_corpus(corpus)
    return sum(rouge_l_sentence(e.hypothesis, e.references, beta) for e in corpus) / len(corpus)


# --------------------------------------------------------------------------
# CIDEr-D


def _tfidf(tokens: Tokens, df: Counter, log_n: float):
    vecs, norms = [], []
    for n in range(1, MAX_N + 1):
        vec = {g: tf * (log_n - math.log(max(1.0, df[g]))) for g, tf in ngrams(tokens, n).items()}
        vecs.append(vec)
        norms.append(math.sqrt(sum(v * v for v in vec.values())))
    return vecs, norms


def _cider_pair(hyp, ref, hyp_len: int, ref_len: int, sigma: float) -> float:
    (hv, hn), (rv, rn) = hyp, ref
    delta = hyp_len - ref_len
    penalty = math.exp(-(delta * delta) / (2.0 * sigma * sigma))
    total = 0.0
    for n in range(MAX_N):
        val = sum(min(w, rv[n].get(g, 0.0)) * rv[n].get(g, 0.0) for g, w in hv[n].items())
        if hn[n] != 0 and rn[n] != 0:
            val /= hn[n] * rn[n]
        total += val * penalty
    return total / MAX_N


def cider_scores(corpus, sigma: float = CIDER_SIGMA) -> list[float]:
    corpus = make_corpus(corpus)
    if len(corpus) < 2:
        raise MetricInputError("CIDEr needs at least two samples for document frequencies")
    df: Counter = Counter()
    for e in corpus:
        df.update({g for r in e.references for n in range(1, MAX_N + 1) for g in ngrams(r, n)})
    log_n = math.log(float(len(corpus)))
    scores = []
    for e in corpus:
        hyp = _tfidf(e.hypothesis, df, log_n)
        per_ref = [_cider_pair(hyp, _tfidf(r, df, log_n), len(e.hypothesis), len(r), sigma)
                   for r in e.references]
        scores.append(10.0 * sum(per_ref) / len(per_ref))
    return scores


def cider(corpus, sigma: float = CIDER_SIGMA) -> float:
    scores = cider_scores(corpus, sigma)
    return sum(scores) / len(scores)


# --------------------------------------------------------------------------


def evaluate_corpus(corpus, per_sample: bool = False) -> MetricReport:
    corpus = make_corpus(corpus)
    detail = None
    cider_per = cider_scores(corpus) if len(corpus) >= 2 else None
    if per_sample:
        detail = {}
        for i, e in enumerate(corpus):
            row = {"rougeL": rouge_l_sentence(e.hypothesis, e.references)}
            if cider_per is not None:
                row["cider"] = cider_per[i]
            detail[e.sample_id] = row
    return MetricReport(
        bleu4=bleu4(corpus),
        rougeL=rouge_l(corpus),
        cider=float("nan") if cider_per is None else sum(cider_per) / len(cider_per),
        per_sample=detail,
    )


def read_eval_corpus(path: str | Path) -> list[EvalEntry]:
    """JSONL of {"id", "hypothesis": [tokens], "references": [[tokens], ...]}; tokens are lowercased."""
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                entries.append((str(rec["id"]),
                                [t.lower() for t in rec["hypothesis"]],
                                [[t.lower() for t in r] for r in rec["references"]]))
            except (json.JSONDecodeError, KeyError, TypeError, AttributeError) as exc:
                raise MetricInputError(f"line {lineno}: malformed evaluation record ({exc})") from None
    return make_corpus(entries)


def write_eval_corpus(corpus: Iterable[EvalEntry], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for e in corpus:
            fh.write(json.dumps({"id": e.sample_id, "hypothesis": list(e.hypothesis),
                                 "references": [list(r) for r in e.references]}) + "\n")
