"""Caption metrics written independently of the package.

Different algorithms on purpose: exact rational arithmetic for BLEU
precisions, memoised recursion for the LCS, and a direct transcription of
the CIDEr-D definition with explicit loops.
"""
from __future__ import annotations

import math
from fractions import Fraction
from functools import lru_cache


def _grams(tokens, n):
    out = {}
    for start in range(0, len(tokens) - n + 1):
        g = tuple(tokens[start:start + n])
        out[g] = out.get(g, 0) + 1
    return out


def bleu4(pairs):
    """pairs: list of (hypothesis tokens, list of reference token lists)."""
    clipped = [0, 0, 0, 0]
    guessed = [0, 0, 0, 0]
    c = r = 0
    for hyp, refs in pairs:
        c += len(hyp)
        lengths = sorted(len(x) for x in refs)
        r += sorted(lengths, key=lambda L: (abs(L - len(hyp)), L))[0]
        for n in range(1, 5):
            h = _grams(hyp, n)
            for g, count in h.items():
                ceiling = 0
                for ref in refs:
                    ceiling = max(ceiling, _grams(ref, n).get(g, 0))
                clipped[n - 1] += min(count, ceiling)
            guessed[n - 1] += sum(h.values())
    if any(m == 0 for m in clipped):
        return 0.0
    precisions = [Fraction(m, t) for m, t in zip(clipped, guessed)]
    geo = math.exp(sum(math.log(p) for p in precisions) / 4)
    brevity = 1.0 if c > r else math.exp(1 - r / c)
    return brevity * geo


def lcs(a, b):
    a, b = tuple(a), tuple(b)

    @lru_cache(maxsize=None)
    def go(i, j):
        if i == len(a) or j == len(b):
            return 0
        if a[i] == b[j]:
            return 1 + go(i + 1, j + 1)
        return max(go(i + 1, j), go(i, j + 1))

    return go(0, 0)


def rouge_l(pairs, beta=1.2):
    total = 0.0
    for hyp, refs in pairs:
        best = 0.0
        for ref in refs:
            m = lcs(hyp, ref)
            if m == 0 or not hyp:
                continue
            prec, rec = m / len(hyp), m / len(ref)
            f = ((1 + beta ** 2) * prec * rec) / (rec + beta ** 2 * prec)
            best = max(best, f)
        total += best
    return total / len(pairs)


def cider_d(pairs, sigma=6.0):
    n_docs = len(pairs)
    doc_freq = {}
    for _, refs in pairs:
        seen = set()
        for ref in refs:
            for n in range(1, 5):
                seen.update(_grams(ref, n))
        for g in seen:
            doc_freq[g] = doc_freq.get(g, 0) + 1

    def vector(tokens, n):
        return {g: tf * (math.log(n_docs) - math.log(max(1, doc_freq.get(g, 0))))
                for g, tf in _grams(tokens, n).items()}

    def norm(vec):
        return math.sqrt(sum(x * x for x in vec.values()))

    scores = []
    for hyp, refs in pairs:
        per_ref = []
        for ref in refs:
            penalty = math.exp(-((len(hyp) - len(ref)) ** 2) / (2 * sigma ** 2))
            acc = 0.0
            for n in range(1, 5):
                hv, rv = vector(hyp, n), vector(ref, n)
                dot = 0.0
                for g in hv:
                    if g in rv:
                        dot += min(hv[g], rv[g]) * rv[g]
                denom = norm(hv) * norm(rv)
                acc += (dot / denom if denom else dot) * penalty
            per_ref.append(acc / 4)
        scores.append(10 * sum(per_ref) / len(per_ref))
    return sum(scores) / len(scores)
