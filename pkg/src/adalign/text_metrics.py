"""Caption metrics: sentence BLEU, ROUGE-L and CIDEr (Gaussian length penalty).

All three share :func:`tokenize`.  These are small reference
implementations written for auditability, not speed, and are not meant to
match any third-party scorer digit for digit.
"""
from __future__ import annotations

import math
import re
import warnings
from collections import Counter
from typing import Sequence

BLEU_EPS = 1e-9
ROUGE_BETA = 1.2
CIDER_SCALE = 10.0

_WORD = re.compile(r"[a-z0-9_]+")


def tokenize(text: str) -> list[str]:
    """Lowercase, then keep runs of letters/digits/underscore; punctuation splits and is dropped."""
    return _WORD.findall(text.lower())


def detokenize(tokens: Sequence[str]) -> str:
    return " ".join(tokens)


def _toks(x) -> list[str]:
    return tokenize(x) if isinstance(x, str) else list(x)


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidate, references, max_n: int = 4) -> float:
    """Sentence BLEU with brevity penalty.

    Orders for which the candidate has no n-grams (candidate shorter than n)
    are left out of the geometric mean; a zero match count is replaced by
    ``BLEU_EPS``.
    """
    cand = _toks(candidate)
    refs = [_toks(r) for r in references]
    if not cand:
        warnings.warn("empty candidate scores 0 BLEU", stacklevel=2)
        return 0.0
    if not refs:
        raise ValueError("bleu needs at least one reference")
    log_p = []
    for n in range(1, max_n + 1):
        c = ngrams(cand, n)
        total = sum(c.values())
        if total == 0:
            continue
        max_ref: Counter = Counter()
        for r in refs:
            for g, k in ngrams(r, n).items():
                max_ref[g] = max(max_ref[g], k)
        clipped = sum(min(k, max_ref[g]) for g, k in c.items())
        log_p.append(math.log(clipped / total if clipped else BLEU_EPS))
    c_len = len(cand)
    # closest reference length, ties to the shorter one
    r_len = min((abs(len(r) - c_len), len(r)) for r in refs)[1]
    bp = 1.0 if c_len > r_len else math.exp(1.0 - r_len / c_len)
    return bp * math.exp(sum(log_p) / len(log_p))


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidate, references, beta: float = ROUGE_BETA) -> float:
    """LCS F-measure, best over references."""
    cand = _toks(candidate)
    refs = [_toks(r) for r in references]
    if not cand:
        warnings.warn("empty candidate scores 0 ROUGE-L", stacklevel=2)
        return 0.0
    best = 0.0
    for r in refs:
        if not r:
            continue
        lcs = lcs_length(cand, r)
        if lcs == 0:
            continue
        p, rec = lcs / len(cand), lcs / len(r)
        f = (1 + beta ** 2) * p * rec / (rec + beta ** 2 * p)
        best = max(best, f)
    return best


class CiderScorer:
    """CIDEr over a corpus of (candidate, references) pairs.

    Document frequency of an n-gram = number of samples whose reference set
    contains it; idf = log(N_samples) - log(max(1, df)).  Per n, the score is
    the cosine between tf-idf vectors, multiplied by a Gaussian penalty on
    the candidate/reference length difference; orders are averaged, then
    references, and the result is scaled by 10.
    """

    def __init__(self, references_corpus, max_n: int = 4, sigma: float = 6.0):
        self.refs = [[_toks(r) for r in refs] for refs in references_corpus]
        if len(self.refs) < 2:
            raise ValueError("CIDEr needs a corpus of at least 2 samples")
        self.max_n = max_n
        self.sigma = sigma
        self.df: Counter = Counter()
        for refs in self.refs:
            seen = set()
            for r in refs:
                for n in range(1, max_n + 1):
                    seen.update(ngrams(r, n))
            self.df.update(seen)
        self.log_n = math.log(len(self.refs))

    def _vec(self, tokens):
        vecs, norms = [], []
        for n in range(1, self.max_n + 1):
            v = {g: tf * (self.log_n - math.log(max(1.0, self.df[g])))
                 for g, tf in ngrams(tokens, n).items()}
            vecs.append(v)
            norms.append(math.sqrt(sum(x * x for x in v.values())))
        return vecs, norms

    def score(self, candidate, index: int) -> float:
        cand = _toks(candidate)
        cv, cn = self._vec(cand)
        total = 0.0
        for ref in self.refs[index]:
            rv, rn = self._vec(ref)
            delta = len(cand) - len(ref)
            pen = math.exp(-(delta ** 2) / (2 * self.sigma ** 2))
            per_n = 0.0
            for n in range(self.max_n):
                dot = sum(x * rv[n].get(g, 0.0) for g, x in cv[n].items())
                if cn[n] > 0 and rn[n] > 0:
                    per_n += pen * dot / (cn[n] * rn[n])
            total += per_n / self.max_n
        return CIDER_SCALE * total / len(self.refs[index])


def cider_per_sample(candidates, references_corpus, max_n: int = 4, sigma: float = 6.0) -> list[float]:
    if len(candidates) != len(references_corpus):
        raise ValueError("one candidate per reference set is required")
    scorer = CiderScorer(references_corpus, max_n, sigma)
    return [scorer.score(c, i) for i, c in enumerate(candidates)]


def cider(candidates, references_corpus, max_n: int = 4, sigma: float = 6.0) -> float:
    scores = cider_per_sample(candidates, references_corpus, max_n, sigma)
    return sum(scores) / len(scores)


def score_corpus(candidates: Sequence[str], references: Sequence[Sequence[str]]) -> dict:
    """Per-sample and mean BLEU / ROUGE-L / CIDEr."""
    per = {
        "bleu": [bleu(c, r) for c, r in zip(candidates, references)],
        "rouge_l": [rouge_l(c, r) for c, r in zip(candidates, references)],
    }
    per["cider"] = (cider_per_sample(candidates, references) if len(candidates) >= 2
                    else [float("nan")] * len(candidates))
    means = {k: (sum(v) / len(v) if v else 0.0) for k, v in per.items()}
    return {"per_sample": per, "mean": means}
