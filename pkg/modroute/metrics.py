"""
Caption metrics and correlation statistics.

Text metrics work on lowercased, whitespace-split tokens:
- bleu_k: corpus BLEU-k, clipped n-gram precision with brevity penalty, no smoothing
- rouge:  ROUGE-1 (unigram F1) and ROUGE-L (LCS F1), mean over pairs, max over references
- wer:    word error rate in percent against the first reference

``pearson`` returns r with a two-sided p-value from the Student-t distribution,
evaluated through the regularized incomplete beta function.
"""

import math
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, List, NamedTuple, Sequence, Tuple, Union

import numpy as np
from scipy.special import betaln

from .exceptions import MetricError

NGRAM_ORDER = 4


@dataclass(frozen=True)
class TokenizedPair:
    hypothesis: Tuple[str, ...]
    references: Tuple[Tuple[str, ...], ...]

    def __post_init__(self):
        if not self.references:
            raise MetricError("a pair needs at least one reference")

    @classmethod
    def from_text(cls, hypothesis: Union[str, Sequence[str]], references) -> "TokenizedPair":
        """Hypothesis and references given as sentences."""
        if isinstance(references, str):
            references = [references]
        return cls(tokenize(hypothesis), tuple(tokenize(r) for r in references))


def tokenize(text: Union[str, Iterable[str]]) -> Tuple[str, ...]:
    if isinstance(text, str):
        return tuple(text.lower().split())
    return tuple(str(w).lower() for w in text)


def extract_ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i: i + n]) for i in range(len(tokens) - n + 1))


class BLEUStats(NamedTuple):
    score: float
    correct: List[int]
    total: List[int]
    precisions: List[float]
    bp: float
    sys_len: int
    ref_len: int


def _closest_ref_len(hyp_len: int, references) -> int:
    # ties go to the shorter reference
    return min((abs(len(r) - hyp_len), len(r)) for r in references)[1]


def bleu_stats(pairs: Sequence[TokenizedPair], k: int = NGRAM_ORDER) -> BLEUStats:
    if not pairs:
        raise MetricError("bleu: empty corpus")
    if not 1 <= k <= NGRAM_ORDER:
        raise MetricError(f"bleu: order must be in 1..{NGRAM_ORDER}, got {k}")
    correct = [0] * k
    total = [0] * k
    sys_len = ref_len = 0
    for pair in pairs:
        hyp = pair.hypothesis
        sys_len += len(hyp)
        ref_len += _closest_ref_len(len(hyp), pair.references)
        for n in range(1, k + 1):
            hyp_counts = extract_ngrams(hyp, n)
            max_ref = Counter()
            for ref in pair.references:
                for gram, count in extract_ngrams(ref, n).items():
                    max_ref[gram] = max(max_ref[gram], count)
            correct[n - 1] += sum(min(c, max_ref[g]) for g, c in hyp_counts.items())
            total[n - 1] += max(len(hyp) - n + 1, 0)

    precisions = [c / t if t else 0.0 for c, t in zip(correct, total)]
    if sys_len == 0:
        bp = 0.0
    elif sys_len < ref_len:
        bp = math.exp(1.0 - ref_len / sys_len)
    else:
        bp = 1.0
    if min(precisions) == 0.0:
        score = 0.0
    else:
        score = bp * math.exp(sum(math.log(p) for p in precisions) / k)
    return BLEUStats(score, correct, total, precisions, bp, sys_len, ref_len)


def bleu_k(pairs: Sequence[TokenizedPair], k: int) -> float:
    return bleu_stats(pairs, k).score


def _f1(overlap: int, hyp_len: int, ref_len: int) -> float:
    if overlap == 0 or hyp_len == 0 or ref_len == 0:
        return 0.0
    precision, recall = overlap / hyp_len, overlap / ref_len
    return 2 * precision * recall / (precision + recall)


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def _rouge_pair(hyp, ref, variant: str) -> float:
    if variant == "1":
        overlap = sum((Counter(hyp) & Counter(ref)).values())
    else:
        overlap = lcs_length(hyp, ref)
    return _f1(overlap, len(hyp), len(ref))


def rouge(pairs: Sequence[TokenizedPair], variant: str = "1") -> float:
    variant = str(variant).upper()
    if variant not in ("1", "L"):
        raise MetricError(f"rouge: variant must be '1' or 'L', got {variant!r}")
    if not pairs:
        return 0.0
    scores = [max(_rouge_pair(p.hypothesis, ref, variant) for ref in p.references) for p in pairs]
    return float(np.mean(scores))


def edit_distance(hyp: Sequence[str], ref: Sequence[str]) -> int:
    """Word-level Levenshtein distance with unit costs."""
    prev = list(range(len(ref) + 1))
    for i, h in enumerate(hyp, start=1):
        cur = [i]
        for j, r in enumerate(ref, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (h != r)))
        prev = cur
    return prev[-1]


def wer(pairs: Sequence[TokenizedPair]) -> float:
    if not pairs:
        raise MetricError("wer: empty corpus")
    errors = words = 0
    for pair in pairs:
        ref = pair.references[0]
        if not ref:
            raise MetricError("wer: empty reference")
        errors += edit_distance(pair.hypothesis, ref)
        words += len(ref)
    return 100.0 * errors / words


# ---------------------------------------------------------------------------
# Correlation
# ---------------------------------------------------------------------------

_CF_MAX_ITER = 500
_CF_EPS = 1e-15
_CF_TINY = 1e-300


def _beta_continued_fraction(a: float, b: float, x: float) -> float:
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > _CF_TINY else _CF_TINY)
    h = d
    for m in range(1, _CF_MAX_ITER + 1):
        m2 = 2 * m
        for aa in (
            m * (b - m) * x / ((qam + m2) * (a + m2)),
            -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2)),
        ):
            d = 1.0 + aa * d
            d = 1.0 / (d if abs(d) > _CF_TINY else _CF_TINY)
            c = 1.0 + aa / c
            c = c if abs(c) > _CF_TINY else _CF_TINY
            delta = d * c
            h *= delta
        if abs(delta - 1.0) < _CF_EPS:
            break
    return h


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    front = math.exp(a * math.log(x) + b * math.log1p(-x) - betaln(a, b))
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _beta_continued_fraction(a, b, x) / a
    return 1.0 - front * _beta_continued_fraction(b, a, 1.0 - x) / b


def student_t_two_sided(t: float, df: float) -> float:
    return regularized_incomplete_beta(df / 2.0, 0.5, df / (df + t * t))


def pearson(x: Sequence[float], y: Sequence[float]) -> Tuple[float, float]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise MetricError(f"pearson: inputs must be 1-D and of equal length, got {x.shape} and {y.shape}")
    n = x.size
    if n < 3:
        raise MetricError(f"pearson: need at least 3 points, got {n}")
    if np.ptp(x) == 0.0 or np.ptp(y) == 0.0:
        raise MetricError("pearson: constant input, correlation undefined")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    r = float(np.clip((dx @ dy) / math.sqrt(sxx * syy), -1.0, 1.0))
    if abs(r) == 1.0:
        return r, 0.0
    df = n - 2
    t = r * math.sqrt(df / (1.0 - r * r))
    return r, float(min(max(student_t_two_sided(t, df), 0.0), 1.0))


def score_corpus(pairs: Sequence[TokenizedPair]) -> dict:
    """Every text metric of the evaluation report."""
    scores = {f"bleu{k}": bleu_k(pairs, k) for k in range(1, NGRAM_ORDER + 1)}
    scores["rouge1"] = rouge(pairs, "1")
    scores["rougeL"] = rouge(pairs, "L")
    scores["wer"] = wer(pairs)
    return scores
