"""Ranking, rating, set and n-gram text metrics."""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass
from typing import Hashable, Iterable, Sequence

RATING_FALLBACK = 3


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class RankedList:
    """Candidates in descending score order plus the single relevant target."""

    candidates: tuple
    target: Hashable

    def __post_init__(self):
        object.__setattr__(self, "candidates", tuple(self.candidates))
        if not self.candidates:
            raise MetricError("empty ranked list")
        if len(set(self.candidates)) != len(self.candidates):
            raise MetricError("ranked list contains duplicate candidates")

    def rank(self) -> int | None:
        """1-based rank of the target, or None when absent."""
        try:
            return self.candidates.index(self.target) + 1
        except ValueError:
            return None


def _rank_within(r: RankedList, k: int) -> int | None:
    if k < 1:
        raise MetricError(f"K must be >= 1, got {k}")
    rank = r.rank()
    return rank if rank is not None and rank <= k else None


def hr_at_k(r: RankedList, k: int) -> float:
    return 1.0 if _rank_within(r, k) else 0.0


def ndcg_at_k(r: RankedList, k: int) -> float:
    rank = _rank_within(r, k)
    return 1.0 / math.log2(rank + 1) if rank else 0.0


def mrr_at_k(r: RankedList, k: int) -> float:
    rank = _rank_within(r, k)
    return 1.0 / rank if rank else 0.0


def ranking_report(lists: Sequence[RankedList], ks: Iterable[int] = (3, 5, 10)) -> dict[str, float]:
    """Unweighted means over users of HR/NDCG/MRR at each K."""
    if not lists:
        raise MetricError("no ranked lists to score")
    out: dict[str, float] = {}
    for k in ks:
        out[f"hr@{k}"] = sum(hr_at_k(r, k) for r in lists) / len(lists)
        out[f"ndcg@{k}"] = sum(ndcg_at_k(r, k) for r in lists) / len(lists)
        out[f"mrr@{k}"] = sum(mrr_at_k(r, k) for r in lists) / len(lists)
    return out


# -- ratings ------------------------------------------------------------------


def parse_rating(text: str) -> tuple[int, bool]:
    """First stand-alone digit 1-5 in ``text``; ``(3, False)`` when there is none."""
    m = re.search(r"(?<!\d)[1-5](?!\d)", text)
    if m is None:
        return RATING_FALLBACK, False
    return int(m.group()), True


def _paired(preds: Sequence[float], truths: Sequence[float]):
    if len(preds) != len(truths):
        raise MetricError(f"length mismatch: {len(preds)} predictions vs {len(truths)} truths")
    if not preds:
        raise MetricError("no predictions")
    return zip(preds, truths)


def mae(preds: Sequence[float], truths: Sequence[float]) -> float:
    return sum(abs(p - t) for p, t in _paired(preds, truths)) / len(preds)


def rmse(preds: Sequence[float], truths: Sequence[float]) -> float:
    return math.sqrt(sum((p - t) ** 2 for p, t in _paired(preds, truths)) / len(preds))


# -- sets ---------------------------------------------------------------------


def set_prf(selected: Iterable, relevant: Iterable) -> tuple[float, float, float]:
    sel, rel = set(selected), set(relevant)
    hit = len(sel & rel)
    p = hit / len(sel) if sel else 0.0
    r = hit / len(rel) if rel else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f1


# -- text ---------------------------------------------------------------------


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidate: Sequence[str], references: Sequence[Sequence[str]], max_n: int = 4) -> float:
    """Sentence BLEU: uniform weights, clipped counts, brevity penalty.

    Candidates shorter than ``max_n`` use order ``len(candidate)`` so an exact
    match of a short sentence still scores 1.
    """
    if not candidate:
        return 0.0
    if not references:
        raise MetricError("bleu needs at least one reference")
    order = min(max_n, len(candidate))
    log_p = 0.0
    for n in range(1, order + 1):
        cand = _ngrams(candidate, n)
        max_ref: Counter = Counter()
        for ref in references:
            max_ref |= _ngrams(ref, n)
        clipped = sum(min(c, max_ref[g]) for g, c in cand.items())
        if clipped == 0:
            return 0.0
        log_p += math.log(clipped / sum(cand.values())) / order
    c = len(candidate)
    r = min((len(ref) for ref in references), key=lambda L: (abs(L - c), L))
    bp = 1.0 if c > r else math.exp(1 - r / c)
    return bp * math.exp(log_p)


def lcs_length(a: Sequence, b: Sequence) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: Sequence[str], reference: Sequence[str], beta: float = 1.2) -> float:
    if not candidate or not reference:
        return 0.0
    lcs = lcs_length(candidate, reference)
    if lcs == 0:
        return 0.0
    p = lcs / len(candidate)
    r = lcs / len(reference)
    return (1 + beta**2) * p * r / (r + beta**2 * p)
