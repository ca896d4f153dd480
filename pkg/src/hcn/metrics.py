"""Ranking metrics and the interest-center correlation diagnostic."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from scipy.stats import rankdata


class UndefinedMetricError(ValueError):
    pass


def auc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative.

    Ties count one half.  Uses the rank-sum (Mann-Whitney) form; the
    numerator is kept as an exact multiple of 1/2.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative")
    # average ranks are integers or halves, so 2*rank is integral
    twice_ranks = np.rint(2 * rankdata(scores)).astype(np.int64)
    twice_u = int(twice_ranks[pos].sum()) - n_pos * (n_pos + 1)
    return twice_u / (2 * n_pos * n_neg)


def rank_of(scores: np.ndarray, target: int) -> int:
    """1-based rank of ``target`` under descending score, ties by lower index."""
    s = scores[target]
    higher = int(np.sum(scores > s))
    tied_before = int(np.sum(scores[:target] == s))
    return higher + tied_before + 1


def _held_out_ranks(ranked_lists, held_out) -> list[int | None]:
    ranks = []
    for lst, item in zip(ranked_lists, held_out):
        lst = list(lst)
        ranks.append(lst.index(item) + 1 if item in lst else None)
    return ranks


def _gain(rank: int) -> float:
    return 1.0 / math.log2(1 + rank)


def hit_rate_at_k(ranked_lists: Sequence[Sequence[int]], held_out: Sequence[int], k: int) -> float:
    """Fraction of users whose held-out item is among their top ``k``."""
    if k < 1:
        raise ValueError("k must be >= 1")
    ranks = _held_out_ranks(ranked_lists, held_out)
    if not ranks:
        return 0.0
    return sum(1 for r in ranks if r is not None and r <= k) / len(ranks)


def ndcg_at_k(ranked_lists: Sequence[Sequence[int]], held_out: Sequence[int], k: int) -> float:
    """Mean ``1/log2(1 + rank)`` of the single relevant item (0 beyond ``k``)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    ranks = _held_out_ranks(ranked_lists, held_out)
    if not ranks:
        return 0.0
    return math.fsum(_gain(r) for r in ranks if r is not None and r <= k) / len(ranks)


def hit_rate_from_ranks(ranks, k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    ranks = np.asarray(ranks)
    return int(np.sum(ranks <= k)) / len(ranks) if len(ranks) else 0.0


def ndcg_from_ranks(ranks, k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    if not len(ranks):
        return 0.0
    return math.fsum(_gain(int(r)) for r in ranks if r <= k) / len(ranks)


def pairwise_pearson(centers: np.ndarray) -> tuple[list[float], int]:
    """Pearson r over the components of every unordered pair of rows.

    Returns the pair values and how many pairs were skipped because a row
    had zero variance.
    """
    centers = np.asarray(centers, dtype=np.float64)
    z = centers - centers.mean(axis=1, keepdims=True)
    norms = np.sqrt((z * z).sum(axis=1))
    vals, skipped = [], 0
    n = len(centers)
    for i in range(n):
        for j in range(i + 1, n):
            if norms[i] == 0 or norms[j] == 0:
                skipped += 1
                continue
            vals.append(float(z[i] @ z[j] / (norms[i] * norms[j])))
    return vals, skipped


def mean_pairwise_pearson(user_centers) -> tuple[float, int]:
    """Mean pair correlation per user, averaged over users (signed, unweighted)."""
    per_user, skipped = [], 0
    for centers in user_centers:
        if len(centers) < 2:
            raise ValueError("pearson diversity needs at least two centers")
        vals, sk = pairwise_pearson(centers)
        skipped += sk
        if vals:
            per_user.append(float(np.mean(vals)))
    if not per_user:
        return float("nan"), skipped
    return float(np.mean(per_user)), skipped
