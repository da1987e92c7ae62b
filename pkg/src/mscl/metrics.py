"""Full-ranking Recall@K / NDCG@K evaluation with inner-product scores."""
from __future__ import annotations

import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .dataset import InteractionDataset
from .errors import ValidationError

THREADS_ENV = "MSCL_THREADS"


@dataclass(frozen=True)
class EvalResult:
    recall: float
    ndcg: float
    k: int
    num_users_evaluated: int


def _top_k(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest finite scores; ties go to the smaller index."""
    finite = np.flatnonzero(np.isfinite(scores))
    if k >= len(finite):
        cand = finite
    else:
        kth = np.partition(scores[finite], len(finite) - k)[len(finite) - k]
        cand = finite[scores[finite] >= kth]
    order = np.lexsort((cand, -scores[cand]))
    return cand[order[:k]]


def rank_items(user: int, final_user, final_item, exclude, k: int) -> np.ndarray:
    """Top-``k`` items for ``user`` by ``e_u . e_i``, skipping ``exclude``."""
    if k < 1:
        raise ValidationError("k must be >= 1")
    scores = np.asarray(final_item, dtype=np.float64) @ np.asarray(final_user, dtype=np.float64)[user]
    scores[np.asarray(list(exclude), dtype=np.int64)] = -np.inf
    available = int(np.isfinite(scores).sum())
    if k > available:
        warnings.warn(f"k={k} exceeds the {available} candidate items of user {user}; truncating")
    return _top_k(scores, k)


def recall_at_k(ranked, test_set) -> float:
    test = set(int(i) for i in test_set)
    if not test:
        raise ValidationError("recall is undefined for an empty test set")
    return sum(1 for i in ranked if int(i) in test) / len(test)


def ndcg_at_k(ranked, test_set, k: int) -> float:
    """Binary-relevance NDCG with ideal DCG over ``min(|test|, k)`` slots."""
    test = set(int(i) for i in test_set)
    if not test:
        raise ValidationError("ndcg is undefined for an empty test set")
    dcg = sum(1.0 / math.log2(p + 2) for p, i in enumerate(ranked[:k]) if int(i) in test)
    idcg = sum(1.0 / math.log2(j + 2) for j in range(min(len(test), k)))
    return dcg / idcg


def _score_chunk(users, final_user, final_item, dataset, k, discounts):
    scores = final_user[users] @ final_item.T
    rec = np.zeros(len(users))
    ndcg = np.zeros(len(users))
    for row, u in enumerate(users):
        s = scores[row]
        s[dataset.train_positives[u]] = -np.inf
        top = _top_k(s, k)
        test = dataset.test_positives[u]
        hits = np.isin(top, test)
        rec[row] = hits.sum() / len(test)
        idcg = discounts[:min(len(test), k)].sum()
        ndcg[row] = discounts[:len(top)][hits].sum() / idcg
    return rec, ndcg


def evaluate(dataset: InteractionDataset, final_user, final_item, k: int = 20,
             chunk_size: int = 1024, threads: int | None = None) -> EvalResult:
    """Mean Recall@k and NDCG@k over users with a non-empty test set.

    Chunks may be scored on a thread pool (``MSCL_THREADS``); per-user values
    are reduced in user order either way, so the result does not depend on
    the thread count.
    """
    if k < 1:
        raise ValidationError("k must be >= 1")
    final_user = np.asarray(final_user, dtype=np.float64)
    final_item = np.asarray(final_item, dtype=np.float64)
    if final_user.shape[0] != dataset.num_users or final_item.shape[0] != dataset.num_items:
        raise ValidationError(
            f"embeddings for {final_user.shape[0]} users / {final_item.shape[0]} items do not "
            f"match dataset ({dataset.num_users} / {dataset.num_items})"
        )
    users = np.array([u for u in range(dataset.num_users) if len(dataset.test_positives[u])],
                     dtype=np.int64)
    if len(users) == 0:
        raise ValidationError("no user has test positives")
    if threads is None:
        threads = int(os.environ.get(THREADS_ENV, "1"))
    discounts = 1.0 / np.log2(np.arange(2, k + 2))
    chunks = [users[i:i + chunk_size] for i in range(0, len(users), chunk_size)]
    job = lambda c: _score_chunk(c, final_user, final_item, dataset, k, discounts)
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(job, chunks))
    else:
        parts = [job(c) for c in chunks]
    rec = np.concatenate([p[0] for p in parts])
    ndcg = np.concatenate([p[1] for p in parts])
    return EvalResult(float(np.mean(rec)), float(np.mean(ndcg)), k, len(users))
