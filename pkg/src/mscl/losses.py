"""Ranking losses with hand-derived gradients.

Every loss returns a :class:`LossOutput` holding its value and the gradient
with respect to the *final* embeddings of the entities the batch touches.
Losses are averaged over batch rows; the multi-path losses sum their
per-path averages.

Contrastive losses score pairs by cosine similarity and take the other rows'
positives of the same path as negatives. BPR scores by inner product.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .dataset import InteractionDataset, TrainingBatch
from .errors import ConfigError, DegenerateVectorError

logger = logging.getLogger(__name__)

KINDS = ("bpr", "cl", "icl", "mcl", "mscl", "msbpr")
NORM_FLOOR = 1e-12

# Multiplies the gradient of the positive-similarity term only (never the
# value). Stays 1.0 outside tests that check the gradient checker itself.
_POSITIVE_GRAD_SCALE = 1.0


@dataclass(frozen=True)
class LossConfig:
    kind: str = "mscl"
    temperature: float = 0.2
    positive_weight: float = 0.5
    num_positives: int = 5
    filter_true_positives: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"loss kind must be one of {KINDS}, got {self.kind!r}")
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if not 0.0 <= self.positive_weight <= 1.0:
            raise ConfigError(f"positive_weight must lie in [0, 1], got {self.positive_weight}")
        if self.num_positives < 1:
            raise ConfigError(f"num_positives must be >= 1, got {self.num_positives}")

    @property
    def paths(self) -> int:
        """Number of positive columns the loss consumes."""
        return self.num_positives if self.kind in ("mcl", "mscl", "msbpr") else 1

    @property
    def needs_negatives(self) -> bool:
        return self.kind in ("bpr", "msbpr")


@dataclass
class LossOutput:
    """Loss value plus row-sparse gradients.

    ``user_grads[j]`` is the gradient for user ``user_ids[j]`` (ids unique,
    ascending); likewise for items.
    """

    value: float
    user_ids: np.ndarray
    user_grads: np.ndarray
    item_ids: np.ndarray
    item_grads: np.ndarray
    skipped_rows: int = 0

    @classmethod
    def empty(cls, d: int) -> "LossOutput":
        z = np.empty(0, dtype=np.int64)
        return cls(0.0, z, np.zeros((0, d)), z.copy(), np.zeros((0, d)))

    @property
    def grads(self) -> dict:
        """``{("user" | "item", id): gradient}`` view."""
        out = {("user", int(u)): g for u, g in zip(self.user_ids, self.user_grads)}
        out.update({("item", int(i)): g for i, g in zip(self.item_ids, self.item_grads)})
        return out

    def dense(self, num_users: int, num_items: int):
        d = self.user_grads.shape[1]
        gu = np.zeros((num_users, d))
        gi = np.zeros((num_items, d))
        gu[self.user_ids] = self.user_grads
        gi[self.item_ids] = self.item_grads
        return gu, gi

    def __add__(self, other: "LossOutput") -> "LossOutput":
        uid, ug = _accumulate(np.concatenate([self.user_ids, other.user_ids]),
                              np.vstack([self.user_grads, other.user_grads]))
        iid, ig = _accumulate(np.concatenate([self.item_ids, other.item_ids]),
                              np.vstack([self.item_grads, other.item_grads]))
        return LossOutput(self.value + other.value, uid, ug, iid, ig,
                          self.skipped_rows + other.skipped_rows)


def _accumulate(ids, rows):
    """Sum gradient rows that share an id; ids come back unique and ascending."""
    ids = np.asarray(ids, dtype=np.int64)
    order = np.argsort(ids, kind="stable")
    ids = ids[order]
    if len(ids) == 0:
        return ids, np.zeros((0, rows.shape[1]))
    starts = np.flatnonzero(np.concatenate([[True], ids[1:] != ids[:-1]]))
    return ids[starts], np.add.reduceat(rows[order], starts, axis=0)


def _normalise_rows(x, kind, ids):
    norms = np.linalg.norm(x, axis=1)
    bad = np.flatnonzero(norms < NORM_FLOOR)
    if len(bad):
        raise DegenerateVectorError(
            f"{kind} {int(ids[bad[0]])} has embedding norm {norms[bad[0]]:.3g} < {NORM_FLOOR}"
        )
    return x / norms[:, None], norms


def _unnormalise_grad(g_hat, x_hat, norms):
    # d(x/|x|)^T g = (g - (g.x_hat) x_hat) / |x|
    return (g_hat - np.sum(g_hat * x_hat, axis=1, keepdims=True) * x_hat) / norms[:, None]


def cosine_sim(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < NORM_FLOOR or nb < NORM_FLOOR:
        raise DegenerateVectorError(f"cosine of a vector with norm below {NORM_FLOOR}")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def _sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -x))


def _softplus_neg(x):
    """``-log sigmoid(x)`` without overflow."""
    return np.logaddexp(0.0, -x)


# ----------------------------------------------------------------------------
# in-batch negatives


def _negative_mask(users, column, dataset, filter_positives):
    """Unique items of the column and the ``N x T`` negative-candidate mask.

    Row ``n`` may use unique item ``t`` if some other row carries it and, when
    filtering, ``t`` is not a train positive of ``users[n]``.
    """
    uniq, inv = np.unique(column, return_inverse=True)
    inv = inv.ravel()
    counts = np.bincount(inv, minlength=len(uniq))
    others = np.broadcast_to(counts, (len(column), len(uniq))).copy()
    others[np.arange(len(column)), inv] -= 1
    mask = others > 0
    if filter_positives and dataset is not None:
        # walk each batch user's CSR row; items outside the column are ignored
        csr = dataset.train_matrix
        users = np.asarray(users, dtype=np.int64)
        starts, ends = csr.indptr[users], csr.indptr[users + 1]
        lengths = ends - starts
        row_of = np.repeat(np.arange(len(users)), lengths)
        offsets = np.arange(lengths.sum()) - np.repeat(np.cumsum(lengths) - lengths, lengths)
        column_of = np.full(dataset.num_items, -1, dtype=np.int64)
        column_of[uniq] = np.arange(len(uniq))
        cols = column_of[csr.indices[np.repeat(starts, lengths) + offsets]]
        hit = cols >= 0
        mask[row_of[hit], cols[hit]] = False
    return uniq, inv, mask


def in_batch_negatives(batch: TrainingBatch, path_index: int, row: int,
                       dataset: Optional[InteractionDataset] = None,
                       filter_positives: bool = True) -> set[int]:
    """Negative items seen by ``row`` on path ``path_index``."""
    uniq, _, mask = _negative_mask(batch.users, batch.positives[:, path_index],
                                   dataset, filter_positives)
    return {int(i) for i in uniq[mask[row]]}


# ----------------------------------------------------------------------------
# contrastive family


def _path_mask(batch, m, dataset, filter_positives):
    """``_negative_mask`` for column ``m``, memoised on the batch (it ignores embeddings)."""
    filtering = filter_positives and dataset is not None
    key = (m, filtering)
    hit = batch._cache.get(key)
    if hit is None or (filtering and hit[0] is not dataset):
        hit = (dataset, _negative_mask(batch.users, batch.positives[:, m], dataset, filtering))
        batch._cache[key] = hit
    return hit[1]


def _contrastive_path(eu_hat, eu_norm, uniq, inv, mask, final_item, tau, w_pos, w_neg, scale):
    """One path of the weighted contrastive loss, already multiplied by ``scale``."""
    eq_hat, eq_norm = _normalise_rows(final_item[uniq], "item", uniq)

    rows = np.arange(len(inv))
    sim = eu_hat @ eq_hat.T
    logits = np.where(mask, sim / tau, -np.inf)
    valid = mask.any(axis=1)
    skipped = int(len(inv) - valid.sum())

    top = np.max(logits[valid], axis=1, keepdims=True)
    shifted = np.exp(logits[valid] - top)
    denom = shifted.sum(axis=1, keepdims=True)
    lse = top[:, 0] + np.log(denom[:, 0])
    pos = sim[rows[valid], inv[valid]]
    value = scale * float(np.sum(-w_pos * pos / tau + w_neg * lse))

    dsim = np.zeros_like(sim)
    dsim[valid] = scale * w_neg * (shifted / denom) / tau
    dsim[rows[valid], inv[valid]] -= scale * _POSITIVE_GRAD_SCALE * w_pos / tau

    g_user = dsim @ eq_hat
    g_item = _unnormalise_grad(dsim.T @ eu_hat, eq_hat, eq_norm)
    return value, g_user, uniq, g_item, skipped


def _contrastive(batch, final_user, final_item, tau, w_pos, w_neg, paths, dataset,
                 filter_positives):
    if not tau > 0:
        raise ConfigError(f"temperature must be > 0, got {tau}")
    if paths > batch.num_positives:
        raise ConfigError(f"loss needs {paths} positive columns, batch has {batch.num_positives}")
    final_user = np.asarray(final_user, dtype=np.float64)
    final_item = np.asarray(final_item, dtype=np.float64)
    scale = 1.0 / batch.size
    eu_hat, eu_norm = _normalise_rows(final_user[batch.users], "user", batch.users)
    value, skipped = 0.0, 0
    g_user = np.zeros_like(eu_hat)
    item_ids, item_rows = [], []
    for m in range(paths):
        uniq, inv, mask = _path_mask(batch, m, dataset, filter_positives)
        v, gu, iid, gi, sk = _contrastive_path(eu_hat, eu_norm, uniq, inv, mask, final_item,
                                               tau, w_pos, w_neg, scale)
        value += v
        skipped += sk
        g_user += gu
        item_ids.append(iid)
        item_rows.append(gi)
    if skipped:
        logger.debug("%d batch rows had no in-batch negative and were skipped", skipped)
    # the user-side projection is linear, so it is applied once to the path sum
    uid, ug = _accumulate(batch.users, _unnormalise_grad(g_user, eu_hat, eu_norm))
    iid, ig = _accumulate(np.concatenate(item_ids), np.vstack(item_rows))
    return LossOutput(value, uid, ug, iid, ig, skipped)


def _check_alpha(alpha):
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"positive_weight must lie in [0, 1], got {alpha}")


def loss_cl(batch, final_user, final_item, tau, dataset=None, filter_positives=True):
    """Contrastive loss on path 0: positive cosine against log-sum-exp of in-batch negatives."""
    return _contrastive(batch, final_user, final_item, tau, 1.0, 1.0, 1, dataset, filter_positives)


def loss_icl(batch, final_user, final_item, tau, alpha, dataset=None, filter_positives=True):
    """Contrastive loss with weight ``alpha`` on the positive term and ``1 - alpha`` on the negatives."""
    _check_alpha(alpha)
    return _contrastive(batch, final_user, final_item, tau, alpha, 1.0 - alpha, 1,
                        dataset, filter_positives)


def loss_mcl(batch, final_user, final_item, tau, dataset=None, filter_positives=True):
    return _contrastive(batch, final_user, final_item, tau, 1.0, 1.0, batch.num_positives,
                        dataset, filter_positives)


def loss_mscl(batch, final_user, final_item, tau, alpha, dataset=None, filter_positives=True):
    """Weighted contrastive loss summed over all ``M`` positive columns of the batch."""
    _check_alpha(alpha)
    return _contrastive(batch, final_user, final_item, tau, alpha, 1.0 - alpha,
                        batch.num_positives, dataset, filter_positives)


# ----------------------------------------------------------------------------
# pairwise family


def _require_negatives(batch):
    if batch.negatives is None:
        raise ConfigError("this loss needs a batch sampled with negatives")


def loss_bpr(batch, final_user, final_item):
    """Mean ``-log sigmoid(s_ui - s_uj)`` with inner-product scores, path 0 only."""
    _require_negatives(batch)
    final_user = np.asarray(final_user, dtype=np.float64)
    final_item = np.asarray(final_item, dtype=np.float64)
    users, pos, neg = batch.users, batch.positives[:, 0], batch.negatives
    eu, ei, ej = final_user[users], final_item[pos], final_item[neg]
    diff = np.sum(eu * ei, axis=1) - np.sum(eu * ej, axis=1)
    n = batch.size
    value = float(np.sum(_softplus_neg(diff))) / n
    g = (-_sigmoid(-diff) / n)[:, None]
    uid, ug = _accumulate(users, g * (ei - ej))
    g_pos = g * eu * _POSITIVE_GRAD_SCALE
    iid, ig = _accumulate(np.concatenate([pos, neg]), np.vstack([g_pos, -g * eu]))
    return LossOutput(value, uid, ug, iid, ig)


def loss_msbpr(batch, final_user, final_item, tau, alpha):
    """BPR over cosine scores: ``-log sigmoid((alpha f+ - (1-alpha) f-) / tau)`` per path."""
    _require_negatives(batch)
    _check_alpha(alpha)
    if not tau > 0:
        raise ConfigError(f"temperature must be > 0, got {tau}")
    final_user = np.asarray(final_user, dtype=np.float64)
    final_item = np.asarray(final_item, dtype=np.float64)
    users, neg = batch.users, batch.negatives
    n = batch.size
    eu_hat, eu_norm = _normalise_rows(final_user[users], "user", users)
    en_hat, en_norm = _normalise_rows(final_item[neg], "item", neg)
    f_neg = np.sum(eu_hat * en_hat, axis=1)

    value = 0.0
    g_user_hat = np.zeros_like(eu_hat)
    g_neg_hat = np.zeros_like(en_hat)
    item_ids, item_rows = [], []
    for m in range(batch.num_positives):
        pos = batch.positives[:, m]
        ep_hat, ep_norm = _normalise_rows(final_item[pos], "item", pos)
        f_pos = np.sum(eu_hat * ep_hat, axis=1)
        x = (alpha * f_pos - (1.0 - alpha) * f_neg) / tau
        value += float(np.sum(_softplus_neg(x))) / n
        dx = -_sigmoid(-x) / n
        d_pos = (dx * alpha / tau * _POSITIVE_GRAD_SCALE)[:, None]
        d_neg = (-dx * (1.0 - alpha) / tau)[:, None]
        g_user_hat += d_pos * ep_hat + d_neg * en_hat
        g_neg_hat += d_neg * eu_hat
        item_ids.append(pos)
        item_rows.append(_unnormalise_grad(d_pos * eu_hat, ep_hat, ep_norm))
    item_ids.append(neg)
    item_rows.append(_unnormalise_grad(g_neg_hat, en_hat, en_norm))
    uid, ug = _accumulate(users, _unnormalise_grad(g_user_hat, eu_hat, eu_norm))
    iid, ig = _accumulate(np.concatenate(item_ids), np.vstack(item_rows))
    return LossOutput(value, uid, ug, iid, ig)


# ----------------------------------------------------------------------------


def l2_regularization(base_user, base_item, batch: TrainingBatch, lam: float) -> LossOutput:
    """``lam / (2N)`` times the squared norms of every base row the batch references.

    Rows count with multiplicity: a user appearing in three rows contributes
    three times, as does every positive column entry and every negative.
    """
    if lam < 0:
        raise ConfigError(f"l2 lambda must be >= 0, got {lam}")
    n = batch.size
    items = batch.positives.ravel()
    if batch.negatives is not None:
        items = np.concatenate([items, batch.negatives])
    eu = np.asarray(base_user, dtype=np.float64)[batch.users]
    ei = np.asarray(base_item, dtype=np.float64)[items]
    value = lam / (2.0 * n) * float(np.sum(eu * eu) + np.sum(ei * ei))
    uid, ug = _accumulate(batch.users, lam / n * eu)
    iid, ig = _accumulate(items, lam / n * ei)
    return LossOutput(value, uid, ug, iid, ig)


def compute_loss(config: LossConfig, batch: TrainingBatch, final_user, final_item,
                 dataset: Optional[InteractionDataset] = None) -> LossOutput:
    """Dispatch on ``config.kind``; ``dataset`` enables true-positive filtering."""
    tau, alpha = config.temperature, config.positive_weight
    filt = config.filter_true_positives
    if config.kind == "bpr":
        return loss_bpr(batch, final_user, final_item)
    if config.kind == "cl":
        return loss_cl(batch, final_user, final_item, tau, dataset, filt)
    if config.kind == "icl":
        return loss_icl(batch, final_user, final_item, tau, alpha, dataset, filt)
    sub = batch
    if batch.num_positives != config.paths:
        sub = TrainingBatch(batch.users, batch.positives[:, :config.paths], batch.negatives)
        # column m is unchanged, so cached per-column masks stay valid
        object.__setattr__(sub, "_cache", batch._cache)
    if config.kind == "mcl":
        return loss_mcl(sub, final_user, final_item, tau, dataset, filt)
    if config.kind == "mscl":
        return loss_mscl(sub, final_user, final_item, tau, alpha, dataset, filt)
    return loss_msbpr(sub, final_user, final_item, tau, alpha)
