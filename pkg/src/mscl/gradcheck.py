"""Central finite-difference checks of the analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .dataset import InteractionDataset, sample_batch
from .encoder import EmbeddingTable, EncoderConfig, encode
from .graph import build_normalized_adjacency
from .losses import LossConfig, compute_loss
from .trainer import objective

FD_STEP = 1e-6


def numeric_gradient(fn: Callable[[], float], arrays, h: float = FD_STEP):
    """Central differences of ``fn()`` with respect to every entry of ``arrays`` (perturbed in place)."""
    out = []
    for arr in arrays:
        grad = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + h
            up = fn()
            arr[idx] = orig - h
            down = fn()
            arr[idx] = orig
            grad[idx] = (up - down) / (2.0 * h)
        out.append(grad)
    return out


def relative_error(analytic, numeric):
    """``max|a - n| / max|n|`` and the flat index of the worst entry."""
    diff = np.abs(analytic - numeric)
    scale = max(float(np.max(np.abs(numeric))), 1e-12)
    worst = int(np.argmax(diff))
    return float(diff.flat[worst]) / scale, worst


@dataclass
class GradcheckReport:
    max_rel_error: float
    worst: Optional[str]
    trials: int


def random_instance(rng: np.random.Generator, max_users: int = 6, max_items: int = 10):
    """Small dataset with every user and item holding at least one interaction."""
    n_users = int(rng.integers(3, max_users + 1))
    n_items = int(rng.integers(4, max_items + 1))
    train = []
    for u in range(n_users):
        k = int(rng.integers(1, max(2, n_items // 2)))
        train.append(np.sort(rng.choice(n_items, size=k, replace=False)))
    covered = set(np.concatenate(train).tolist())
    for i in range(n_items):
        if i not in covered:
            u = int(rng.integers(n_users))
            train[u] = np.union1d(train[u], [i])
    return InteractionDataset.from_lists(train, [[] for _ in range(n_users)],
                                         num_users=n_users, num_items=n_items)


def run_gradcheck(loss_config: LossConfig, encoder_config: EncoderConfig, trials: int = 100,
                  seed: int = 0, l2_lambda: float = 1e-3, max_batch: int = 16,
                  max_dim: int = 8) -> GradcheckReport:
    """Compare analytic and finite-difference gradients on random small instances.

    Each trial checks the loss against its final-embedding inputs and then the
    whole objective (loss + L2) through ``encoder_config`` against the base
    table. The report keeps the worst relative error over both.
    """
    rng = np.random.default_rng(seed)
    worst_err, worst_where = 0.0, None
    for trial in range(trials):
        ds = random_instance(rng)
        graph = build_normalized_adjacency(ds)
        d = int(rng.integers(2, max_dim + 1))
        n = int(rng.integers(2, max_batch + 1))
        batch = sample_batch(ds, n, loss_config.paths, loss_config.needs_negatives, rng,
                             replace=True)
        base = EmbeddingTable(rng.normal(size=(ds.num_users, d)), rng.normal(size=(ds.num_items, d)))

        fu, fi = encode(base, graph, encoder_config)
        filt = ds if loss_config.filter_true_positives else None
        out = compute_loss(loss_config, batch, fu, fi, filt)
        au, ai = out.dense(ds.num_users, ds.num_items)
        nu, ni = numeric_gradient(lambda: compute_loss(loss_config, batch, fu, fi, filt).value,
                                  [fu, fi])
        for part, a, num in (("final user", au, nu), ("final item", ai, ni)):
            err, idx = relative_error(a, num)
            if err > worst_err:
                worst_err = err
                worst_where = f"trial {trial} {part} {tuple(int(x) for x in np.unravel_index(idx, a.shape))}"

        _, grad, _ = objective(base, batch, graph, encoder_config, loss_config, l2_lambda, filt)
        fn = lambda: objective(base, batch, graph, encoder_config, loss_config, l2_lambda, filt)[0]
        nu, ni = numeric_gradient(fn, [base.user_emb, base.item_emb])
        for part, a, num in (("base user", grad.user_emb, nu), ("base item", grad.item_emb, ni)):
            err, idx = relative_error(a, num)
            if err > worst_err:
                worst_err = err
                worst_where = f"trial {trial} {part} {tuple(int(x) for x in np.unravel_index(idx, a.shape))}"
    return GradcheckReport(worst_err, worst_where, trials)
