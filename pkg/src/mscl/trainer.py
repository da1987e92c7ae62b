"""Epoch loop: sample, encode, loss + L2, adjoint gradients, sparse Adam."""
from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .dataset import InteractionDataset, epoch_batches
from .encoder import EmbeddingTable, EncoderConfig, backprop_encoder, encode, init_embeddings
from .errors import ConfigError, DegenerateVectorError, TrainingError
from .graph import NormalizedBipartiteGraph
from .losses import LossConfig, compute_loss, l2_regularization
from .metrics import evaluate

logger = logging.getLogger(__name__)

HISTORY_HEADER = ("epoch", "loss", "recall", "ndcg", "seconds")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    l2_lambda: float = 1e-4
    batch_size: int = 2048
    epochs: int = 100
    eval_every: int = 5
    seed: int = 2022
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    early_stop_patience: Optional[int] = None
    embedding_dim: int = 64
    init_scheme: str = "normal"
    init_scale: float = 0.1
    k: int = 20
    positive_replacement: bool = False

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if self.l2_lambda < 0:
            raise ConfigError("l2_lambda must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")
        for name in ("adam_beta1", "adam_beta2"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must lie in (0, 1)")
        if not self.adam_eps > 0:
            raise ConfigError("adam_eps must be > 0")
        if self.early_stop_patience is not None and self.early_stop_patience < 1:
            raise ConfigError("early_stop_patience must be >= 1 or unset")
        if self.embedding_dim < 1:
            raise ConfigError("embedding_dim must be >= 1")
        if self.init_scheme not in ("normal", "uniform"):
            raise ConfigError("init_scheme must be 'normal' or 'uniform'")
        if self.init_scale < 0:
            raise ConfigError("init_scale must be >= 0")
        if self.k < 1:
            raise ConfigError("k must be >= 1")


@dataclass
class AdamState:
    first_moment: EmbeddingTable
    second_moment: EmbeddingTable
    step_count: int = 0

    @classmethod
    def zeros_like(cls, params: EmbeddingTable) -> "AdamState":
        return cls(params.zeros_like(), params.zeros_like(), 0)


def adam_step(params: EmbeddingTable, grads: EmbeddingTable, state: AdamState,
              config: TrainConfig) -> None:
    """In-place bias-corrected Adam on rows whose gradient is nonzero.

    Rows with an all-zero gradient keep their parameters and both moments.
    The step counter is global, so bias correction follows the number of
    updates rather than per-row visits.
    """
    for kind, g in (("user", grads.user_emb), ("item", grads.item_emb)):
        bad = np.flatnonzero(~np.all(np.isfinite(g), axis=1))
        if len(bad):
            raise TrainingError(f"non-finite gradient for {kind} {int(bad[0])}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = config.adam_beta1, config.adam_beta2
    step = config.learning_rate / (1.0 - b1 ** t)
    corr2 = 1.0 - b2 ** t
    for p, g, m, v in (
        (params.user_emb, grads.user_emb, state.first_moment.user_emb, state.second_moment.user_emb),
        (params.item_emb, grads.item_emb, state.first_moment.item_emb, state.second_moment.item_emb),
    ):
        rows = np.flatnonzero(np.any(g != 0.0, axis=1))
        if not len(rows):
            continue
        gr = g[rows]
        m[rows] = b1 * m[rows] + (1.0 - b1) * gr
        v[rows] = b2 * v[rows] + (1.0 - b2) * gr * gr
        p[rows] -= step * m[rows] / (np.sqrt(v[rows] / corr2) + config.adam_eps)


@dataclass(frozen=True)
class EvalRecord:
    epoch: int
    loss: float
    recall: float
    ndcg: float
    seconds: float


@dataclass
class TrainHistory:
    records: list[EvalRecord] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)
    skipped_rows: int = 0

    def append(self, record: EvalRecord) -> None:
        if self.records and record.epoch <= self.records[-1].epoch:
            raise ValueError("history epochs must be strictly increasing")
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def recalls(self) -> list[float]:
        return [r.recall for r in self.records]

    def best(self) -> EvalRecord:
        return max(self.records, key=lambda r: r.recall)

    def to_csv(self, include_timing: bool = True) -> str:
        """CSV with header ``epoch,loss,recall,ndcg,seconds``.

        With ``include_timing`` false the seconds column is written as 0 so the
        file depends only on the seed.
        """
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(HISTORY_HEADER)
        for r in self.records:
            secs = r.seconds if include_timing else 0.0
            writer.writerow([r.epoch, repr(r.loss), repr(r.recall), repr(r.ndcg), repr(secs)])
        return buf.getvalue()


def read_history_csv(text: str) -> list[dict]:
    rows = list(csv.DictReader(io.StringIO(text)))
    return [{"epoch": int(r["epoch"]), **{k: float(r[k]) for k in HISTORY_HEADER[1:]}} for r in rows]


def epochs_to_fraction(history: TrainHistory, fraction: float) -> int:
    """First evaluated epoch whose recall reaches ``fraction`` of the best recall."""
    if not len(history):
        raise ValueError("empty history")
    target = fraction * max(history.recalls)
    for r in history.records:
        if r.recall >= target:
            return r.epoch
    return history.records[-1].epoch


def objective(base: EmbeddingTable, batch, graph, encoder_config, loss_config, l2_lambda,
              dataset=None):
    """Loss + L2 on one batch and its gradient with respect to the base table."""
    final_user, final_item = encode(base, graph, encoder_config)
    out = compute_loss(loss_config, batch, final_user, final_item, dataset)
    gu, gi = out.dense(base.num_users, base.num_items)
    grad = backprop_encoder(gu, gi, graph, encoder_config)
    reg = l2_regularization(base.user_emb, base.item_emb, batch, l2_lambda)
    ru, ri = reg.dense(base.num_users, base.num_items)
    grad.user_emb += ru
    grad.item_emb += ri
    return out.value + reg.value, grad, out


def train(dataset: InteractionDataset, graph: NormalizedBipartiteGraph,
          encoder_config: EncoderConfig, loss_config: LossConfig,
          train_config: TrainConfig, init: Optional[EmbeddingTable] = None,
          callback=None):
    """Run up to ``train_config.epochs`` epochs; returns ``(base_embeddings, history)``.

    Evaluates every ``eval_every`` epochs and after the last epoch. With
    ``early_stop_patience`` set, stops once that many consecutive evaluations
    fail to beat the best recall. The returned parameters are the last ones,
    so the last history row describes them.
    """
    rng = np.random.default_rng(train_config.seed)
    if init is None:
        params = init_embeddings(dataset, train_config.embedding_dim, train_config.init_scheme,
                                 train_config.init_scale, rng)
    else:
        params = init.copy()
    history = TrainHistory()
    if train_config.epochs == 0:
        return params, history
    state = AdamState.zeros_like(params)
    filter_ds = dataset if loss_config.filter_true_positives else None
    best_recall, stale = -1.0, 0
    for epoch in range(1, train_config.epochs + 1):
        start = time.perf_counter()
        total, steps = 0.0, 0
        batches = epoch_batches(dataset, train_config.batch_size, loss_config.paths,
                                loss_config.needs_negatives, rng,
                                train_config.positive_replacement)
        for step, batch in enumerate(batches):
            try:
                value, grad, out = objective(params, batch, graph, encoder_config, loss_config,
                                             train_config.l2_lambda, filter_ds)
            except DegenerateVectorError as exc:
                raise TrainingError(f"epoch {epoch} step {step}: {exc}") from exc
            if not np.isfinite(value):
                raise TrainingError(f"epoch {epoch} step {step}: loss is {value}")
            history.skipped_rows += out.skipped_rows
            try:
                adam_step(params, grad, state, train_config)
            except TrainingError as exc:
                raise TrainingError(f"epoch {epoch} step {step}: {exc}") from exc
            total += value
            steps += 1
        seconds = time.perf_counter() - start
        history.epoch_seconds.append(seconds)
        last = epoch == train_config.epochs
        if epoch % train_config.eval_every == 0 or last:
            fu, fi = encode(params, graph, encoder_config)
            res = evaluate(dataset, fu, fi, train_config.k)
            history.append(EvalRecord(epoch, total / max(steps, 1), res.recall, res.ndcg, seconds))
            logger.info("epoch %d loss %.5f recall@%d %.5f ndcg %.5f", epoch,
                        total / max(steps, 1), train_config.k, res.recall, res.ndcg)
            if callback is not None:
                callback(epoch, params, history)
            if res.recall > best_recall:
                best_recall, stale = res.recall, 0
            else:
                stale += 1
                if train_config.early_stop_patience is not None and stale >= train_config.early_stop_patience:
                    logger.info("early stop at epoch %d", epoch)
                    break
    if history.skipped_rows:
        logger.warning("%d batch rows had no in-batch negative and were skipped",
                       history.skipped_rows)
    return params, history
