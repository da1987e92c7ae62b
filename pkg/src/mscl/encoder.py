"""Base embeddings, the three linear encoders and their adjoint.

All three encoders are linear in the base table, and the stacked propagation
operator is symmetric, so the backward pass reuses the forward propagation.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .dataset import InteractionDataset
from .errors import ConfigError, ValidationError
from .graph import NormalizedBipartiteGraph, propagate

MODES = ("mf", "lightgcn_mean", "lightgcn_single")
CHECKPOINT_MAGIC = b"MSCLEMB1"


@dataclass
class EmbeddingTable:
    user_emb: np.ndarray
    item_emb: np.ndarray

    def __post_init__(self):
        self.user_emb = np.asarray(self.user_emb, dtype=np.float64)
        self.item_emb = np.asarray(self.item_emb, dtype=np.float64)
        if self.user_emb.ndim != 2 or self.item_emb.ndim != 2:
            raise ValidationError("embedding tables must be 2-d")
        if self.user_emb.shape[1] != self.item_emb.shape[1]:
            raise ValidationError("user and item embeddings must share a width")

    @property
    def d(self) -> int:
        return self.user_emb.shape[1]

    @property
    def num_users(self) -> int:
        return self.user_emb.shape[0]

    @property
    def num_items(self) -> int:
        return self.item_emb.shape[0]

    def copy(self) -> "EmbeddingTable":
        return EmbeddingTable(self.user_emb.copy(), self.item_emb.copy())

    def stacked(self) -> np.ndarray:
        return np.vstack([self.user_emb, self.item_emb])

    @classmethod
    def from_stacked(cls, table, num_users: int) -> "EmbeddingTable":
        return cls(table[:num_users], table[num_users:])

    def zeros_like(self) -> "EmbeddingTable":
        return EmbeddingTable(np.zeros_like(self.user_emb), np.zeros_like(self.item_emb))

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.user_emb)) and np.all(np.isfinite(self.item_emb)))


@dataclass(frozen=True)
class EncoderConfig:
    """``layer_weights`` defaults to ``1/(K+1)`` per layer in mean mode.

    ``single_layer`` picks the propagated layer used by ``lightgcn_single``;
    ``None`` means the last one (``K``).
    """

    mode: str = "lightgcn_mean"
    num_layers: int = 3
    layer_weights: Optional[Sequence[float]] = None
    single_layer: Optional[int] = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"encoder mode must be one of {MODES}, got {self.mode!r}")
        if self.num_layers < 0:
            raise ConfigError("num_layers must be >= 0")
        if self.layer_weights is not None:
            object.__setattr__(self, "layer_weights", tuple(float(w) for w in self.layer_weights))
            if self.mode == "lightgcn_mean":
                if len(self.layer_weights) != self.num_layers + 1:
                    raise ConfigError(
                        f"layer_weights needs {self.num_layers + 1} entries, got {len(self.layer_weights)}"
                    )
                if abs(sum(self.layer_weights) - 1.0) > 1e-9:
                    raise ConfigError("layer_weights must sum to 1")
        if self.single_layer is not None and not 0 <= self.single_layer <= self.num_layers:
            raise ConfigError("single_layer must lie in [0, num_layers]")

    def weights(self) -> tuple[float, ...]:
        """Per-layer coefficients ``alpha_0..alpha_K`` for the active mode."""
        if self.mode == "mf":
            return (1.0,)
        if self.mode == "lightgcn_single":
            k = self.num_layers if self.single_layer is None else self.single_layer
            return tuple(1.0 if j == k else 0.0 for j in range(k + 1))
        if self.layer_weights is not None:
            return self.layer_weights
        return (1.0 / (self.num_layers + 1),) * (self.num_layers + 1)


def init_embeddings(dataset: InteractionDataset, d: int, scheme: str = "normal",
                    scale: float = 0.1, rng: Optional[np.random.Generator] = None) -> EmbeddingTable:
    """I.i.d. initial table: ``normal`` uses ``scale`` as the std, ``uniform`` as the half-width."""
    if d < 1:
        raise ConfigError("embedding size must be >= 1")
    if scale < 0:
        raise ConfigError("init scale must be >= 0")
    rng = np.random.default_rng() if rng is None else rng
    shape_u, shape_i = (dataset.num_users, d), (dataset.num_items, d)
    if scheme == "normal":
        return EmbeddingTable(rng.normal(0.0, scale, shape_u), rng.normal(0.0, scale, shape_i))
    if scheme == "uniform":
        return EmbeddingTable(rng.uniform(-scale, scale, shape_u), rng.uniform(-scale, scale, shape_i))
    raise ConfigError(f"unknown init scheme {scheme!r}")


def _check(graph, users, items):
    if users.shape[0] != graph.num_users or items.shape[0] != graph.num_items:
        raise ValidationError(
            f"tables of {users.shape[0]} users / {items.shape[0]} items do not match graph "
            f"({graph.num_users} / {graph.num_items})"
        )


def _layer_sum(users, items, graph, weights):
    out_u = weights[0] * users if weights[0] else np.zeros_like(users)
    out_i = weights[0] * items if weights[0] else np.zeros_like(items)
    cur_u, cur_i = users, items
    for w in weights[1:]:
        cur_u, cur_i = propagate(graph, cur_u, cur_i)
        if w:
            out_u = out_u + w * cur_u
            out_i = out_i + w * cur_i
    return out_u, out_i


def encode(base: EmbeddingTable, graph: NormalizedBipartiteGraph, config: EncoderConfig):
    """Final ``(user, item)`` embeddings ``sum_k alpha_k A^k E0``."""
    _check(graph, base.user_emb, base.item_emb)
    if config.mode == "mf":
        return base.user_emb.copy(), base.item_emb.copy()
    return _layer_sum(base.user_emb, base.item_emb, graph, config.weights())


def backprop_encoder(grad_user, grad_item, graph: NormalizedBipartiteGraph,
                     config: EncoderConfig) -> EmbeddingTable:
    """Pull gradients on final embeddings back to the base table (adjoint of :func:`encode`)."""
    grad_user = np.asarray(grad_user, dtype=np.float64)
    grad_item = np.asarray(grad_item, dtype=np.float64)
    _check(graph, grad_user, grad_item)
    if config.mode == "mf":
        return EmbeddingTable(grad_user.copy(), grad_item.copy())
    return EmbeddingTable(*_layer_sum(grad_user, grad_item, graph, config.weights()))


def save_checkpoint(table: EmbeddingTable, path) -> None:
    header = CHECKPOINT_MAGIC + struct.pack("<QQQ", table.num_users, table.num_items, table.d)
    body = np.ascontiguousarray(table.stacked(), dtype="<f8").tobytes()
    Path(path).write_bytes(header + body)


def load_checkpoint(path) -> EmbeddingTable:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValidationError(f"{path}: bad checkpoint magic")
    if len(raw) < 32:
        raise ValidationError(f"{path}: truncated checkpoint header")
    num_users, num_items, d = struct.unpack("<QQQ", raw[8:32])
    expected = 32 + 8 * (num_users + num_items) * d
    if len(raw) != expected:
        raise ValidationError(f"{path}: expected {expected} bytes, found {len(raw)}")
    table = np.frombuffer(raw, dtype="<f8", offset=32).reshape(num_users + num_items, d)
    return EmbeddingTable.from_stacked(table.astype(np.float64), num_users)
