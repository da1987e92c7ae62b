"""Implicit-feedback interaction data, batch sampling and a synthetic generator.

Interaction files use the adjacency-list layout of the public LightGCN/SGL
splits: one line per user, ``uid iid1 iid2 ...``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterator, Optional

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, ParseError, SamplingError, ValidationError

# rejection rounds before giving up on a negative draw
MAX_NEGATIVE_ROUNDS = 1000
MAX_SYNTH_RETRIES = 100


@dataclass(frozen=True, eq=False)
class InteractionDataset:
    """Users, items and their train/test positive sets.

    ``train_positives[u]`` and ``test_positives[u]`` are sorted, duplicate-free
    int64 arrays. Construct through :meth:`from_lists` or :func:`load_interactions`
    so the invariants are checked.
    """

    num_users: int
    num_items: int
    train_positives: list[np.ndarray]
    test_positives: list[np.ndarray]

    @classmethod
    def from_lists(cls, train, test, num_users=None, num_items=None) -> "InteractionDataset":
        """Build from per-user item lists (or ``{user: items}`` mappings)."""
        train = _normalise(train)
        test = _normalise(test)
        max_user = max([*train.keys(), *test.keys(), -1])
        max_item = max(
            [int(np.max(v)) for v in [*train.values(), *test.values()] if len(v)] + [-1]
        )
        n_users = max_user + 1 if num_users is None else int(num_users)
        n_items = max_item + 1 if num_items is None else int(num_items)
        if max_user >= n_users:
            raise ValidationError(f"user id {max_user} outside universe of {n_users} users")
        if max_item >= n_items:
            raise ValidationError(f"item id {max_item} outside universe of {n_items} items")
        tr = [np.empty(0, dtype=np.int64)] * n_users
        te = [np.empty(0, dtype=np.int64)] * n_users
        for u, items in train.items():
            tr[u] = np.unique(items)
        for u, items in test.items():
            te[u] = np.unique(items)
        ds = cls(n_users, n_items, tr, te)
        ds.validate()
        return ds

    def validate(self) -> None:
        if len(self.train_positives) != self.num_users or len(self.test_positives) != self.num_users:
            raise ValidationError("per-user positive lists must have num_users entries")
        for split, table in (("train", self.train_positives), ("test", self.test_positives)):
            for u, items in enumerate(table):
                if len(items) and (items[0] < 0 or items[-1] >= self.num_items):
                    raise ValidationError(
                        f"{split} item id out of range [0, {self.num_items}) for user {u}"
                    )
                if len(items) > 1 and np.any(np.diff(items) <= 0):
                    raise ValidationError(f"{split} positives of user {u} are not a sorted set")
        for u in range(self.num_users):
            overlap = np.intersect1d(self.train_positives[u], self.test_positives[u])
            if len(overlap):
                raise ValidationError(
                    f"user {u} has items {overlap.tolist()} in both train and test"
                )

    @cached_property
    def num_train_interactions(self) -> int:
        return int(sum(len(p) for p in self.train_positives))

    @cached_property
    def train_degrees(self) -> np.ndarray:
        return np.array([len(p) for p in self.train_positives], dtype=np.int64)

    @cached_property
    def untrainable_users(self) -> np.ndarray:
        """Users with an empty train set; never used as batch anchors."""
        return np.flatnonzero(self.train_degrees == 0)

    @cached_property
    def train_matrix(self) -> sp.csr_matrix:
        """Binary user x item CSR matrix of train interactions (sorted indices)."""
        indptr = np.concatenate([[0], np.cumsum(self.train_degrees)])
        if self.num_train_interactions:
            indices = np.concatenate(self.train_positives)
        else:
            indices = np.empty(0, dtype=np.int64)
        data = np.ones(len(indices), dtype=np.float64)
        return sp.csr_matrix((data, indices, indptr), shape=(self.num_users, self.num_items))

    @cached_property
    def interactions(self) -> tuple[np.ndarray, np.ndarray]:
        """All train (user, item) pairs in user-major order."""
        users = np.repeat(np.arange(self.num_users, dtype=np.int64), self.train_degrees)
        return users, self.train_matrix.indices.astype(np.int64)

    @cached_property
    def pair_keys(self) -> np.ndarray:
        users, items = self.interactions
        return users * self.num_items + items  # sorted: user-major, items ascending

    def is_train_positive(self, users, items) -> np.ndarray:
        """Vectorised membership test ``items[n] in train_positives[users[n]]``."""
        keys = np.asarray(users, dtype=np.int64) * self.num_items + np.asarray(items, dtype=np.int64)
        table = self.pair_keys
        pos = np.searchsorted(table, keys)
        hit = pos < len(table)
        hit[hit] = table[pos[hit]] == keys[hit]
        return hit


def _normalise(table) -> dict[int, np.ndarray]:
    if isinstance(table, dict):
        pairs = table.items()
    else:
        pairs = enumerate(table)
    return {int(u): np.asarray(list(items), dtype=np.int64) for u, items in pairs}


def _read_adjacency(path) -> dict[int, list[int]]:
    rows: dict[int, list[int]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            tokens = line.split()
            if not tokens:
                continue
            values = []
            for tok in tokens:
                try:
                    values.append(int(tok, 10))
                except ValueError:
                    raise ParseError(path, lineno, f"not an integer: {tok!r}") from None
            if min(values) < 0:
                raise ParseError(path, lineno, "ids must be non-negative")
            rows.setdefault(values[0], []).extend(values[1:])
    return rows


def load_interactions(train_path, test_path, num_users: Optional[int] = None,
                      num_items: Optional[int] = None) -> InteractionDataset:
    """Read a train/test pair of adjacency-list files.

    Duplicate interactions collapse. User and item counts default to the
    largest id seen plus one; explicit counts turn out-of-range ids into a
    :class:`ValidationError`.
    """
    train = _read_adjacency(train_path)
    test = _read_adjacency(test_path)
    return InteractionDataset.from_lists(train, test, num_users=num_users, num_items=num_items)


def write_interactions(dataset: InteractionDataset, train_path, test_path) -> None:
    for path, table in ((train_path, dataset.train_positives), (test_path, dataset.test_positives)):
        with open(path, "w", encoding="utf-8") as fh:
            for u, items in enumerate(table):
                fh.write(" ".join(str(x) for x in [u, *items.tolist()]) + "\n")


@dataclass(frozen=True, eq=False)
class TrainingBatch:
    """``positives[:, m]`` holds the path-``m`` positive item of each row.

    Batches are treated as immutable: losses cache per-path negative masks in
    ``_cache``, so the arrays must not be edited in place after construction.
    """

    users: np.ndarray
    positives: np.ndarray
    negatives: Optional[np.ndarray] = None
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.positives.ndim != 2 or self.positives.shape[0] != len(self.users):
            raise ValidationError("positives must be an N x M table aligned with users")
        if self.negatives is not None and len(self.negatives) != len(self.users):
            raise ValidationError("negatives must have one entry per row")

    @property
    def size(self) -> int:
        return len(self.users)

    @property
    def num_positives(self) -> int:
        return self.positives.shape[1]

    def path(self, m: int) -> "TrainingBatch":
        return TrainingBatch(self.users, self.positives[:, m:m + 1], self.negatives)


def _extra_positives(dataset, users, anchors, count, rng, replace):
    """Draw ``count`` further positives per row from each user's train set."""
    n = len(users)
    if count == 0:
        return np.empty((n, 0), dtype=np.int64)
    mat = dataset.train_matrix
    start = mat.indptr[users]
    deg = mat.indptr[users + 1] - start
    out = np.empty((n, count), dtype=np.int64)
    small = replace | (deg <= count)  # too few distinct non-anchor positives
    if np.any(small):
        rows = np.flatnonzero(small)
        offs = np.floor(rng.random((len(rows), count)) * deg[rows, None]).astype(np.int64)
        out[rows] = mat.indices[start[rows, None] + offs]
    big = np.flatnonzero(~small)
    if len(big):
        # distinct draws from P_u minus the anchor
        keys = users[big] * dataset.num_items + anchors[big]
        anchor_pos = np.searchsorted(dataset.pair_keys, keys) - start[big]
        offs = np.floor(rng.random((len(big), count)) * (deg[big, None] - 1)).astype(np.int64)
        offs += offs >= anchor_pos[:, None]
        if count > 1:
            srt = np.sort(offs, axis=1)
            dup = np.flatnonzero(np.any(srt[:, 1:] == srt[:, :-1], axis=1))
            for j in dup:
                r = big[j]
                choice = rng.choice(deg[r] - 1, size=count, replace=False)
                offs[j] = choice + (choice >= anchor_pos[j])
        out[big] = mat.indices[start[big, None] + offs]
    return out


def _negatives(dataset, users, rng):
    deg = dataset.train_degrees[users]
    full = users[deg >= dataset.num_items]
    if len(full):
        raise SamplingError(f"user {int(full[0])} is positive with every item; no negative exists")
    negs = rng.integers(0, dataset.num_items, size=len(users))
    bad = np.flatnonzero(dataset.is_train_positive(users, negs))
    rounds = 0
    while len(bad):
        rounds += 1
        if rounds > MAX_NEGATIVE_ROUNDS:
            raise SamplingError(
                f"negative sampling exceeded {MAX_NEGATIVE_ROUNDS} rounds for user {int(users[bad[0]])}"
            )
        negs[bad] = rng.integers(0, dataset.num_items, size=len(bad))
        bad = bad[dataset.is_train_positive(users[bad], negs[bad])]
    return negs


def complete_batch(dataset: InteractionDataset, users, anchors, num_positives: int,
                   with_negative: bool, rng: np.random.Generator,
                   replace: bool = False) -> TrainingBatch:
    """Turn anchor ``(user, item)`` pairs into an ``N x M`` batch.

    Column 0 is the anchor. Columns ``1..M-1`` are further train positives of
    the same user: distinct from each other and from the anchor when the user
    has at least ``M`` positives and ``replace`` is false, otherwise drawn
    uniformly with replacement.
    """
    if num_positives < 1:
        raise ConfigError(f"num_positives must be >= 1, got {num_positives}")
    users = np.asarray(users, dtype=np.int64)
    anchors = np.asarray(anchors, dtype=np.int64)
    extra = _extra_positives(dataset, users, anchors, num_positives - 1, rng, replace)
    positives = np.concatenate([anchors[:, None], extra], axis=1)
    negatives = _negatives(dataset, users, rng) if with_negative else None
    return TrainingBatch(users, positives, negatives)


def sample_batch(dataset: InteractionDataset, batch_size: int, num_positives: int,
                 with_negative: bool, rng: np.random.Generator,
                 replace: bool = False) -> TrainingBatch:
    """Draw one batch of anchors uniformly (without replacement) from the interactions."""
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    if num_positives < 1:
        raise ConfigError(f"num_positives must be >= 1, got {num_positives}")
    all_users, all_items = dataset.interactions
    if len(all_users) == 0:
        raise SamplingError("dataset has no trainable user")
    idx = rng.choice(len(all_users), size=min(batch_size, len(all_users)), replace=False)
    return complete_batch(dataset, all_users[idx], all_items[idx], num_positives,
                          with_negative, rng, replace)


def epoch_batches(dataset: InteractionDataset, batch_size: int, num_positives: int,
                  with_negative: bool, rng: np.random.Generator,
                  replace: bool = False) -> Iterator[TrainingBatch]:
    """One epoch: every train interaction is the anchor of exactly one row."""
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    if num_positives < 1:
        raise ConfigError(f"num_positives must be >= 1, got {num_positives}")
    all_users, all_items = dataset.interactions
    if len(all_users) == 0:
        raise SamplingError("dataset has no trainable user")
    order = rng.permutation(len(all_users))
    for lo in range(0, len(order), batch_size):
        idx = order[lo:lo + batch_size]
        yield complete_batch(dataset, all_users[idx], all_items[idx], num_positives,
                             with_negative, rng, replace)


def num_batches(dataset: InteractionDataset, batch_size: int) -> int:
    return math.ceil(dataset.num_train_interactions / batch_size)


@dataclass(frozen=True)
class SyntheticSpec:
    num_blocks: int = 4
    users_per_block: int = 50
    items_per_block: int = 40
    in_block_density: float = 0.3
    noise_density: float = 0.02
    holdout_fraction: float = 0.2

    def validate(self):
        for name in ("num_blocks", "users_per_block", "items_per_block"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("in_block_density", "noise_density"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if not 0.0 < self.holdout_fraction < 1.0:
            raise ConfigError("holdout_fraction must lie in (0, 1)")


def holdout_count(num_positives: int, fraction: float) -> int:
    # epsilon guards products like 0.29 * 100 = 28.999...
    return int(math.floor(fraction * num_positives + 1e-9))


def block_of_user(spec: SyntheticSpec, user) -> np.ndarray:
    return np.asarray(user) // spec.users_per_block


def block_of_item(spec: SyntheticSpec, item) -> np.ndarray:
    return np.asarray(item) // spec.items_per_block


def generate_synthetic(num_blocks: int = 4, users_per_block: int = 50, items_per_block: int = 40,
                       in_block_density: float = 0.3, noise_density: float = 0.02,
                       holdout_fraction: float = 0.2,
                       rng: Optional[np.random.Generator] = None) -> InteractionDataset:
    """Block-diagonal preference data: users of block ``b`` favour items of block ``b``.

    Each in-block pair is an interaction with probability ``in_block_density``,
    each off-block pair with ``noise_density``. Every user keeps
    ``floor(holdout_fraction * n)`` of their ``n`` positives for test, so at
    least one train positive survives. Users that draw no positive at all are
    redrawn a bounded number of times.
    """
    spec = SyntheticSpec(num_blocks, users_per_block, items_per_block,
                         in_block_density, noise_density, holdout_fraction)
    spec.validate()
    rng = np.random.default_rng() if rng is None else rng
    num_users = num_blocks * users_per_block
    num_items = num_blocks * items_per_block
    item_block = block_of_item(spec, np.arange(num_items))
    train, test = [], []
    for u in range(num_users):
        probs = np.where(item_block == block_of_user(spec, u), in_block_density, noise_density)
        for _ in range(MAX_SYNTH_RETRIES):
            items = np.flatnonzero(rng.random(num_items) < probs)
            if len(items):
                break
        else:
            raise SamplingError(
                f"user {u} drew no positives in {MAX_SYNTH_RETRIES} attempts; raise the densities"
            )
        n_test = holdout_count(len(items), holdout_fraction)
        held = rng.permutation(items)[:n_test]
        test.append(np.sort(held))
        train.append(np.setdiff1d(items, held))
    return InteractionDataset.from_lists(train, test, num_users=num_users, num_items=num_items)
