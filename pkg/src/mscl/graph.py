"""Symmetric-normalised user-item propagation operator."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .dataset import InteractionDataset
from .errors import ValidationError


@dataclass(frozen=True, eq=False)
class NormalizedBipartiteGraph:
    """Edge weights ``1/sqrt(|N_u| |N_i|)`` stored CSR in both directions.

    ``user_to_item`` is the ``num_users x num_items`` matrix applied to item
    vectors to produce user vectors; ``item_to_user`` is its transpose.
    """

    user_degrees: np.ndarray
    item_degrees: np.ndarray
    user_to_item: sp.csr_matrix
    item_to_user: sp.csr_matrix

    @property
    def num_users(self) -> int:
        return len(self.user_degrees)

    @property
    def num_items(self) -> int:
        return len(self.item_degrees)

    @property
    def num_nodes(self) -> int:
        return self.num_users + self.num_items

    def edges(self):
        """``(users, items, weights)`` in user-major order."""
        coo = self.user_to_item.tocoo()
        return coo.row.astype(np.int64), coo.col.astype(np.int64), coo.data


def build_normalized_adjacency(dataset: InteractionDataset) -> NormalizedBipartiteGraph:
    users, items = dataset.interactions
    user_deg = np.bincount(users, minlength=dataset.num_users).astype(np.int64)
    item_deg = np.bincount(items, minlength=dataset.num_items).astype(np.int64)
    # only edges with both degrees >= 1 exist, so no 1/sqrt(0)
    weights = 1.0 / (np.sqrt(user_deg[users].astype(np.float64)) * np.sqrt(item_deg[items].astype(np.float64)))
    forward = sp.csr_matrix((weights, (users, items)), shape=(dataset.num_users, dataset.num_items))
    forward.sort_indices()
    backward = forward.T.tocsr()
    backward.sort_indices()
    return NormalizedBipartiteGraph(user_deg, item_deg, forward, backward)


def propagate(graph: NormalizedBipartiteGraph, user_vecs, item_vecs):
    """One aggregation layer: users gather from items and items from users.

    Returns ``(new_user_vecs, new_item_vecs)`` as float64 arrays. Rows of
    zero-degree nodes come out zero.
    """
    user_vecs = np.asarray(user_vecs, dtype=np.float64)
    item_vecs = np.asarray(item_vecs, dtype=np.float64)
    if user_vecs.ndim != 2 or item_vecs.ndim != 2:
        raise ValidationError("propagate expects 2-d tables")
    if user_vecs.shape[0] != graph.num_users or item_vecs.shape[0] != graph.num_items:
        raise ValidationError(
            f"table rows {user_vecs.shape[0]}/{item_vecs.shape[0]} do not match graph "
            f"{graph.num_users}/{graph.num_items}"
        )
    if user_vecs.shape[1] != item_vecs.shape[1]:
        raise ValidationError(
            f"embedding width mismatch: users {user_vecs.shape[1]}, items {item_vecs.shape[1]}"
        )
    return graph.user_to_item @ item_vecs, graph.item_to_user @ user_vecs


def stacked_operator(graph: NormalizedBipartiteGraph) -> sp.csr_matrix:
    """The ``(U+I) x (U+I)`` block matrix ``[[0, A], [A^T, 0]]``."""
    return sp.bmat([[None, graph.user_to_item], [graph.item_to_user, None]],
                   format="csr")
