"""Multi-sample contrastive losses for top-k recommendation.

Encoders (matrix factorisation, LightGCN mean and single-layer), the BPR /
contrastive loss family with analytic gradients, multi-positive batch
sampling, sparse Adam training and full-ranking Recall/NDCG evaluation.
"""

__version__ = "0.1.0"

from .dataset import (
    InteractionDataset,
    TrainingBatch,
    generate_synthetic,
    load_interactions,
    sample_batch,
    write_interactions,
)
from .encoder import EmbeddingTable, EncoderConfig, backprop_encoder, encode, init_embeddings
from .graph import NormalizedBipartiteGraph, build_normalized_adjacency, propagate
from .losses import LossConfig, LossOutput, compute_loss
from .metrics import EvalResult, evaluate
from .trainer import TrainConfig, TrainHistory, epochs_to_fraction, train

__all__ = [
    "EmbeddingTable",
    "EncoderConfig",
    "EvalResult",
    "InteractionDataset",
    "LossConfig",
    "LossOutput",
    "NormalizedBipartiteGraph",
    "TrainConfig",
    "TrainHistory",
    "TrainingBatch",
    "backprop_encoder",
    "build_normalized_adjacency",
    "compute_loss",
    "encode",
    "epochs_to_fraction",
    "evaluate",
    "generate_synthetic",
    "init_embeddings",
    "load_interactions",
    "propagate",
    "sample_batch",
    "train",
    "write_interactions",
]
