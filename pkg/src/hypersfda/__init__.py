"""Source-free domain adaptation on embedding datasets.

Adapts a small source-pretrained classifier to an unlabeled target set by
building a hypergraph over target samples (KNN hyperedges with
reconstruction affinities and entropy self-loops), clustering samples by
their relation-matrix rows, and fine-tuning with an adaptive pull/push
objective plus an EMA-KL regularizer.
"""

__version__ = "0.1.0"

from .config import AdaptConfig, ConfigError
from .datagen import (
    DatasetFormatError,
    EmbeddingDataset,
    ShiftSpec,
    gen_gaussian_domains,
    gen_two_moons_domains,
    load_dataset,
    save_dataset,
)
from .hypergraph import (
    Hyperedge,
    HypergraphArtifacts,
    SelfLoopSet,
    build_artifacts,
    build_hyperedges,
    build_relation_matrix,
    cluster_high_order,
    compress_rows,
    cosine_knn,
    merge_self_loops,
    neighbor_mean_prediction,
    normalized_entropy,
    self_loop_affinities,
    solve_affinity,
)
from .model import (
    AdaptModel,
    CheckpointError,
    GradientSet,
    accuracy,
    backward,
    forward,
    init_model,
    load_model,
    pretrain_source,
    save_model,
    sgd_step,
)
from .objective import (
    EmaState,
    LossBreakdown,
    adaptive_loss,
    ema_update,
    kl_regularizer,
    lambda_schedule,
    prediction_distance,
    total_loss,
)
from .trainer import (
    MemoryBank,
    MetricsRecord,
    TrainerState,
    TrainingAborted,
    adapt,
    evaluate,
    load_checkpoint,
    open_set_split,
    refresh_hypergraph,
    save_checkpoint,
)

__all__ = [
    "AdaptConfig",
    "AdaptModel",
    "CheckpointError",
    "ConfigError",
    "DatasetFormatError",
    "EmaState",
    "EmbeddingDataset",
    "GradientSet",
    "Hyperedge",
    "HypergraphArtifacts",
    "LossBreakdown",
    "MemoryBank",
    "MetricsRecord",
    "SelfLoopSet",
    "ShiftSpec",
    "TrainerState",
    "TrainingAborted",
    "accuracy",
    "adapt",
    "adaptive_loss",
    "backward",
    "build_artifacts",
    "build_hyperedges",
    "build_relation_matrix",
    "cluster_high_order",
    "compress_rows",
    "cosine_knn",
    "ema_update",
    "evaluate",
    "forward",
    "gen_gaussian_domains",
    "gen_two_moons_domains",
    "init_model",
    "kl_regularizer",
    "lambda_schedule",
    "load_checkpoint",
    "load_dataset",
    "load_model",
    "merge_self_loops",
    "neighbor_mean_prediction",
    "normalized_entropy",
    "open_set_split",
    "prediction_distance",
    "pretrain_source",
    "refresh_hypergraph",
    "save_checkpoint",
    "save_dataset",
    "save_model",
    "self_loop_affinities",
    "sgd_step",
    "solve_affinity",
    "total_loss",
]
