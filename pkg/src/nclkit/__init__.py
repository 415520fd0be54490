"""Normalized contrastive retrieval: Sinkhorn-derived instance biases.

Embedding-based cross-modal retrieval over- and under-represents instances
whenever their summed retrieval probabilities drift from their marginal
targets. This package computes additive per-instance score biases via
Sinkhorn-Knopp scaling to remove that drift, evaluates retrieval before and
after, approximates unknown query distributions with train-query queues,
and ships a desk-scale synthetic trainer for comparing the plain and
normalized contrastive objectives.
"""

from .decomposition import (
    Displacements,
    ModalMeans,
    SimilarityTerms,
    modal_decompose,
    modality_similarity_stats,
    similarity_decomposition,
    weighted_softmax_check,
)
from .embeddings import (
    EmbeddingSet,
    Modality,
    SimilarityMatrix,
    cosine_similarity_matrix,
    l2_normalize,
    read_embeddings,
    write_embeddings,
)
from .errors import (
    BatchTooSmall,
    DegenerateMatrix,
    DimensionMismatch,
    EmptyQueue,
    FileFormatError,
    MissingGroundTruth,
    ModalityMismatch,
    NclError,
    NonFinite,
    ZeroVector,
)
from .evaluation import (
    Direction,
    FalseRateProfile,
    GroundTruth,
    MetricsReport,
    RetrievalDistribution,
    compute_metrics,
    false_rate_profile,
    normalization_error,
    rank_matrix,
    retrieval_distribution,
)
from .losses import (
    GradientSet,
    LossValue,
    bias_gradient,
    contrastive_loss,
    finite_difference_check,
    ncl_loss,
)
from .queues import (
    QueryQueue,
    TestTimeBiases,
    apply_test_biases,
    oracle_test_biases,
    test_time_biases,
)
from .sinkhorn import (
    BiasVectors,
    MarginalPrior,
    ScalingVectors,
    SinkhornOptions,
    TransportPlan,
    adjust_similarity,
    compute_biases,
    scale_matrix,
    verify_normalization,
)
from .training import (
    LossKind,
    RunRecord,
    SyntheticDataset,
    SyntheticDatasetSpec,
    TrainConfig,
    generate_dataset,
    queue_size_sweep,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "BatchTooSmall",
    "BiasVectors",
    "DegenerateMatrix",
    "DimensionMismatch",
    "Direction",
    "Displacements",
    "EmbeddingSet",
    "EmptyQueue",
    "FalseRateProfile",
    "FileFormatError",
    "GradientSet",
    "GroundTruth",
    "LossKind",
    "LossValue",
    "MarginalPrior",
    "MetricsReport",
    "MissingGroundTruth",
    "ModalMeans",
    "Modality",
    "ModalityMismatch",
    "NclError",
    "NonFinite",
    "QueryQueue",
    "RetrievalDistribution",
    "RunRecord",
    "ScalingVectors",
    "SimilarityMatrix",
    "SimilarityTerms",
    "SinkhornOptions",
    "SyntheticDataset",
    "SyntheticDatasetSpec",
    "TestTimeBiases",
    "TrainConfig",
    "TransportPlan",
    "ZeroVector",
    "adjust_similarity",
    "apply_test_biases",
    "bias_gradient",
    "compute_biases",
    "compute_metrics",
    "contrastive_loss",
    "cosine_similarity_matrix",
    "false_rate_profile",
    "finite_difference_check",
    "generate_dataset",
    "l2_normalize",
    "modal_decompose",
    "modality_similarity_stats",
    "ncl_loss",
    "normalization_error",
    "oracle_test_biases",
    "queue_size_sweep",
    "rank_matrix",
    "read_embeddings",
    "retrieval_distribution",
    "scale_matrix",
    "similarity_decomposition",
    "test_time_biases",
    "train",
    "verify_normalization",
    "weighted_softmax_check",
    "write_embeddings",
]
