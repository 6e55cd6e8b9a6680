"""Camera-aware pseudo-label refinement for unsupervised re-identification.

Operates on embedding vectors: per-camera and global agglomerative
clustering, centrality-based information-node selection, probabilistic label
refinement with decay schedules, cluster-contrastive training against a
momentum memory bank, and clustering/retrieval evaluation.
"""

__version__ = "0.1.0"

from .clustering import (
    ClusterAssignment,
    DistanceMatrix,
    agglomerative_cluster,
    cluster_centroids,
    pairwise_distance,
)
from .contrastive import (
    MemoryBank,
    cluster_nce_grad,
    cluster_nce_loss,
    init_memory,
    update_memory,
)
from .embeddings import (
    EmbeddingSet,
    SyntheticSpec,
    generate_synthetic,
    l2_normalize,
    load_embeddings,
    save_embeddings,
    split_by_camera,
)
from .evaluation import (
    ClusterQuality,
    RetrievalResult,
    RetrievalSplit,
    cmc_map,
    pairwise_metrics,
)
from .pipeline import (
    EpochReport,
    LinearEncoder,
    PipelineConfig,
    PipelineResult,
    encode,
    load_encoder,
    run_pipeline,
    save_encoder,
    sgd_step,
    train_inter_camera,
    train_intra_camera,
)
from .refinement import (
    CentralityReport,
    RefinedAssignment,
    RefinementConfig,
    centrality_scores,
    decay_probability,
    discard_draws,
    refine_labels,
    refinement_stats,
)

__all__ = [
    "CentralityReport",
    "ClusterAssignment",
    "ClusterQuality",
    "DistanceMatrix",
    "EmbeddingSet",
    "EpochReport",
    "LinearEncoder",
    "MemoryBank",
    "PipelineConfig",
    "PipelineResult",
    "RefinedAssignment",
    "RefinementConfig",
    "RetrievalResult",
    "RetrievalSplit",
    "SyntheticSpec",
    "agglomerative_cluster",
    "centrality_scores",
    "cluster_centroids",
    "cluster_nce_grad",
    "cluster_nce_loss",
    "cmc_map",
    "decay_probability",
    "discard_draws",
    "encode",
    "generate_synthetic",
    "init_memory",
    "l2_normalize",
    "load_embeddings",
    "load_encoder",
    "pairwise_distance",
    "pairwise_metrics",
    "refine_labels",
    "refinement_stats",
    "run_pipeline",
    "save_embeddings",
    "save_encoder",
    "sgd_step",
    "split_by_camera",
    "train_inter_camera",
    "train_intra_camera",
    "update_memory",
]
