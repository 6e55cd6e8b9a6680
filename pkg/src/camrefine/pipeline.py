"""Two-stage training: per-camera pre-training, then refined global training.

Stage 1 trains one encoder per camera on that camera's items alone and saves
each camera's final clustering. Stage 2 re-clusters the whole set every epoch
with a fresh shared encoder, refines the global labels against the fixed
stage-1 local clusterings with a decaying discard probability, and trains on
the kept items with the cluster contrastive loss.

The encoder is an affine map followed by length normalization; it stands in
for a CNN backbone while preserving the feature drift and memory staleness
the training loop has to cope with.
"""

from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .clustering import (
    ClusterAssignment,
    agglomerative_cluster,
    cluster_centroids,
    pairwise_distance,
)
from .contrastive import MemoryBank, batch_nce_loss_grad, init_memory, update_memory
from .embeddings import EmbeddingSet, split_by_camera
from .evaluation import ClusterQuality, RetrievalResult, RetrievalSplit, cmc_map, pairwise_metrics
from .refinement import (
    DISCARDED,
    RefinedAssignment,
    RefinementConfig,
    decay_probability,
    discard_draws,
    refine_labels,
)

ENC_MAGIC = b"ENC1"


class LinearEncoder:
    """Affine map plus length normalization; float64 parameters."""

    def __init__(self, weights: np.ndarray, bias: np.ndarray):
        w = np.array(weights, dtype=np.float64)
        b = np.array(bias, dtype=np.float64)
        if w.ndim != 2 or b.shape != (w.shape[1],):
            raise ValueError(f"weights {w.shape} and bias {b.shape} are inconsistent")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ValueError("encoder parameters must be finite")
        self.weights = w
        self.bias = b

    @property
    def dim_in(self) -> int:
        return self.weights.shape[0]

    @property
    def dim_out(self) -> int:
        return self.weights.shape[1]

    @classmethod
    def initial(cls, dim_in: int, dim_out: Optional[int] = None, seed: int = 0) -> "LinearEncoder":
        """Identity map when widths agree, otherwise a seeded Gaussian projection."""
        dim_out = dim_in if dim_out is None else dim_out
        if dim_out == dim_in:
            w = np.eye(dim_in)
        else:
            rng = np.random.default_rng([int(seed), 0xE0C])
            w = rng.normal(size=(dim_in, dim_out)) / np.sqrt(dim_in)
        return cls(w, np.zeros(dim_out))

    def copy(self) -> "LinearEncoder":
        return LinearEncoder(self.weights, self.bias)

    def transform(self, features: np.ndarray) -> np.ndarray:
        """Encode rows: normalize(features @ W + b); float64 unit rows."""
        feats = np.asarray(features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[1] != self.dim_in:
            raise ValueError(f"expected N x {self.dim_in} input, got shape {feats.shape}")
        z = feats @ self.weights + self.bias
        norms = np.linalg.norm(z, axis=1)
        if norms.min(initial=np.inf) < 1e-12:
            raise ValueError("encoder produced a zero vector; cannot normalize")
        return z / norms[:, None]


def encode(encoder: LinearEncoder, features: np.ndarray) -> np.ndarray:
    """Functional alias for :meth:`LinearEncoder.transform`."""
    return encoder.transform(features)


def save_encoder(encoder: LinearEncoder, path) -> None:
    """Write magic 'ENC1', u32 dims, then float32 row-major weights and bias."""
    with open(path, "wb") as fh:
        fh.write(ENC_MAGIC)
        fh.write(struct.pack("<II", encoder.dim_in, encoder.dim_out))
        fh.write(np.ascontiguousarray(encoder.weights, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(encoder.bias, dtype="<f4").tobytes())


def load_encoder(path) -> LinearEncoder:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:4] != ENC_MAGIC:
        raise ValueError(f"{path}: not an ENC1 encoder file")
    d_in, d_out = struct.unpack_from("<II", blob, 4)
    expected = 12 + 4 * (d_in * d_out + d_out)
    if len(blob) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(blob)}")
    w = np.frombuffer(blob, dtype="<f4", count=d_in * d_out, offset=12).reshape(d_in, d_out)
    b = np.frombuffer(blob, dtype="<f4", count=d_out, offset=12 + 4 * d_in * d_out)
    return LinearEncoder(w, b)


@dataclass(frozen=True)
class PipelineConfig:
    """Everything the two training stages need; JSON-friendly."""

    intra_epochs: int = 20
    inter_epochs: int = 50
    intra_k: Union[int, str] = "n/5"
    inter_k: Union[int, str] = "n/5"
    linkage: str = "average"
    learning_rate: float = 0.05
    batch_size: int = 64
    temperature: float = 0.05
    momentum: float = 0.2
    encoder_dim: Optional[int] = None
    refinement: RefinementConfig = field(default_factory=RefinementConfig)
    seed: int = 0

    def __post_init__(self):
        if self.intra_epochs < 1 or self.inter_epochs < 1:
            raise ValueError("epoch counts must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError("momentum must lie in [0, 1]")
        for name in ("intra_k", "inter_k"):
            value = getattr(self, name)
            if isinstance(value, str):
                if value != "n/5":
                    raise ValueError(f"{name} must be an integer or the rule 'n/5'")
            elif value < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.seed < 0:
            raise ValueError("seed must be >= 0")

    def resolved_refinement(self) -> RefinementConfig:
        """Refinement config with total_epochs pinned to the stage-2 epoch count."""
        if self.refinement.total_epochs is None:
            return dataclasses.replace(self.refinement, total_epochs=self.inter_epochs)
        return self.refinement


def _resolve_k(setting: Union[int, str], n: int) -> int:
    if isinstance(setting, str):
        return max(1, n // 5)
    return int(setting)


@dataclass(frozen=True)
class EpochReport:
    """One stage-2 epoch: refinement stats, loss, and quality metrics."""

    epoch: int
    p: float
    mean_loss: float
    kept_count: int
    discarded_count: int
    global_quality: Optional[ClusterQuality] = None
    local_quality: Optional[ClusterQuality] = None
    refined_quality: Optional[ClusterQuality] = None
    retrieval: Optional[RetrievalResult] = None

    def to_dict(self) -> dict:
        out = {
            "epoch": self.epoch,
            "p": self.p,
            "mean_loss": self.mean_loss,
            "kept_count": self.kept_count,
            "discarded_count": self.discarded_count,
        }
        for name in ("global_quality", "local_quality", "refined_quality"):
            quality = getattr(self, name)
            if quality is not None:
                out[name] = dataclasses.asdict(quality)
        if self.retrieval is not None:
            out["retrieval"] = {
                "map": self.retrieval.mean_ap,
                "rank1": self.retrieval.cmc_at(1),
                "rank5": self.retrieval.cmc_at(5),
                "rank10": self.retrieval.cmc_at(10),
                "excluded_queries": self.retrieval.excluded_queries,
            }
        return out


def sgd_step(
    encoder: LinearEncoder,
    batch_features: np.ndarray,
    labels: np.ndarray,
    bank: MemoryBank,
    learning_rate: float,
) -> float:
    """One gradient-descent step on the mean contrastive loss of a batch.

    Gradients flow through the encoder's length normalization. The bank is
    updated per query (in batch order) after the parameter step; the returned
    value is the pre-step mean loss.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and labels.min() < 0:
        raise ValueError("batch contains discarded items; filter them before training")
    feats = np.asarray(batch_features, dtype=np.float64)
    z = feats @ encoder.weights + encoder.bias
    norms = np.linalg.norm(z, axis=1)
    if norms.min(initial=np.inf) < 1e-12:
        raise ValueError("encoder produced a zero vector; cannot normalize")
    queries = z / norms[:, None]

    losses, d_queries = batch_nce_loss_grad(queries, labels, bank)
    d_queries = d_queries / labels.size
    # back through q = z / |z|:  dz = (dq - (dq . q) q) / |z|
    dz = (d_queries - (d_queries * queries).sum(axis=1, keepdims=True) * queries) / norms[:, None]
    encoder.weights -= learning_rate * (feats.T @ dz)
    encoder.bias -= learning_rate * dz.sum(axis=0)

    for q_row, lab in zip(queries, labels):
        update_memory(bank, q_row, int(lab))
    return float(losses.mean())


@dataclass(frozen=True)
class IntraCameraResult:
    """Stage-1 outputs: per-camera encoders and final local clusterings."""

    encoders: dict[int, LinearEncoder]
    locals_: dict[int, tuple[np.ndarray, ClusterAssignment]]


def _epoch_batches(rng: np.random.Generator, indices: np.ndarray, batch_size: int):
    order = indices[rng.permutation(indices.size)]
    for start in range(0, order.size, batch_size):
        yield order[start : start + batch_size]


def train_intra_camera(dataset: EmbeddingSet, config: PipelineConfig) -> IntraCameraResult:
    """Stage 1: train one encoder per camera; keep each camera's last clustering."""
    working = dataset.without_identities()
    initial = LinearEncoder.initial(working.dim, config.encoder_dim, config.seed)
    encoders: dict[int, LinearEncoder] = {}
    locals_: dict[int, tuple[np.ndarray, ClusterAssignment]] = {}
    for view in split_by_camera(working):
        n_c = view.indices.size
        k_c = _resolve_k(config.intra_k, n_c)
        if not 1 <= k_c <= n_c:
            raise ValueError(
                f"camera {view.camera_id}: cluster count {k_c} exceeds its {n_c} items"
            )
        enc = initial.copy()
        assignment = None
        for epoch in range(config.intra_epochs):
            feats = enc.transform(view.subset.features)
            assignment = agglomerative_cluster(pairwise_distance(feats), k_c, config.linkage)
            bank = init_memory(
                cluster_centroids(feats, assignment), config.temperature, config.momentum
            )
            rng = np.random.default_rng([config.seed, 1, view.camera_id, epoch])
            for batch in _epoch_batches(rng, np.arange(n_c), config.batch_size):
                sgd_step(
                    enc,
                    view.subset.features[batch],
                    assignment.labels[batch],
                    bank,
                    config.learning_rate,
                )
        encoders[view.camera_id] = enc
        locals_[view.camera_id] = (view.indices, assignment)
    return IntraCameraResult(encoders, locals_)


@dataclass(frozen=True)
class InterCameraResult:
    """Stage-2 outputs: the trained encoder plus per-epoch assignments and reports."""

    encoder: LinearEncoder
    reports: list[EpochReport]
    global_assignments: list[ClusterAssignment]
    refined_assignments: list[RefinedAssignment]


def train_inter_camera(
    dataset: EmbeddingSet,
    locals_: dict[int, tuple[np.ndarray, ClusterAssignment]],
    config: PipelineConfig,
) -> InterCameraResult:
    """Stage 2: per epoch, re-cluster globally, refine against the fixed stage-1
    locals with the decayed discard probability, and train on kept items."""
    working = dataset.without_identities()
    for cam in range(working.num_cameras):
        if cam not in locals_:
            raise ValueError(f"camera {cam} missing from stage-1 local clusterings")
    refinement = config.resolved_refinement()
    if refinement.total_epochs < config.inter_epochs:
        raise ValueError("refinement.total_epochs must cover all inter epochs")
    n = working.n
    k = _resolve_k(config.inter_k, n)
    if not 1 <= k <= n:
        raise ValueError(f"inter cluster count {k} out of range [1, {n}]")

    encoder = LinearEncoder.initial(working.dim, config.encoder_dim, config.seed)
    reports: list[EpochReport] = []
    global_assignments: list[ClusterAssignment] = []
    refined_assignments: list[RefinedAssignment] = []
    for epoch in range(config.inter_epochs):
        feats = encoder.transform(working.features)
        dist = pairwise_distance(feats)
        global_assignment = agglomerative_cluster(dist, k, config.linkage)
        p = decay_probability(refinement, epoch)
        draws = discard_draws(refinement.seed, epoch, n)
        refined = refine_labels(
            global_assignment, locals_, dist, working.camera_ids, refinement, p, draws
        )

        kept = np.flatnonzero(refined.kept_mask)
        kept_assignment = ClusterAssignment(refined.labels[kept], refined.num_clusters)
        bank = init_memory(
            cluster_centroids(feats[kept], kept_assignment),
            config.temperature,
            config.momentum,
        )
        rng = np.random.default_rng([config.seed, 2, epoch])
        loss_sum = 0.0
        for batch in _epoch_batches(rng, kept, config.batch_size):
            loss = sgd_step(
                encoder,
                working.features[batch],
                refined.labels[batch],
                bank,
                config.learning_rate,
            )
            loss_sum += loss * batch.size

        reports.append(
            _epoch_report(
                dataset, locals_, encoder, global_assignment, refined, epoch, p,
                loss_sum / kept.size,
            )
        )
        global_assignments.append(global_assignment)
        refined_assignments.append(refined)
    return InterCameraResult(encoder, reports, global_assignments, refined_assignments)


def _compose_local_labels(
    dataset: EmbeddingSet, locals_: dict[int, tuple[np.ndarray, ClusterAssignment]]
) -> np.ndarray:
    """Union of the per-camera clusterings as one dataset-wide partition."""
    labels = np.full(dataset.n, -1, dtype=np.int64)
    offset = 0
    for cam in sorted(locals_):
        indices, assignment = locals_[cam]
        labels[indices] = assignment.labels + offset
        offset += assignment.num_clusters
    return labels


def _epoch_report(
    dataset: EmbeddingSet,
    locals_: dict[int, tuple[np.ndarray, ClusterAssignment]],
    encoder: LinearEncoder,
    global_assignment: ClusterAssignment,
    refined: RefinedAssignment,
    epoch: int,
    p: float,
    mean_loss: float,
) -> EpochReport:
    if dataset.identities is None:
        return EpochReport(epoch, p, mean_loss, refined.kept_count, refined.discarded_count)
    gt = dataset.identities
    try:
        retrieval = cmc_map(RetrievalSplit(dataset, dataset), encoder)
    except ValueError:
        retrieval = None  # no cross-camera match exists (e.g. a single camera)
    return EpochReport(
        epoch,
        p,
        mean_loss,
        refined.kept_count,
        refined.discarded_count,
        global_quality=pairwise_metrics(global_assignment, gt),
        local_quality=pairwise_metrics(_compose_local_labels(dataset, locals_), gt),
        refined_quality=pairwise_metrics(refined, gt),
        retrieval=retrieval,
    )


@dataclass(frozen=True)
class PipelineResult:
    """Everything a full run produces."""

    config: PipelineConfig
    intra: IntraCameraResult
    inter: InterCameraResult


def run_pipeline(dataset: EmbeddingSet, config: PipelineConfig) -> PipelineResult:
    """Stage 1 then stage 2 on the given dataset."""
    intra = train_intra_camera(dataset, config)
    inter = train_inter_camera(dataset, intra.locals_, config)
    return PipelineResult(config, intra, inter)
