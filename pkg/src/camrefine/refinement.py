"""Pseudo-label refinement from per-camera clusterings.

For every global cluster, high-centrality members ("information nodes") are
selected by a harmonic-centrality style score over the cluster's distance
submatrix. Same-camera members that share no local cluster with any of their
camera's information nodes are discard candidates and are dropped with
probability ``p``; members whose camera contributes no information node are
always kept. ``p`` decays over epochs (self-paced schedule) so refinement
loosens as training progresses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np

from .clustering import ClusterAssignment, DistanceMatrix

DISCARDED = -1

SCHEDULES = ("none", "linear", "exponential", "cosine")


@dataclass(frozen=True)
class RefinementConfig:
    """Knobs for information-node selection and discard-probability decay."""

    neighbor_count: int = 15
    p0: float = 1.0
    schedule: str = "cosine"
    exp_gamma: float = 0.9
    total_epochs: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        if self.neighbor_count < 1:
            raise ValueError("neighbor_count must be >= 1")
        if not 0.0 <= self.p0 <= 1.0:
            raise ValueError(f"p0 must lie in [0, 1], got {self.p0}")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"unknown schedule {self.schedule!r} (expected one of {SCHEDULES})")
        if not 0.0 < self.exp_gamma < 1.0:
            raise ValueError("exp_gamma must lie in (0, 1)")
        if self.total_epochs is not None and self.total_epochs < 1:
            raise ValueError("total_epochs must be >= 1")
        if self.seed < 0:
            raise ValueError("seed must be >= 0")


@dataclass(frozen=True)
class CentralityReport:
    """Per-member centrality scores and the selected information nodes.

    ``scores`` aligns with the member list handed to :func:`centrality_scores`;
    ``information_nodes`` holds the selected members' original item indices.
    """

    scores: np.ndarray
    threshold: float
    information_nodes: np.ndarray


@dataclass(frozen=True)
class RefinedAssignment:
    """Global labels after refinement; discarded items carry -1."""

    labels: np.ndarray
    num_clusters: int
    kept_count: int
    discarded_count: int

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        object.__setattr__(self, "labels", labels)
        if self.kept_count + self.discarded_count != labels.size:
            raise ValueError("kept_count + discarded_count must equal N")
        kept = labels[labels != DISCARDED]
        if kept.size != self.kept_count:
            raise ValueError("kept_count does not match non-sentinel labels")
        if kept.size and (kept.min() < 0 or kept.max() >= self.num_clusters):
            raise ValueError("kept labels out of range")
        self.labels.setflags(write=False)

    @property
    def kept_mask(self) -> np.ndarray:
        return self.labels != DISCARDED


def centrality_scores(
    cluster_members, dist: DistanceMatrix, neighbor_count: int = 15
) -> CentralityReport:
    """Score each cluster member by closeness to its nearest in-cluster neighbors.

    score(i) = sum over the ``m`` closest members j of 1 / (dist(i, j) + mean),
    with m = min(neighbor_count, len(members) - 1) and ``mean`` the average
    off-diagonal pairwise distance inside the cluster. Members scoring above
    the mean score become information nodes; when none clears the threshold
    (all-equal scores), the highest-scoring member with the lowest index is
    promoted. A singleton cluster is its own information node with score 0.
    """
    members = np.asarray(cluster_members, dtype=np.int64)
    if members.ndim != 1 or members.size < 1:
        raise ValueError("cluster_members must be a non-empty 1-D index list")
    if neighbor_count < 1:
        raise ValueError("neighbor_count must be >= 1")
    m = members.size
    if m == 1:
        return CentralityReport(np.zeros(1), 0.0, members.copy())

    sub = dist.values[np.ix_(members, members)].copy()
    mean_dist = sub.sum() / (m * (m - 1))
    np.fill_diagonal(sub, np.inf)
    take = min(neighbor_count, m - 1)
    nearest = np.partition(sub, take - 1, axis=1)[:, :take]
    scores = (1.0 / (nearest + mean_dist)).sum(axis=1)
    threshold = float(scores.mean())
    chosen = scores > threshold
    if not chosen.any():
        chosen[int(np.argmax(scores))] = True
    return CentralityReport(scores, threshold, members[chosen])


def decay_probability(config: RefinementConfig, epoch: int) -> float:
    """Discard probability at ``epoch`` under the configured decay schedule."""
    total = config.total_epochs
    if total is None:
        raise ValueError("total_epochs is not set on this config")
    if not 0 <= epoch < total:
        raise ValueError(f"epoch must lie in [0, {total}), got {epoch}")
    if config.schedule == "none":
        return config.p0
    if total == 1:
        return config.p0
    if config.schedule == "linear":
        p = config.p0 * (1.0 - epoch / (total - 1))
    elif config.schedule == "exponential":
        p = config.p0 * config.exp_gamma**epoch
    else:
        p = config.p0 * 0.5 * (1.0 + math.cos(math.pi * epoch / (total - 1)))
    return min(max(p, 0.0), 1.0)


def discard_draws(seed: int, epoch: int, n: int) -> np.ndarray:
    """Per-item uniform draws keyed by (seed, epoch), independent of visit order."""
    return np.random.default_rng([int(seed), int(epoch)]).random(n)


def refine_labels(
    global_assignment: ClusterAssignment,
    local_assignments: Mapping[int, tuple[np.ndarray, ClusterAssignment]],
    dist: DistanceMatrix,
    camera_ids: np.ndarray,
    config: RefinementConfig,
    p: float,
    draws: Optional[np.ndarray] = None,
) -> RefinedAssignment:
    """Discard unvouched same-camera members of every global cluster.

    ``local_assignments`` maps each camera id to its item indices and the
    per-camera clustering over them. Within a global cluster, a member is
    vouched for when some information node of its own camera shares its local
    cluster; unvouched members of such cameras are dropped with probability
    ``p`` using the per-item ``draws`` (required when 0 < p < 1). Members of
    cameras without an information node are always kept, as are the
    information nodes themselves.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must lie in [0, 1], got {p}")
    camera_ids = np.asarray(camera_ids, dtype=np.int64)
    n = global_assignment.n
    if camera_ids.shape != (n,):
        raise ValueError("camera_ids length must match the global assignment")
    if dist.n != n:
        raise ValueError("distance matrix must cover all items")
    if draws is None:
        if 0.0 < p < 1.0:
            raise ValueError("draws are required when 0 < p < 1")
        draws = np.zeros(n)
    draws = np.asarray(draws, dtype=np.float64)
    if draws.shape != (n,):
        raise ValueError("draws length must match the global assignment")

    local_label = np.full(n, -1, dtype=np.int64)
    for cam in np.unique(camera_ids):
        if int(cam) not in local_assignments:
            raise ValueError(f"camera {int(cam)} missing from local assignments")
        indices, assignment = local_assignments[int(cam)]
        indices = np.asarray(indices, dtype=np.int64)
        if indices.size != assignment.n or not np.all(camera_ids[indices] == cam):
            raise ValueError(f"local assignment for camera {int(cam)} does not match its items")
        local_label[indices] = assignment.labels

    labels = global_assignment.labels.copy()
    order = np.argsort(labels, kind="stable")
    bounds = np.searchsorted(labels[order], np.arange(global_assignment.num_clusters + 1))
    for g in range(global_assignment.num_clusters):
        members = order[bounds[g] : bounds[g + 1]]
        report = centrality_scores(members, dist, config.neighbor_count)
        info = report.information_nodes
        info_cams = camera_ids[info]
        for cam in np.unique(info_cams):
            vouching = np.unique(local_label[info[info_cams == cam]])
            same_cam = members[camera_ids[members] == cam]
            candidates = same_cam[~np.isin(local_label[same_cam], vouching)]
            if p > 0.0 and candidates.size:
                labels[candidates[draws[candidates] < p]] = DISCARDED
    kept = int(np.count_nonzero(labels != DISCARDED))
    return RefinedAssignment(labels, global_assignment.num_clusters, kept, n - kept)


@dataclass(frozen=True)
class RefinementStats:
    """Bookkeeping of how many items an epoch's refinement dropped, and where."""

    kept_count: int
    discarded_count: int
    discarded_per_camera: np.ndarray
    discarded_per_cluster: np.ndarray


def refinement_stats(
    refined: RefinedAssignment,
    global_assignment: ClusterAssignment,
    camera_ids: np.ndarray,
) -> RefinementStats:
    """Count discarded items per camera and per global cluster."""
    camera_ids = np.asarray(camera_ids, dtype=np.int64)
    if refined.labels.size != global_assignment.n or camera_ids.size != global_assignment.n:
        raise ValueError("refined, global, and camera arrays must cover the same items")
    dropped = refined.labels == DISCARDED
    per_camera = np.bincount(camera_ids[dropped], minlength=int(camera_ids.max()) + 1)
    per_cluster = np.bincount(
        global_assignment.labels[dropped], minlength=global_assignment.num_clusters
    )
    return RefinementStats(
        refined.kept_count, refined.discarded_count, per_camera, per_cluster
    )
