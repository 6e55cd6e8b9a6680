"""Pairwise cosine distances and agglomerative hierarchical clustering.

The clusterer merges the closest pair of clusters until a target count is
reached. Cluster indices are the smallest original item index of their
members, and distance ties are broken lexicographically on (index a, index b)
so results are fully deterministic.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

LINKAGES = ("average", "complete", "single")


@dataclass(frozen=True)
class DistanceMatrix:
    """Symmetric non-negative cosine distances with a zero diagonal."""

    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", vals)
        if vals.ndim != 2 or vals.shape[0] != vals.shape[1]:
            raise ValueError(f"distance matrix must be square, got shape {vals.shape}")
        if vals.shape[0] < 1:
            raise ValueError("distance matrix must cover at least one item")
        if np.abs(vals - vals.T).max(initial=0.0) > 1e-9:
            raise ValueError("distance matrix is not symmetric")
        if np.any(np.diagonal(vals) != 0.0):
            raise ValueError("distance matrix diagonal must be exactly zero")
        if vals.min() < 0.0 or vals.max() > 2.0:
            raise ValueError("cosine distances must lie in [0, 2]")
        self.values.setflags(write=False)

    @property
    def n(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class ClusterAssignment:
    """A partition of item indices into ``num_clusters`` non-empty clusters."""

    labels: np.ndarray
    num_clusters: int

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        object.__setattr__(self, "labels", labels)
        if labels.ndim != 1 or labels.size < 1:
            raise ValueError("labels must be a non-empty 1-D array")
        if self.num_clusters < 1:
            raise ValueError("num_clusters must be >= 1")
        if labels.min() < 0 or labels.max() >= self.num_clusters:
            raise ValueError(f"cluster ids must lie in [0, {self.num_clusters})")
        if np.unique(labels).size != self.num_clusters:
            raise ValueError("every cluster id must be non-empty")
        self.labels.setflags(write=False)

    @property
    def n(self) -> int:
        return self.labels.size


def pairwise_distance(features: np.ndarray) -> DistanceMatrix:
    """Cosine distance matrix 1 - <row_i, row_j> over length-normalized rows."""
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2:
        raise ValueError(f"expected a 2-D feature matrix, got shape {feats.shape}")
    norms = np.linalg.norm(feats, axis=1)
    off = np.abs(norms - 1.0)
    if off.max(initial=0.0) > 1e-6:
        i = int(np.argmax(off))
        raise ValueError(f"row {i} is not length-normalized (norm {norms[i]:.9f})")
    vals = 1.0 - feats @ feats.T
    vals = np.clip(vals, 0.0, 2.0)
    vals = (vals + vals.T) / 2.0
    np.fill_diagonal(vals, 0.0)
    return DistanceMatrix(vals)


def merge_sequence(dist: DistanceMatrix, linkage: str = "average") -> list[tuple[int, int]]:
    """The n-1 greedy merges (a, b), a < b, of the closest cluster pair.

    Cluster ``b`` is absorbed into ``a``; the surviving cluster keeps index
    ``a`` (its smallest member). Linkage distances follow the Lance-Williams
    recurrences for average/complete/single linkage.
    """
    if linkage not in LINKAGES:
        raise ValueError(f"unknown linkage {linkage!r} (expected one of {LINKAGES})")
    n = dist.n
    if n == 1:
        return []
    work = dist.values.copy()
    np.fill_diagonal(work, np.inf)
    sizes = np.ones(n)
    active = np.ones(n, dtype=bool)
    nn_dist = work.min(axis=1)
    nn_idx = work.argmin(axis=1)

    merges: list[tuple[int, int]] = []
    for _ in range(n - 1):
        a = int(np.argmin(nn_dist))
        b = int(nn_idx[a])
        if b < a:
            a, b = b, a
        merges.append((a, b))

        others = active.copy()
        others[a] = others[b] = False
        row_a, row_b = work[a], work[b]
        if linkage == "average":
            merged = (sizes[a] * row_a + sizes[b] * row_b) / (sizes[a] + sizes[b])
        elif linkage == "complete":
            merged = np.maximum(row_a, row_b)
        else:
            merged = np.minimum(row_a, row_b)
        work[a, others] = merged[others]
        work[others, a] = merged[others]
        work[a, a] = np.inf
        work[b, :] = np.inf
        work[:, b] = np.inf
        sizes[a] += sizes[b]
        active[b] = False
        nn_dist[b] = np.inf

        if not others.any():
            break
        # rows whose cached nearest neighbor was touched need a rescan
        stale = np.flatnonzero(active & ((nn_idx == a) | (nn_idx == b)))
        for i in stale:
            nn_idx[i] = int(np.argmin(work[i]))
            nn_dist[i] = work[i, nn_idx[i]]
        nn_idx[a] = int(np.argmin(work[a]))
        nn_dist[a] = work[a, nn_idx[a]]
        # the updated column may tie or (through rounding) undercut a cached
        # minimum; keep nn_idx pointing at the smallest attaining index
        col = work[others, a]
        cached = nn_dist[others]
        better = (col < cached) | ((col == cached) & (a < nn_idx[others]))
        if better.any():
            rows = np.flatnonzero(others)[better]
            nn_dist[rows] = work[rows, a]
            nn_idx[rows] = a
    return merges


def labels_from_merges(n: int, merges: list[tuple[int, int]], k: int) -> np.ndarray:
    """Cluster labels after applying the first n-k merges, numbered 0..k-1.

    Labels are assigned to clusters in order of their smallest member index.
    """
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}], got {k}")
    reps = np.arange(n)
    for a, b in merges[: n - k]:
        reps[reps == b] = a
    _, labels = np.unique(reps, return_inverse=True)
    return labels.astype(np.int64)


def agglomerative_cluster(
    dist: DistanceMatrix, k: int, linkage: str = "average"
) -> ClusterAssignment:
    """Cluster to exactly ``k`` clusters by n-k greedy closest-pair merges."""
    if not 1 <= k <= dist.n:
        raise ValueError(f"k must lie in [1, {dist.n}], got {k}")
    merges = merge_sequence(dist, linkage)
    return ClusterAssignment(labels_from_merges(dist.n, merges, k), k)


def cluster_centroids(features, assignment: ClusterAssignment) -> np.ndarray:
    """Length-normalized mean feature vector of each cluster (K x D, float64).

    ``features`` may be a matrix or any object with a ``features`` attribute.
    If a cluster's mean vector degenerates to zero, the member row closest to
    the unnormalized mean (lowest index on ties) is used instead.
    """
    feats = np.asarray(getattr(features, "features", features), dtype=np.float64)
    if feats.shape[0] != assignment.n:
        raise ValueError(
            f"assignment covers {assignment.n} items but features has {feats.shape[0]} rows"
        )
    k = assignment.num_clusters
    sums = np.zeros((k, feats.shape[1]))
    np.add.at(sums, assignment.labels, feats)
    counts = np.bincount(assignment.labels, minlength=k)
    means = sums / counts[:, None]
    norms = np.linalg.norm(means, axis=1)
    out = np.empty_like(means)
    for c in range(k):
        if norms[c] > 1e-12:
            out[c] = means[c] / norms[c]
        else:
            members = np.flatnonzero(assignment.labels == c)
            gaps = np.linalg.norm(feats[members] - means[c], axis=1)
            row = feats[members[int(np.argmin(gaps))]]
            out[c] = row / np.linalg.norm(row)
    return out


def save_assignment(assignment, path) -> None:
    """Write ``index,cluster`` rows; discarded items (if any) carry -1."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "cluster"])
        for i, lab in enumerate(assignment.labels):
            writer.writerow([str(i), str(int(lab))])


def load_assignment(path) -> np.ndarray:
    """Read an ``index,cluster`` CSV back into a label array.

    Returns raw labels; -1 entries (discarded items) are preserved.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["index", "cluster"]:
            raise ValueError(f"{path}: expected header 'index,cluster'")
        pairs = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise ValueError(f"{path}: line {lineno}: expected 2 columns")
            pairs.append((int(row[0]), int(row[1])))
    if not pairs:
        raise ValueError(f"{path}: no data rows")
    pairs.sort()
    indices = np.array([p[0] for p in pairs])
    if not np.array_equal(indices, np.arange(len(pairs))):
        raise ValueError(f"{path}: indices must cover 0..N-1 exactly")
    return np.array([p[1] for p in pairs], dtype=np.int64)
