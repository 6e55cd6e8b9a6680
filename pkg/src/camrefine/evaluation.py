"""Clustering-quality and retrieval metrics.

Pair metrics treat a clustering as the set of unordered same-cluster item
pairs; items labeled -1 (discarded) are excluded from both the predicted and
ground-truth pair universes. Retrieval follows the standard cross-camera
protocol: gallery entries sharing both identity and camera with the query are
filtered out before ranking is scored.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .embeddings import EmbeddingSet, l2_normalize


@dataclass(frozen=True)
class ClusterQuality:
    """Pairwise precision/recall/F-score plus identity expansion."""

    pair_precision: float
    pair_recall: float
    f_score: float
    expansion: float


@dataclass(frozen=True)
class RetrievalSplit:
    """Query and gallery sets; both must carry ground-truth identities."""

    query: EmbeddingSet
    gallery: EmbeddingSet

    def __post_init__(self):
        if self.query.identities is None or self.gallery.identities is None:
            raise ValueError("retrieval evaluation requires identities on query and gallery")
        if self.query.dim != self.gallery.dim:
            raise ValueError("query and gallery feature widths differ")


@dataclass(frozen=True)
class RetrievalResult:
    """Mean average precision, the CMC curve, and how many queries were skipped."""

    mean_ap: float
    cmc: np.ndarray
    num_queries: int
    excluded_queries: int

    def cmc_at(self, rank: int) -> float:
        """CMC at the given 1-based rank (saturates at the last computed rank)."""
        if rank < 1:
            raise ValueError("rank must be >= 1")
        return float(self.cmc[min(rank, self.cmc.size) - 1])


def _pair_count(counts: np.ndarray) -> int:
    return int((counts.astype(np.int64) * (counts.astype(np.int64) - 1) // 2).sum())


def pairwise_metrics(pred, gt) -> ClusterQuality:
    """Pairwise precision/recall/F against ground-truth identities.

    ``pred`` is a label array (or an object with ``labels``); -1 marks items
    excluded from evaluation. Precision is the fraction of same-cluster pairs
    that are same-identity; recall the fraction of same-identity pairs that
    are same-cluster; either is 1 when its denominator is empty. Expansion is
    the mean number of distinct predicted clusters an identity's kept items
    occupy.
    """
    pred_labels = np.asarray(getattr(pred, "labels", pred), dtype=np.int64)
    gt_labels = np.asarray(gt, dtype=np.int64)
    if pred_labels.shape != gt_labels.shape or pred_labels.ndim != 1:
        raise ValueError(
            f"label arrays must be 1-D and equal length, got {pred_labels.shape} "
            f"and {gt_labels.shape}"
        )
    kept = pred_labels >= 0
    p = pred_labels[kept]
    g = gt_labels[kept]
    if p.size == 0:
        return ClusterQuality(1.0, 1.0, 1.0, 1.0)

    _, p_codes = np.unique(p, return_inverse=True)
    gt_values, g_codes = np.unique(g, return_inverse=True)
    same_pred = _pair_count(np.bincount(p_codes))
    same_gt = _pair_count(np.bincount(g_codes))
    joint = p_codes.astype(np.int64) * gt_values.size + g_codes
    _, joint_counts = np.unique(joint, return_counts=True)
    both = _pair_count(joint_counts)

    precision = both / same_pred if same_pred > 0 else 1.0
    recall = both / same_gt if same_gt > 0 else 1.0
    f_score = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)

    distinct = np.unique(np.stack([g_codes, p_codes], axis=1), axis=0)
    clusters_per_identity = np.bincount(distinct[:, 0], minlength=gt_values.size)
    expansion = float(clusters_per_identity.mean())
    return ClusterQuality(float(precision), float(recall), float(f_score), expansion)


def cmc_map(split: RetrievalSplit, encoder=None) -> RetrievalResult:
    """Rank the gallery per query by cosine similarity and score AP and CMC.

    ``encoder`` (anything with a ``transform`` method) is applied to both
    sides when given; otherwise stored features are compared directly.
    Queries left without a valid match after the same-identity/same-camera
    filter are excluded and counted.
    """
    if encoder is not None:
        qf = encoder.transform(split.query.features)
        gf = encoder.transform(split.gallery.features)
    else:
        qf = l2_normalize(split.query.features)
        gf = l2_normalize(split.gallery.features)
    q_ids, q_cams = split.query.identities, split.query.camera_ids
    g_ids, g_cams = split.gallery.identities, split.gallery.camera_ids

    sims = qf @ gf.T
    # stable sort on negated similarity: ties resolve to the lowest gallery index
    order = np.argsort(-sims, axis=1, kind="stable")

    aps = []
    first_hits = []
    max_valid = 0
    excluded = 0
    for i in range(split.query.n):
        ranked = order[i]
        junk = (g_ids[ranked] == q_ids[i]) & (g_cams[ranked] == q_cams[i])
        hits = (g_ids[ranked] == q_ids[i])[~junk]
        num_rel = int(hits.sum())
        if num_rel == 0:
            excluded += 1
            continue
        max_valid = max(max_valid, hits.size)
        cum_hits = np.cumsum(hits)
        precision_at_hit = cum_hits[hits] / (np.flatnonzero(hits) + 1)
        aps.append(precision_at_hit.mean())
        first_hits.append(int(np.flatnonzero(hits)[0]))

    if not aps:
        raise ValueError("no query has a valid gallery match after filtering")
    hist = np.bincount(np.asarray(first_hits), minlength=max_valid)
    cmc = np.cumsum(hist) / len(aps)
    return RetrievalResult(float(np.mean(aps)), cmc, len(aps), excluded)
