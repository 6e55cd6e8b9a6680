"""Cluster-level contrastive loss and the momentum memory bank.

The bank holds one unit-norm centroid per cluster. A query is scored against
every centroid by a temperature-scaled softmax; the loss is the negative log
probability of the query's own cluster. After each query's gradient step the
bank blends the query into its centroid with momentum ``m`` and re-normalizes.
All math runs in float64.
"""

from __future__ import annotations

import numpy as np


class MemoryBank:
    """K unit-norm cluster centroids plus the loss temperature and update momentum."""

    def __init__(self, centroids: np.ndarray, temperature: float, momentum: float):
        if temperature <= 0.0:
            raise ValueError(f"temperature must be > 0, got {temperature}")
        if not 0.0 <= momentum <= 1.0:
            raise ValueError(f"momentum must lie in [0, 1], got {momentum}")
        cents = np.array(centroids, dtype=np.float64)
        if cents.ndim != 2 or cents.shape[0] < 1:
            raise ValueError(f"centroids must be a non-empty K x D matrix, got {cents.shape}")
        norms = np.linalg.norm(cents, axis=1)
        off = np.abs(norms - 1.0)
        if off.max(initial=0.0) > 1e-6:
            i = int(np.argmax(off))
            raise ValueError(f"centroid row {i} is not unit-norm (norm {norms[i]:.9f})")
        self.centroids = cents / norms[:, None]
        self.temperature = float(temperature)
        self.momentum = float(momentum)

    @property
    def num_clusters(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    def copy(self) -> "MemoryBank":
        return MemoryBank(self.centroids, self.temperature, self.momentum)


def init_memory(
    centroids: np.ndarray, temperature: float = 0.05, momentum: float = 0.2
) -> MemoryBank:
    """Build a memory bank from unit-norm centroid rows."""
    return MemoryBank(centroids, temperature, momentum)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax with max subtraction for numerical stability."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _check_query(q: np.ndarray, positive: int, bank: MemoryBank) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (bank.dim,):
        raise ValueError(f"query must have shape ({bank.dim},), got {q.shape}")
    if not 0 <= positive < bank.num_clusters:
        raise ValueError(f"positive cluster {positive} out of range [0, {bank.num_clusters})")
    norm = np.linalg.norm(q)
    if abs(norm - 1.0) > 1e-3:
        raise ValueError(f"query is not unit-norm (norm {norm:.6f})")
    return q


def cluster_nce_loss(q: np.ndarray, positive: int, bank: MemoryBank) -> float:
    """Softmax cross-entropy of the query against all bank centroids."""
    q = _check_query(q, positive, bank)
    logits = bank.centroids @ q / bank.temperature
    return float(-_log_softmax(logits)[positive])


def cluster_nce_grad(q: np.ndarray, positive: int, bank: MemoryBank) -> np.ndarray:
    """Gradient of :func:`cluster_nce_loss` with respect to the query vector."""
    q = _check_query(q, positive, bank)
    logits = bank.centroids @ q / bank.temperature
    probs = np.exp(_log_softmax(logits))
    probs[positive] -= 1.0
    return (probs @ bank.centroids) / bank.temperature


def batch_nce_loss_grad(
    queries: np.ndarray, positives: np.ndarray, bank: MemoryBank
) -> tuple[np.ndarray, np.ndarray]:
    """Per-query losses and query gradients for a whole batch at once.

    Matches :func:`cluster_nce_loss` / :func:`cluster_nce_grad` row by row.
    """
    qs = np.asarray(queries, dtype=np.float64)
    pos = np.asarray(positives, dtype=np.int64)
    if qs.ndim != 2 or qs.shape[1] != bank.dim:
        raise ValueError(f"queries must be B x {bank.dim}, got {qs.shape}")
    if pos.shape != (qs.shape[0],):
        raise ValueError("positives length must match the batch")
    if pos.size and (pos.min() < 0 or pos.max() >= bank.num_clusters):
        raise ValueError("positive cluster id out of range")
    logits = qs @ bank.centroids.T / bank.temperature
    log_probs = _log_softmax(logits)
    rows = np.arange(qs.shape[0])
    losses = -log_probs[rows, pos]
    probs = np.exp(log_probs)
    probs[rows, pos] -= 1.0
    grads = probs @ bank.centroids / bank.temperature
    return losses, grads


def update_memory(bank: MemoryBank, q: np.ndarray, cluster: int) -> None:
    """Blend the query into its cluster centroid (momentum EMA), re-normalized in place."""
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (bank.dim,):
        raise ValueError(f"query must have shape ({bank.dim},), got {q.shape}")
    if not 0 <= cluster < bank.num_clusters:
        raise ValueError(f"cluster {cluster} out of range [0, {bank.num_clusters})")
    if bank.momentum == 1.0:
        return  # fixed point: the query contributes nothing
    blended = bank.momentum * bank.centroids[cluster] + (1.0 - bank.momentum) * q
    norm = np.linalg.norm(blended)
    if norm < 1e-12:
        return  # degenerate blend (exact cancellation); keep the previous centroid
    bank.centroids[cluster] = blended / norm
