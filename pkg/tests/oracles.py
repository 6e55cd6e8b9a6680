"""Independent brute-force reference implementations used by the tests.

These deliberately recompute everything from raw inputs (member lists, raw
distance entries, full enumeration) rather than sharing any code path with
the library.
"""

import numpy as np


def naive_agglomerative(raw: np.ndarray, linkage: str) -> dict[int, np.ndarray]:
    """Greedy closest-pair merging, recomputing linkage distances from the raw
    matrix at every step. Returns the partition (label array) at every k."""
    n = raw.shape[0]
    agg = {"average": np.mean, "complete": np.max, "single": np.min}[linkage]
    clusters = {i: [i] for i in range(n)}  # key = smallest member index
    ref = np.full((n, n), np.inf)
    for a in clusters:
        for b in clusters:
            if a < b:
                ref[a, b] = raw[a, b]
    partitions = {n: _labels_of(clusters, n)}
    for step in range(n - 1):
        flat = int(np.argmin(ref))  # row-major scan: smallest a, then smallest b
        a, b = divmod(flat, n)
        clusters[a] = sorted(clusters[a] + clusters[b])
        del clusters[b]
        ref[b, :] = np.inf
        ref[:, b] = np.inf
        for c in clusters:
            if c == a:
                continue
            lo, hi = min(a, c), max(a, c)
            ref[lo, hi] = agg(raw[np.ix_(clusters[a], clusters[c])])
        partitions[n - step - 1] = _labels_of(clusters, n)
    return partitions


def _labels_of(clusters: dict[int, list[int]], n: int) -> np.ndarray:
    labels = np.empty(n, dtype=np.int64)
    for new_id, key in enumerate(sorted(clusters)):
        labels[clusters[key]] = new_id
    return labels


def brute_centrality(raw: np.ndarray, members, neighbor_count: int):
    """Direct evaluation of the in-cluster centrality score, threshold, and
    information-node set (returned as a set of original item indices)."""
    members = list(members)
    m = len(members)
    if m == 1:
        return [0.0], 0.0, {members[0]}
    total, count = 0.0, 0
    for i in members:
        for j in members:
            if i != j:
                total += raw[i, j]
                count += 1
    mean_dist = total / count
    take = min(neighbor_count, m - 1)
    scores = []
    for i in members:
        gaps = sorted(raw[i, j] for j in members if j != i)
        scores.append(sum(1.0 / (g + mean_dist) for g in gaps[:take]))
    threshold = sum(scores) / m
    chosen = {members[idx] for idx, s in enumerate(scores) if s > threshold}
    if not chosen:
        best = max(range(m), key=lambda idx: (scores[idx], -idx))
        chosen = {members[best]}
    return scores, threshold, chosen


def brute_refined_keep_set(global_labels, camera_ids, local_labels, info_by_cluster):
    """Set-algebra evaluation of refinement at p=1: per cluster, keep the
    union over vouching information nodes of their local clusters intersected
    with the cluster's same-camera part, plus all members of cameras that
    contributed no information node."""
    n = len(global_labels)
    kept = set()
    for g in sorted(set(int(x) for x in global_labels)):
        members = [i for i in range(n) if global_labels[i] == g]
        info = info_by_cluster[g]
        info_cams = {int(camera_ids[i]) for i in info}
        for cam in {int(camera_ids[i]) for i in members}:
            same_cam = [j for j in members if camera_ids[j] == cam]
            if cam not in info_cams:
                kept.update(same_cam)
                continue
            for i in info:
                if camera_ids[i] == cam:
                    kept.update(j for j in same_cam if local_labels[j] == local_labels[i])
    return kept


def brute_pair_metrics(pred, gt):
    """O(n^2) pair enumeration of precision, recall, F-score, and expansion."""
    kept = [i for i in range(len(pred)) if pred[i] >= 0]
    same_pred = same_gt = both = 0
    for ai in range(len(kept)):
        for bi in range(ai + 1, len(kept)):
            a, b = kept[ai], kept[bi]
            sp = pred[a] == pred[b]
            sg = gt[a] == gt[b]
            same_pred += sp
            same_gt += sg
            both += sp and sg
    precision = both / same_pred if same_pred else 1.0
    recall = both / same_gt if same_gt else 1.0
    f_score = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    identities = {gt[i] for i in kept}
    if identities:
        expansion = sum(
            len({pred[i] for i in kept if gt[i] == ident}) for ident in identities
        ) / len(identities)
    else:
        expansion = 1.0
    return precision, recall, f_score, expansion


def brute_average_precision(sims_row, q_id, q_cam, g_ids, g_cams):
    """Full-enumeration AP and first-hit rank for one query; None when the
    query has no valid match."""
    order = sorted(range(len(sims_row)), key=lambda j: (-sims_row[j], j))
    hits = []
    for j in order:
        if g_ids[j] == q_id and g_cams[j] == q_cam:
            continue  # filtered: same identity seen by the same camera
        hits.append(g_ids[j] == q_id)
    total = sum(hits)
    if total == 0:
        return None, None
    ap, seen = 0.0, 0
    first = None
    for rank, hit in enumerate(hits):
        if hit:
            seen += 1
            ap += seen / (rank + 1)
            if first is None:
                first = rank
    return ap / total, first


def finite_difference_grad(loss_fn, q, step=1e-6):
    """Central finite differences of a scalar function of a vector."""
    grad = np.zeros_like(q, dtype=np.float64)
    for d in range(q.size):
        hi = q.copy()
        lo = q.copy()
        hi[d] += step
        lo[d] -= step
        grad[d] = (loss_fn(hi) - loss_fn(lo)) / (2 * step)
    return grad
