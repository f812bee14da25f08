"""Density clustering of keypoints with a deterministic DBSCAN.

Core points have at least min_samples neighbors within eps (counting
themselves); clusters are the connected components of the core-core eps
graph; border points attach to the cluster of their nearest core point, ties
broken by lower core index. That border rule replaces classic DBSCAN's
visit-order dependence with a reproducible assignment.
"""

from __future__ import annotations

import numpy as np

from xmk.detection import Keypoint

NOISE = -1


def dbscan_labels(points: np.ndarray, eps: float, min_samples: int) -> np.ndarray:
    """Cluster (n, 2) points; returns one label per point, NOISE (-1) for noise."""
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    labels = np.full(n, NOISE, dtype=np.int64)
    if n == 0:
        return labels
    d2 = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
    adj = d2 <= eps * eps  # includes self
    core = adj.sum(axis=1) >= min_samples

    cluster = 0
    for start in range(n):
        if not core[start] or labels[start] != NOISE:
            continue
        stack = [start]
        labels[start] = cluster
        while stack:
            i = stack.pop()
            for j in np.nonzero(adj[i] & core)[0]:
                if labels[j] == NOISE:
                    labels[j] = cluster
                    stack.append(int(j))
        cluster += 1

    core_idx = np.nonzero(core)[0]
    for i in range(n):
        if core[i] or labels[i] != NOISE:
            continue
        reachable = core_idx[adj[i, core_idx]]
        if reachable.size == 0:
            continue  # stays noise
        nearest = reachable[np.argmin(d2[i, reachable])]  # argmin ties -> lowest core index
        labels[i] = labels[nearest]
    return labels


def cluster_representative_indices(
    points: list[Keypoint],
    eps_px: float = 5.0,
    min_samples: int = 1,
) -> list[int]:
    """Indices into points of each cluster's highest-response member.

    Ties on response go to the lowest index. Noise points are dropped, which
    with min_samples=1 never happens (every point is core).
    """
    if not points:
        return []
    xy = np.array([[k.x, k.y] for k in points])
    labels = dbscan_labels(xy, eps_px, min_samples)
    reps: list[int] = []
    n_clusters = int(labels.max()) + 1 if labels.max() >= 0 else 0
    for cluster in range(n_clusters):
        members = np.nonzero(labels == cluster)[0]
        best = members[np.argmax([points[i].response for i in members])]
        reps.append(int(best))
    return reps


def dbscan_cluster(
    points: list[Keypoint],
    eps_px: float = 5.0,
    min_samples: int = 1,
) -> list[Keypoint]:
    """Reduce each cluster to its highest-response member keypoint."""
    return [points[i] for i in cluster_representative_indices(points, eps_px, min_samples)]
