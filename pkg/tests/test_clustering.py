"""DBSCAN against a brute-force eps-graph oracle."""

import networkx as nx
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xmk.clustering import cluster_representative_indices, dbscan_cluster, dbscan_labels
from xmk.detection import Keypoint


def oracle_labels(points: np.ndarray, eps: float, min_samples: int) -> np.ndarray:
    """Independent DBSCAN: eps-graph density components via networkx."""
    n = len(points)
    d2 = ((points[:, None, :] - points[None, :, :]) ** 2).sum(axis=2)
    adj = d2 <= eps * eps
    core = adj.sum(axis=1) >= min_samples
    g = nx.Graph()
    g.add_nodes_from(np.nonzero(core)[0].tolist())
    for i in range(n):
        if not core[i]:
            continue
        for j in range(i + 1, n):
            if core[j] and adj[i, j]:
                g.add_edge(i, j)
    labels = np.full(n, -1, dtype=np.int64)
    comps = [sorted(c) for c in nx.connected_components(g)]
    comps.sort(key=lambda c: c[0])  # cluster ids in first-core-index order
    for cid, comp in enumerate(comps):
        for i in comp:
            labels[i] = cid
    core_idx = np.nonzero(core)[0]
    for i in range(n):
        if core[i]:
            continue
        reachable = core_idx[adj[i, core_idx]]
        if reachable.size:
            labels[i] = labels[reachable[np.argmin(d2[i, reachable])]]
    return labels


def kp(x, y, response=1.0):
    return Keypoint(x=float(x), y=float(y), slice_index=0, response=float(response))


class TestExamples:
    def test_two_close_points_merge(self):
        reps = dbscan_cluster([kp(0, 0, 1.0), kp(3, 0, 2.0)], eps_px=5, min_samples=1)
        assert len(reps) == 1
        assert reps[0].response == 2.0  # highest response wins

    def test_two_far_points_stay(self):
        reps = dbscan_cluster([kp(0, 0), kp(11, 0)], eps_px=5, min_samples=1)
        assert len(reps) == 2

    def test_chain_connects_by_density(self):
        points = [kp(4 * i, 0, response=i) for i in range(11)]  # 40 px span, 4 px spacing
        labels = dbscan_labels(np.array([[p.x, p.y] for p in points]), eps=5, min_samples=1)
        oracle = oracle_labels(np.array([[p.x, p.y] for p in points]), eps=5, min_samples=1)
        assert np.array_equal(labels, oracle)
        assert len(dbscan_cluster(points, eps_px=5, min_samples=1)) == 1

    def test_empty_input(self):
        assert dbscan_cluster([], eps_px=5, min_samples=1) == []

    def test_noise_discarded_when_min_samples_high(self):
        points = [kp(0, 0), kp(1, 0), kp(0, 1), kp(50, 50)]
        reps = dbscan_cluster(points, eps_px=5, min_samples=3)
        assert len(reps) == 1  # lone point is noise, dense trio forms the cluster

    def test_boundary_distance_counts(self):
        # exactly eps apart -> same neighborhood
        labels = dbscan_labels(np.array([[0.0, 0.0], [5.0, 0.0]]), eps=5, min_samples=1)
        assert labels[0] == labels[1]


class TestOracle:
    @given(st.integers(0, 10_000), st.sampled_from([1, 2, 3, 5]))
    @settings(max_examples=40, deadline=None)
    def test_matches_bruteforce_components(self, seed, min_samples):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 60))
        pts = rng.uniform(0, 60, size=(n, 2))
        ours = dbscan_labels(pts, eps=5.0, min_samples=min_samples)
        oracle = oracle_labels(pts, eps=5.0, min_samples=min_samples)
        assert np.array_equal(ours, oracle)

    def test_representatives_separated_or_distinct_components(self, rng):
        for _ in range(20):
            n = int(rng.integers(2, 120))
            pts = rng.uniform(0, 80, size=(n, 2))
            points = [kp(x, y, response=rng.random()) for x, y in pts]
            labels = dbscan_labels(pts, eps=5.0, min_samples=1)
            reps = cluster_representative_indices(points, eps_px=5.0, min_samples=1)
            for a in range(len(reps)):
                for b in range(a + 1, len(reps)):
                    i, j = reps[a], reps[b]
                    d = np.hypot(points[i].x - points[j].x, points[i].y - points[j].y)
                    assert d > 5.0 or labels[i] != labels[j]

    def test_representative_is_highest_response(self, rng):
        pts = rng.uniform(0, 10, size=(15, 2))  # one dense blob
        points = [kp(x, y, response=rng.random()) for x, y in pts]
        reps = dbscan_cluster(points, eps_px=20.0, min_samples=1)
        assert len(reps) == 1
        assert reps[0].response == max(p.response for p in points)
