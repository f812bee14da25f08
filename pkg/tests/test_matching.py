"""Cosine KNN exactness, match filtering, and slice matching."""

import numpy as np
import pytest
from scipy.spatial.distance import cdist

from xmk.detection import DetectorConfig, Keypoint
from xmk.matching import (
    MatchConfig,
    MatchingError,
    MatchSet,
    describe_keypoints,
    filter_matches,
    knn_cosine,
    load_match_set,
    match_descriptors,
    match_slices,
    save_match_set,
)
from xmk.volume import Slice, get_slice


def kps_for(n):
    return [Keypoint(x=40.0 + i, y=40.0, slice_index=0, response=1.0) for i in range(n)]


def oracle_knn(query, index, k):
    sims = 1.0 - cdist(query, index, metric="cosine")
    order = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    return order, np.take_along_axis(sims, order, axis=1)


class TestKnnCosine:
    def test_identical_vector_first(self, rng):
        index = rng.normal(size=(10, 8))
        ids, sims = knn_cosine(index[3:4], index, k=2)
        assert ids[0, 0] == 3
        assert sims[0, 0] == pytest.approx(1.0, abs=1e-12)

    def test_orthogonal_zero(self):
        q = np.array([[1.0, 0.0]])
        x = np.array([[0.0, 1.0], [1.0, 0.0]])
        ids, sims = knn_cosine(q, x, k=2)
        assert sims[0, 1] == pytest.approx(0.0, abs=1e-12)

    def test_matches_bruteforce_50x80(self, rng):
        q = rng.normal(size=(50, 16))
        x = rng.normal(size=(80, 16))
        ids, sims = knn_cosine(q, x, k=2)
        oid, osim = oracle_knn(q, x, 2)
        assert np.array_equal(ids, oid)
        assert np.allclose(sims, osim, atol=1e-9)

    def test_tie_breaks_to_lower_index(self):
        v = np.array([1.0, 1.0])
        # power-of-two scales normalize to bit-identical rows: exact ties
        index = np.stack([v * 2.0, v * 4.0, v])
        ids, sims = knn_cosine(v[None], index, k=3)
        assert sims[0, 0] == sims[0, 1] == sims[0, 2]
        assert ids[0].tolist() == [0, 1, 2]

    def test_scale_invariance(self, rng):
        q = rng.normal(size=(5, 8))
        x = rng.normal(size=(9, 8))
        ids1, _ = knn_cosine(q, x, k=2)
        ids2, _ = knn_cosine(q * 7.0, x * 0.01, k=2)
        assert np.array_equal(ids1, ids2)

    def test_empty_index_rejected(self):
        with pytest.raises(MatchingError):
            knn_cosine(np.ones((1, 4)), np.zeros((0, 4)), k=1)

    def test_k_too_large_rejected(self, rng):
        with pytest.raises(MatchingError):
            knn_cosine(rng.normal(size=(2, 4)), rng.normal(size=(3, 4)), k=4)


class TestFilterMatches:
    def test_ratio_example_passes(self):
        ids = np.array([[0, 1]])
        sims = np.array([[0.95, 0.5]])  # (1-0.95)/(1-0.5) = 0.1 <= 0.9
        ms = filter_matches(ids, sims, MatchConfig(), kps_for(1), kps_for(2))
        assert len(ms) == 1
        assert ms.flags[0] == "ok"

    def test_similarity_floor(self):
        ids = np.array([[0, 1]])
        sims = np.array([[0.6, 0.1]])
        ms = filter_matches(ids, sims, MatchConfig(min_similarity=0.7), kps_for(1), kps_for(2))
        assert len(ms) == 0
        assert ms.flags[0] == "similarity"

    def test_ratio_rejection(self):
        ids = np.array([[0, 1]])
        sims = np.array([[0.95, 0.949]])  # nearly tied neighbors
        ms = filter_matches(ids, sims, MatchConfig(), kps_for(1), kps_for(2))
        assert ms.flags[0] == "ratio"

    def test_ambiguous_perfect_pair_rejected(self):
        ids = np.array([[0, 1]])
        sims = np.array([[1.0, 1.0]])
        ms = filter_matches(ids, sims, MatchConfig(), kps_for(1), kps_for(2))
        assert ms.flags[0] == "ratio"

    def test_uniqueness_keeps_higher_similarity(self):
        ids = np.array([[0, 1], [0, 1]])
        sims = np.array([[0.90, 0.2], [0.95, 0.2]])
        ms = filter_matches(ids, sims, MatchConfig(), kps_for(2), kps_for(2))
        assert len(ms) == 1
        assert ms.matches[0].mr_id == 1
        assert ms.flags[0] == "uniqueness"

    def test_one_to_one_invariant(self, rng):
        n, m = 40, 25
        ids = np.stack([rng.permutation(m)[:2] for _ in range(n)])
        s1 = rng.uniform(0.7, 1.0, size=n)
        s2 = s1 - rng.uniform(0.2, 0.5, size=n)
        sims = np.stack([s1, s2], axis=1)
        ms = filter_matches(ids, sims, MatchConfig(min_similarity=0.0), kps_for(n), kps_for(m))
        mr = [mt.mr_id for mt in ms.matches]
        us = [mt.us_id for mt in ms.matches]
        assert len(set(mr)) == len(mr)
        assert len(set(us)) == len(us)
        sims_sorted = [mt.similarity for mt in ms.matches]
        assert sims_sorted == sorted(sims_sorted, reverse=True)

    def test_tightening_filters_monotone(self, rng):
        n, m = 30, 30
        ids = np.stack([rng.permutation(m)[:2] for _ in range(n)])
        s1 = rng.uniform(0.5, 1.0, size=n)
        sims = np.stack([s1, s1 - rng.uniform(0.01, 0.4, size=n)], axis=1)
        base = len(filter_matches(ids, sims, MatchConfig(min_similarity=0.5, ratio_threshold=0.9),
                                  kps_for(n), kps_for(m)))
        tighter_sim = len(filter_matches(ids, sims, MatchConfig(min_similarity=0.8, ratio_threshold=0.9),
                                         kps_for(n), kps_for(m)))
        tighter_ratio = len(filter_matches(ids, sims, MatchConfig(min_similarity=0.5, ratio_threshold=0.5),
                                           kps_for(n), kps_for(m)))
        assert tighter_sim <= base
        assert tighter_ratio <= base

    def test_counts_add_up(self, rng):
        n, m = 20, 15
        ids = np.stack([rng.permutation(m)[:2] for _ in range(n)])
        sims = np.sort(rng.uniform(-1, 1, size=(n, 2)), axis=1)[:, ::-1]
        ms = filter_matches(ids, sims, MatchConfig(), kps_for(n), kps_for(m))
        c = ms.counts
        assert c["kept"] + c["rejected_similarity"] + c["rejected_ratio"] + c["rejected_uniqueness"] == n


class TestMatchSlices:
    def test_self_match_near_identity(self, small_phantom):
        from xmk.dataset import NormStats
        from xmk.model import new_descriptor_net

        _, _, rend = small_phantom
        s = get_slice(rend["T2"], 5)
        net = new_descriptor_net(descriptor_dim=32, seed=2)
        stats = NormStats(mean=0.0, std=1.0, n_patches=1)
        det = DetectorConfig(max_keypoints=256, nms_radius_px=2, response_threshold=3e-3, border_margin_px=32)
        ms = match_slices(s, s, net, stats, det, MatchConfig())
        assert len(ms) >= 0.95 * len(ms.mr_keypoints)
        for m in ms.matches:
            a = ms.mr_keypoints[m.mr_id]
            b = ms.us_keypoints[m.us_id]
            assert np.hypot(a.x - b.x, a.y - b.y) <= 1.0

    def test_featureless_us_gives_empty_set(self, small_phantom):
        from xmk.dataset import NormStats
        from xmk.model import new_descriptor_net

        _, _, rend = small_phantom
        s = get_slice(rend["T2"], 5)
        flat = Slice(pixels=np.zeros_like(s.pixels), volume_id="SynUS", slice_index=5)
        net = new_descriptor_net(descriptor_dim=32, seed=2)
        ms = match_slices(s, flat, net, NormStats(0.0, 1.0, 1),
                          DetectorConfig(max_keypoints=64, nms_radius_px=2,
                                         response_threshold=3e-3, border_margin_px=32),
                          MatchConfig())
        assert len(ms) == 0

    def test_shape_mismatch_rejected(self, small_phantom):
        from xmk.dataset import NormStats
        from xmk.model import new_descriptor_net

        _, _, rend = small_phantom
        s = get_slice(rend["T2"], 0)
        other = Slice(pixels=np.zeros((64, 64), dtype=np.float32), volume_id="US", slice_index=0)
        net = new_descriptor_net(descriptor_dim=32, seed=2)
        with pytest.raises(MatchingError):
            match_slices(s, other, net, NormStats(0.0, 1.0, 1),
                         DetectorConfig(), MatchConfig())


class TestDescribeKeypoints:
    def test_margin_violations_dropped_with_warning(self, small_phantom):
        from xmk.dataset import NormStats
        from xmk.model import new_descriptor_net

        _, _, rend = small_phantom
        s = get_slice(rend["T2"], 4)
        net = new_descriptor_net(descriptor_dim=32, seed=2)
        kps = [Keypoint(x=5.0, y=5.0, slice_index=4, response=1.0),
               Keypoint(x=64.0, y=64.0, slice_index=4, response=1.0)]
        with pytest.warns(UserWarning, match="border"):
            kept, desc = describe_keypoints(s, kps, net, NormStats(0.0, 1.0, 1))
        assert len(kept) == 1
        assert desc.shape == (1, 32)

    def test_empty_keypoints(self, small_phantom):
        from xmk.dataset import NormStats
        from xmk.model import new_descriptor_net

        _, _, rend = small_phantom
        s = get_slice(rend["T2"], 4)
        net = new_descriptor_net(descriptor_dim=32, seed=2)
        kept, desc = describe_keypoints(s, [], net, NormStats(0.0, 1.0, 1))
        assert kept == [] and desc.shape == (0, 32)


class TestMatchSetIO:
    def test_roundtrip(self, tmp_path, rng):
        n, m = 6, 8
        ids = np.stack([rng.permutation(m)[:2] for _ in range(n)])
        sims = np.sort(rng.uniform(0.5, 1.0, size=(n, 2)), axis=1)[:, ::-1]
        ms = filter_matches(ids, sims, MatchConfig(min_similarity=0.5), kps_for(n), kps_for(m))
        save_match_set(ms, tmp_path / "ms.json")
        loaded = load_match_set(tmp_path / "ms.json")
        assert loaded.matches == ms.matches
        assert loaded.mr_keypoints == ms.mr_keypoints
        assert loaded.us_keypoints == ms.us_keypoints
        assert loaded.counts == ms.counts

    def test_one_to_one_enforced_on_load(self, tmp_path):
        bad = {
            "config": {}, "flags": [],
            "mr_keypoints": [{"x": 1.0, "y": 1.0, "slice_index": 0, "response": 1.0, "source": "MR"}],
            "us_keypoints": [{"x": 1.0, "y": 1.0, "slice_index": 0, "response": 1.0, "source": "US"}],
            "matches": [{"mr": 0, "us": 0, "similarity": 0.9}, {"mr": 0, "us": 0, "similarity": 0.8}],
            "counts": {},
        }
        import json

        (tmp_path / "bad.json").write_text(json.dumps(bad))
        with pytest.raises(MatchingError):
            load_match_set(tmp_path / "bad.json")
