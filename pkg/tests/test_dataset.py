"""Patch extraction, pooled normalization stats, training-set assembly."""

import numpy as np
import pytest

from xmk.dataset import (
    DatasetError,
    NormStats,
    Patch,
    build_training_set,
    compute_norm_stats,
    extract_patch,
    load_training_set,
    normalize_patches,
    save_training_set,
)
from xmk.detection import ConsensusParams, DetectorConfig, Keypoint
from xmk.volume import DegenerateVolumeWarning, Slice, get_slice


def slice_of(pixels, idx=0, vid="MR"):
    return Slice(pixels=np.asarray(pixels, dtype=np.float32), volume_id=vid, slice_index=idx)


def kp(x, y):
    return Keypoint(x=float(x), y=float(y), slice_index=0, response=1.0)


class TestExtractPatch:
    def test_central_window(self, rng):
        img = rng.normal(size=(192, 192)).astype(np.float32)
        p = extract_patch(slice_of(img), kp(96, 96), size=64)
        assert p.pixels.shape == (64, 64)
        assert np.array_equal(p.pixels, img[64:128, 64:128])

    def test_window_start_negative_rejected(self):
        img = np.zeros((192, 192), dtype=np.float32)
        with pytest.raises(DatasetError):
            extract_patch(slice_of(img), kp(31, 96), size=64)

    def test_window_end_overflow_rejected(self):
        img = np.zeros((192, 192), dtype=np.float32)
        with pytest.raises(DatasetError):
            extract_patch(slice_of(img), kp(96, 161), size=64)

    def test_identical_slices_identical_patches(self, rng):
        img = rng.normal(size=(128, 128)).astype(np.float32)
        p1 = extract_patch(slice_of(img.copy()), kp(64, 64))
        p2 = extract_patch(slice_of(img.copy()), kp(64, 64))
        assert np.array_equal(p1.pixels, p2.pixels)

    def test_subpixel_rounding(self, rng):
        img = rng.normal(size=(128, 128)).astype(np.float32)
        a = extract_patch(slice_of(img), kp(64.4, 64.4))
        b = extract_patch(slice_of(img), kp(64.0, 64.0))
        assert np.array_equal(a.pixels, b.pixels)


class TestNormStats:
    def test_all_zero_patches_degenerate(self):
        patches = [Patch(np.zeros((4, 4), dtype=np.float32), "k0", "MR")]
        with pytest.warns(DegenerateVolumeWarning):
            stats = compute_norm_stats(patches)
        assert stats.mean == 0.0
        assert stats.std == 1.0

    def test_symmetric_patch(self):
        px = np.array([[-1.0, 1.0], [1.0, -1.0]], dtype=np.float32)
        stats = compute_norm_stats([Patch(px, "k0", "MR")])
        assert stats.mean == pytest.approx(0.0)
        assert stats.std == pytest.approx(1.0)

    def test_matches_two_pass_oracle(self, rng):
        patches = [Patch(rng.normal(loc=0.3, scale=2.0, size=(8, 8)).astype(np.float32), f"k{i}", "MR")
                   for i in range(17)]
        stats = compute_norm_stats(patches)
        pooled = np.concatenate([p.pixels.ravel() for p in patches]).astype(np.float64)
        assert stats.mean == pytest.approx(pooled.mean(), abs=1e-9)
        assert stats.std == pytest.approx(pooled.std(), rel=1e-9)

    def test_merge_property(self, rng):
        """count/sum/sumsq accumulation merges partial stats exactly."""
        patches = [Patch(rng.normal(size=(6, 6)).astype(np.float32), f"k{i}", "MR") for i in range(10)]
        full = compute_norm_stats(patches)
        a = compute_norm_stats(patches[:4])
        b = compute_norm_stats(patches[4:])
        na, nb = 4 * 36, 6 * 36
        mean = (a.mean * na + b.mean * nb) / (na + nb)
        ex2 = ((a.std**2 + a.mean**2) * na + (b.std**2 + b.mean**2) * nb) / (na + nb)
        assert full.mean == pytest.approx(mean, abs=1e-12)
        assert full.std == pytest.approx(np.sqrt(ex2 - mean**2), rel=1e-9)

    def test_empty_rejected(self):
        with pytest.raises(DatasetError):
            compute_norm_stats([])

    def test_normalize_patches(self, rng):
        patches = [Patch(rng.normal(size=(4, 4)).astype(np.float32), f"k{i}", "MR") for i in range(5)]
        stats = compute_norm_stats(patches)
        normed = normalize_patches(patches, stats)
        pooled = np.concatenate([p.pixels.ravel() for p in normed])
        assert abs(pooled.mean()) < 1e-4
        assert abs(pooled.std() - 1.0) < 1e-4
        assert all(p.normalized for p in normed)


class TestBuildTrainingSet:
    def test_detector_cap_respected(self, small_training_set, small_detector):
        for s in small_training_set.manifest["slice_stats"]:
            assert s["detected"] <= small_detector.max_keypoints

    def test_positive_counts_equal_votes(self, small_training_set, small_consensus):
        by_id = {k["id"]: k for k in small_training_set.manifest["keypoints"]}
        for kid, plist in small_training_set.positives.items():
            assert len(plist) == by_id[kid]["votes"]
            assert len(plist) >= min(small_consensus.min_votes, len(small_training_set.manifest["variant_modes"]))

    def test_every_anchor_has_positives(self, small_training_set):
        anchor_ids = {a.keypoint_id for a in small_training_set.anchors}
        assert anchor_ids == set(small_training_set.positives.keys())

    def test_provenance_total(self, small_training_set):
        modes = set(small_training_set.manifest["variant_modes"])
        for rec in small_training_set.manifest["patches"]:
            assert rec["kind"] in ("anchor", "positive")
            if rec["kind"] == "positive":
                assert rec["variant"] in modes

    def test_deterministic_manifest(self, small_phantom, small_variants, small_detector, small_consensus):
        _, _, renderings = small_phantom
        a = build_training_set(renderings["T2"], small_variants, small_detector, small_consensus)
        b = build_training_set(renderings["T2"], small_variants, small_detector, small_consensus)
        assert a.manifest == b.manifest

    def test_normalization_property(self, small_training_set):
        stats = small_training_set.norm_stats
        all_patches = list(small_training_set.anchors)
        for plist in small_training_set.positives.values():
            all_patches.extend(plist)
        pooled = np.concatenate([stats.apply(p.pixels).ravel() for p in all_patches]).astype(np.float64)
        assert abs(pooled.mean()) < 1e-4
        assert abs(pooled.std() - 1.0) < 1e-4

    def test_zero_keypoints_errors(self, small_phantom, small_variants, small_consensus):
        _, _, renderings = small_phantom
        impossible = DetectorConfig(max_keypoints=256, nms_radius_px=2,
                                    response_threshold=1e9, border_margin_px=32)
        with pytest.raises(DatasetError, match="response_threshold"):
            build_training_set(renderings["T2"], small_variants, impossible, small_consensus)

    def test_min_votes_clamped_for_tiny_variant_sets(self, small_phantom, small_detector, small_consensus):
        _, labels, renderings = small_phantom
        from xmk.synthesis import generate_variant_set

        vs = generate_variant_set(renderings, labels, combos=(("T1", "T2", "FLAIR"),),
                                  samples_per_combo=1, base_seed=11)
        with pytest.warns(DegenerateVolumeWarning, match="clamping"):
            ts = build_training_set(renderings["T2"], vs, small_detector, small_consensus)
        assert ts.n_anchors > 0

    def test_margin_too_small_for_patch(self, small_phantom, small_variants, small_consensus):
        _, _, renderings = small_phantom
        bad = DetectorConfig(max_keypoints=256, nms_radius_px=2, response_threshold=3e-3, border_margin_px=16)
        with pytest.raises(DatasetError, match="cannot fit"):
            build_training_set(renderings["T2"], small_variants, bad, small_consensus)


class TestPersistence:
    def test_save_load_roundtrip(self, tmp_path, small_training_set):
        save_training_set(small_training_set, tmp_path / "ds")
        loaded = load_training_set(tmp_path / "ds")
        assert loaded.manifest == small_training_set.manifest
        assert loaded.norm_stats == small_training_set.norm_stats
        assert len(loaded.anchors) == len(small_training_set.anchors)
        for a, b in zip(loaded.anchors, small_training_set.anchors):
            assert np.array_equal(a.pixels, b.pixels)
        for kid in small_training_set.positives:
            for a, b in zip(loaded.positives[kid], small_training_set.positives[kid]):
                assert np.array_equal(a.pixels, b.pixels)

    def test_truncated_bin_rejected(self, tmp_path, small_training_set):
        save_training_set(small_training_set, tmp_path / "ds")
        bin_path = tmp_path / "ds" / "patches.bin"
        data = bin_path.read_bytes()
        bin_path.write_bytes(data[:-8])
        with pytest.raises(DatasetError, match="truncated"):
            load_training_set(tmp_path / "ds")
