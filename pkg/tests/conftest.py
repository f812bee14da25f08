"""Shared desk-scale fixtures: a small phantom, variants, and a training set."""

from __future__ import annotations

import numpy as np
import pytest

from xmk.dataset import build_training_set
from xmk.detection import ConsensusParams, DetectorConfig
from xmk.phantom import PhantomSpec, generate_phantom
from xmk.synthesis import generate_variant_set


SMALL_COMBOS = (("T2",), ("T1", "T2"), ("T1", "T2", "FLAIR"))


@pytest.fixture(scope="session")
def small_phantom():
    spec = PhantomSpec(seed=11, shape=(128, 128, 10), n_structures=6, noise_sigma=0.012)
    label_volume, renderings = generate_phantom(spec)
    return spec, label_volume, renderings


@pytest.fixture(scope="session")
def small_variants(small_phantom):
    _, label_volume, renderings = small_phantom
    return generate_variant_set(
        renderings,
        label_volume,
        combos=SMALL_COMBOS,
        samples_per_combo=2,
        base_seed=11,
    )


@pytest.fixture(scope="session")
def small_detector():
    return DetectorConfig(max_keypoints=256, nms_radius_px=2, response_threshold=3e-3, border_margin_px=32)


@pytest.fixture(scope="session")
def small_consensus():
    return ConsensusParams(margin_px=5.0, min_votes=3, cluster_eps_px=5.0, cluster_min_samples=1)


@pytest.fixture(scope="session")
def small_training_set(small_phantom, small_variants, small_detector, small_consensus):
    _, _, renderings = small_phantom
    return build_training_set(renderings["T2"], small_variants, small_detector, small_consensus)


@pytest.fixture()
def rng():
    return np.random.default_rng(2024)
