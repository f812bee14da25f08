"""Cross-modality keypoint matching: describe, search, filter.

Candidates come from an exact cosine K-nearest-neighbor search and pass
through three filters in order: a similarity floor, Lowe's ratio test on
cosine distances, and greedy one-to-one uniqueness by descending similarity.
Every rejected candidate records which filter removed it.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from xmk.dataset import DatasetError, NormStats, extract_patch
from xmk.detection import DetectorConfig, Keypoint, detect_keypoints
from xmk.model import DescriptorNet
from xmk.util import read_json, write_json
from xmk.volume import Slice

log = logging.getLogger(__name__)


class MatchingError(ValueError):
    """Invalid matcher configuration or inputs."""


@dataclass(frozen=True)
class MatchConfig:
    n_mr: int = 200
    m_us_cap: int = 1500
    knn_k: int = 2
    ratio_threshold: float = 0.9
    min_similarity: float = 0.5

    def __post_init__(self) -> None:
        if self.n_mr < 1 or self.m_us_cap < 1:
            raise MatchingError("keypoint budgets must be >= 1")
        if self.knn_k < 2:
            raise MatchingError("knn_k must be >= 2 for the ratio test")
        if not 0 < self.ratio_threshold <= 1:
            raise MatchingError("ratio_threshold must be in (0, 1]")
        if not -1 <= self.min_similarity <= 1:
            raise MatchingError("min_similarity must be in [-1, 1]")

    def to_dict(self) -> dict:
        return {
            "n_mr": self.n_mr,
            "m_us_cap": self.m_us_cap,
            "knn_k": self.knn_k,
            "similarity": "cosine",
            "ratio_threshold": self.ratio_threshold,
            "min_similarity": self.min_similarity,
            "uniqueness": "one-to-one",
        }


@dataclass(frozen=True)
class Match:
    mr_id: int
    us_id: int
    similarity: float


@dataclass
class MatchSet:
    """Accepted one-to-one correspondences plus per-candidate filter verdicts."""

    matches: list[Match]
    mr_keypoints: list[Keypoint]
    us_keypoints: list[Keypoint]
    flags: list[str]  # per MR keypoint: "ok", "no-candidate", "similarity", "ratio", "uniqueness"
    config: dict
    counts: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        mr_ids = [m.mr_id for m in self.matches]
        us_ids = [m.us_id for m in self.matches]
        if len(set(mr_ids)) != len(mr_ids) or len(set(us_ids)) != len(us_ids):
            raise MatchingError("match set violates one-to-one uniqueness")
        sims = [m.similarity for m in self.matches]
        if any(sims[i] < sims[i + 1] for i in range(len(sims) - 1)):
            raise MatchingError("matches must be sorted by similarity descending")

    def __len__(self) -> int:
        return len(self.matches)


def describe_keypoints(
    s: Slice,
    kps: list[Keypoint],
    net: DescriptorNet,
    norm_stats: NormStats,
    patch_size: int = 64,
) -> tuple[list[Keypoint], np.ndarray]:
    """Describe each keypoint's patch; margin violations are dropped with a warning."""
    kept: list[Keypoint] = []
    patches: list[np.ndarray] = []
    for k in kps:
        try:
            patch = extract_patch(s, k, size=patch_size)
        except DatasetError:
            warnings.warn(f"keypoint ({k.x:.1f}, {k.y:.1f}) too close to the border; dropped")
            log.warning("dropping keypoint (%.1f, %.1f) on slice %d: patch out of bounds", k.x, k.y, k.slice_index)
            continue
        kept.append(k)
        patches.append(norm_stats.apply(patch.pixels))
    if not kept:
        return [], np.zeros((0, net.descriptor_dim), dtype=np.float32)
    return kept, net.describe(np.stack(patches))


def knn_cosine(query: np.ndarray, index: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Exact top-k cosine similarity search; ties break toward lower index ids.

    Rankings must not depend on descriptor scale, so rows are normalized here
    rather than assuming unit-norm inputs.
    """
    q = np.asarray(query, dtype=np.float64)
    x = np.asarray(index, dtype=np.float64)
    if x.shape[0] == 0:
        raise MatchingError("cosine search needs a non-empty index")
    if k > x.shape[0]:
        raise MatchingError(f"k={k} exceeds index size {x.shape[0]}")
    qn = q / np.maximum(np.linalg.norm(q, axis=1, keepdims=True), 1e-12)
    xn = x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)
    sims = qn @ xn.T
    order = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    top = np.take_along_axis(sims, order, axis=1)
    return order, top


def filter_matches(
    neighbor_ids: np.ndarray,
    neighbor_sims: np.ndarray,
    cfg: MatchConfig,
    mr_keypoints: list[Keypoint],
    us_keypoints: list[Keypoint],
) -> MatchSet:
    """Apply similarity floor, ratio test, and one-to-one uniqueness in order."""
    n = neighbor_ids.shape[0]
    k = neighbor_ids.shape[1] if neighbor_ids.ndim == 2 else 0
    flags = ["ok"] * n
    for i in range(n):
        s1 = neighbor_sims[i, 0]
        if s1 < cfg.min_similarity:
            flags[i] = "similarity"
            continue
        if k >= 2:
            d1 = 1.0 - s1
            d2 = 1.0 - neighbor_sims[i, 1]
            if d2 <= 1e-12:
                # best and runner-up are both (near-)perfect: ambiguous
                flags[i] = "ratio"
                continue
            if d1 / d2 > cfg.ratio_threshold:
                flags[i] = "ratio"
                continue
    survivors = [i for i in range(n) if flags[i] == "ok"]
    order = sorted(survivors, key=lambda i: (-neighbor_sims[i, 0], i))
    taken: set[int] = set()
    matches: list[Match] = []
    for i in order:
        target = int(neighbor_ids[i, 0])
        if target in taken:
            flags[i] = "uniqueness"
            continue
        taken.add(target)
        matches.append(Match(mr_id=i, us_id=target, similarity=float(neighbor_sims[i, 0])))
    counts = {
        "candidates": n,
        "rejected_similarity": flags.count("similarity"),
        "rejected_ratio": flags.count("ratio"),
        "rejected_uniqueness": flags.count("uniqueness"),
        "kept": len(matches),
    }
    return MatchSet(
        matches=matches,
        mr_keypoints=mr_keypoints,
        us_keypoints=us_keypoints,
        flags=flags,
        config=cfg.to_dict(),
        counts=counts,
    )


def match_descriptors(
    mr_desc: np.ndarray,
    us_desc: np.ndarray,
    cfg: MatchConfig,
    mr_keypoints: list[Keypoint],
    us_keypoints: list[Keypoint],
) -> MatchSet:
    """KNN search plus filtering for already-computed descriptors."""
    if mr_desc.shape[0] == 0 or us_desc.shape[0] == 0:
        return MatchSet(
            matches=[],
            mr_keypoints=mr_keypoints,
            us_keypoints=us_keypoints,
            flags=["no-candidate"] * mr_desc.shape[0],
            config=cfg.to_dict(),
            counts={"candidates": 0, "kept": 0},
        )
    k = min(cfg.knn_k, us_desc.shape[0])
    ids, sims = knn_cosine(mr_desc, us_desc, k)
    return filter_matches(ids, sims, cfg, mr_keypoints, us_keypoints)


def match_slices(
    mr_slice: Slice,
    us_slice: Slice,
    net: DescriptorNet,
    norm_stats: NormStats,
    det_cfg: DetectorConfig,
    match_cfg: MatchConfig,
    patch_size: int = 64,
) -> MatchSet:
    """Detect, describe, and match one MR slice against one US slice."""
    if mr_slice.pixels.shape != us_slice.pixels.shape:
        raise MatchingError("slices must share the in-plane shape")
    mr_det = DetectorConfig(
        max_keypoints=match_cfg.n_mr,
        nms_radius_px=det_cfg.nms_radius_px,
        response_threshold=det_cfg.response_threshold,
        border_margin_px=det_cfg.border_margin_px,
    )
    us_det = DetectorConfig(
        max_keypoints=match_cfg.m_us_cap,
        nms_radius_px=det_cfg.nms_radius_px,
        response_threshold=det_cfg.response_threshold,
        border_margin_px=det_cfg.border_margin_px,
    )
    mr_kps = detect_keypoints(mr_slice, mr_det, source="MR")
    us_kps = detect_keypoints(us_slice, us_det)
    mr_kept, mr_desc = describe_keypoints(mr_slice, mr_kps, net, norm_stats, patch_size)
    us_kept, us_desc = describe_keypoints(us_slice, us_kps, net, norm_stats, patch_size)
    return match_descriptors(mr_desc, us_desc, cfg=match_cfg, mr_keypoints=mr_kept, us_keypoints=us_kept)


def _keypoint_to_dict(k: Keypoint) -> dict:
    return {"x": k.x, "y": k.y, "slice_index": k.slice_index, "response": k.response, "source": k.source}


def save_match_set(ms: MatchSet, path) -> None:
    write_json(
        path,
        {
            "config": ms.config,
            "mr_keypoints": [_keypoint_to_dict(k) for k in ms.mr_keypoints],
            "us_keypoints": [_keypoint_to_dict(k) for k in ms.us_keypoints],
            "matches": [{"mr": m.mr_id, "us": m.us_id, "similarity": m.similarity} for m in ms.matches],
            "flags": ms.flags,
            "counts": ms.counts,
        },
    )


def load_match_set(path) -> MatchSet:
    d = read_json(path)
    return MatchSet(
        matches=[Match(mr_id=m["mr"], us_id=m["us"], similarity=float(m["similarity"])) for m in d["matches"]],
        mr_keypoints=[Keypoint(**k) for k in d["mr_keypoints"]],
        us_keypoints=[Keypoint(**k) for k in d["us_keypoints"]],
        flags=list(d.get("flags", [])),
        config=dict(d.get("config", {})),
        counts=dict(d.get("counts", {})),
    )
