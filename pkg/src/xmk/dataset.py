"""Patch extraction and training-set assembly.

Per slice of the reference volume: detect keypoints, probe each synthetic
variant for re-detection within the consensus margin, keep locations hit in
at least min_votes variants, deduplicate the survivors with DBSCAN, then cut
one anchor patch from the reference and one positive patch per hitting
variant at the same location. Patches are stored raw alongside the pooled
grayscale statistics; normalization is applied on the way into the network.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from xmk.clustering import cluster_representative_indices
from xmk.detection import ConsensusParams, DetectorConfig, Keypoint, detect_keypoints, enforce_detection
from xmk.synthesis import VariantSet
from xmk.util import read_json, write_json
from xmk.volume import DegenerateVolumeWarning, Slice, Volume, get_slice

log = logging.getLogger(__name__)

PATCH_SIZE = 64


class DatasetError(ValueError):
    """Patch extraction out of bounds or empty training set."""


@dataclass
class Patch:
    """A square grayscale window cut around a keypoint."""

    pixels: np.ndarray
    keypoint_id: str
    source: str
    normalized: bool = False


@dataclass(frozen=True)
class NormStats:
    """Pooled grayscale mean/std over every patch of a training set."""

    mean: float
    std: float
    n_patches: int

    def apply(self, pixels: np.ndarray) -> np.ndarray:
        return ((pixels - self.mean) / self.std).astype(np.float32)


def extract_patch(s: Slice, k: Keypoint, size: int = PATCH_SIZE, keypoint_id: str | None = None) -> Patch:
    """Cut a size x size window centered on the keypoint rounded to its pixel."""
    cy = int(np.floor(k.y + 0.5))
    cx = int(np.floor(k.x + 0.5))
    half = size // 2
    r0, c0 = cy - half, cx - half
    h, w = s.pixels.shape
    if r0 < 0 or c0 < 0 or r0 + size > h or c0 + size > w:
        raise DatasetError(
            f"patch window [{r0}:{r0 + size}, {c0}:{c0 + size}] exceeds slice bounds ({h}, {w})"
        )
    if keypoint_id is None:
        keypoint_id = f"s{k.slice_index:03d}x{cx}y{cy}"
    pixels = np.ascontiguousarray(s.pixels[r0 : r0 + size, c0 : c0 + size], dtype=np.float32)
    return Patch(pixels=pixels, keypoint_id=keypoint_id, source=s.volume_id)


def compute_norm_stats(patches: list[Patch]) -> NormStats:
    """Pooled mean and standard deviation over all pixels of all patches.

    Accumulates count/sum/sum-of-squares so partial statistics from parallel
    workers merge exactly; a near-zero spread falls back to std=1 with a
    warning so degenerate sets still normalize.
    """
    if not patches:
        raise DatasetError("cannot compute normalization statistics of an empty patch set")
    count = 0
    total = 0.0
    total_sq = 0.0
    for p in patches:
        px = p.pixels.astype(np.float64)
        count += px.size
        total += float(px.sum())
        total_sq += float((px * px).sum())
    mean = total / count
    var = max(total_sq / count - mean * mean, 0.0)
    std = float(np.sqrt(var))
    if std < 1e-8:
        warnings.warn("patch set has near-zero intensity spread; using std=1", DegenerateVolumeWarning)
        std = 1.0
    return NormStats(mean=float(mean), std=std, n_patches=len(patches))


def normalize_patches(patches: list[Patch], stats: NormStats) -> list[Patch]:
    return [
        Patch(pixels=stats.apply(p.pixels), keypoint_id=p.keypoint_id, source=p.source, normalized=True)
        for p in patches
    ]


@dataclass
class TrainingSet:
    """Anchor patches from the reference plus per-keypoint positive patches."""

    anchors: list[Patch]
    positives: dict[str, list[Patch]]
    norm_stats: NormStats
    manifest: dict

    def __post_init__(self) -> None:
        for kid, plist in self.positives.items():
            if kid not in {a.keypoint_id for a in self.anchors}:
                raise DatasetError(f"positive patches reference unknown anchor {kid}")
            if not plist:
                raise DatasetError(f"anchor {kid} has no positive patches")

    @property
    def n_anchors(self) -> int:
        return len(self.anchors)


def build_training_set(
    reference: Volume,
    variants: VariantSet,
    det_cfg: DetectorConfig,
    consensus: ConsensusParams,
    patch_size: int = PATCH_SIZE,
) -> TrainingSet:
    """Assemble the anchor/positive training structure over every slice."""
    if det_cfg.border_margin_px < patch_size // 2:
        raise DatasetError(
            f"border_margin_px={det_cfg.border_margin_px} cannot fit {patch_size}px patches"
        )
    min_votes = consensus.min_votes
    if min_votes > variants.p:
        warnings.warn(
            f"min_votes={min_votes} exceeds p={variants.p}; clamping to {variants.p}",
            DegenerateVolumeWarning,
        )
        min_votes = variants.p

    anchors: list[Patch] = []
    positives: dict[str, list[Patch]] = {}
    keypoint_records: list[dict] = []
    patch_records: list[dict] = []
    slice_stats: list[dict] = []

    for k in range(reference.depth):
        ref_slice = get_slice(reference, k)
        detected = detect_keypoints(ref_slice, det_cfg, source="MR")
        if not detected:
            slice_stats.append({"slice": k, "detected": 0, "consensus": 0, "clustered": 0})
            continue
        hit_matrix = np.zeros((variants.p, len(detected)), dtype=bool)
        variant_slices: list[Slice] = []
        for vi, (_, vol) in enumerate(variants.variants):
            vs = get_slice(vol, k)
            variant_slices.append(vs)
            for anchor_id, hit in enforce_detection(vs, detected, consensus.margin_px, det_cfg):
                hit_matrix[vi, anchor_id] = hit
        votes = hit_matrix.sum(axis=0)
        kept_idx = [i for i in range(len(detected)) if votes[i] >= min_votes]
        kept = [detected[i] for i in kept_idx]
        rep_local = cluster_representative_indices(kept, consensus.cluster_eps_px, consensus.cluster_min_samples)
        rep_idx = [kept_idx[i] for i in rep_local]
        slice_stats.append(
            {"slice": k, "detected": len(detected), "consensus": len(kept), "clustered": len(rep_idx)}
        )
        log.info(
            "slice %d: detected=%d consensus=%d clustered=%d (retained %.2f of detected)",
            k,
            len(detected),
            len(kept),
            len(rep_idx),
            len(rep_idx) / len(detected),
        )
        for i in rep_idx:
            kp = detected[i]
            kid = f"s{k:03d}i{i:03d}"
            anchor = extract_patch(ref_slice, kp, patch_size, keypoint_id=kid)
            anchors.append(anchor)
            patch_records.append({"keypoint_id": kid, "kind": "anchor", "source": "MR", "variant": None})
            keypoint_records.append(
                {
                    "id": kid,
                    "slice": k,
                    "x": kp.x,
                    "y": kp.y,
                    "response": kp.response,
                    "votes": int(votes[i]),
                }
            )
            plist: list[Patch] = []
            for vi, (vcfg, _) in enumerate(variants.variants):
                if not hit_matrix[vi, i]:
                    continue
                pos = extract_patch(variant_slices[vi], kp, patch_size, keypoint_id=kid)
                pos.source = vcfg.mode
                plist.append(pos)
                patch_records.append(
                    {"keypoint_id": kid, "kind": "positive", "source": vcfg.mode, "variant": vcfg.mode}
                )
            positives[kid] = plist

    if not anchors:
        raise DatasetError(
            "no consensus keypoints survived on any slice; lower detection.response_threshold "
            "or relax the consensus parameters"
        )

    all_patches = anchors + [p for plist in positives.values() for p in plist]
    stats = compute_norm_stats(all_patches)
    manifest = {
        "patch_size": patch_size,
        "n_anchors": len(anchors),
        "n_patches": len(all_patches),
        "norm_stats": {"mean": stats.mean, "std": stats.std, "n_patches": stats.n_patches},
        "detector": {
            "max_keypoints": det_cfg.max_keypoints,
            "nms_radius_px": det_cfg.nms_radius_px,
            "response_threshold": det_cfg.response_threshold,
            "border_margin_px": det_cfg.border_margin_px,
        },
        "consensus": {
            "margin_px": consensus.margin_px,
            "min_votes": consensus.min_votes,
            "cluster_eps_px": consensus.cluster_eps_px,
            "cluster_min_samples": consensus.cluster_min_samples,
        },
        "variant_modes": [cfg.mode for cfg in variants.configs()],
        "keypoints": keypoint_records,
        "patches": patch_records,
        "slice_stats": slice_stats,
    }
    return TrainingSet(anchors=anchors, positives=positives, norm_stats=stats, manifest=manifest)


def save_training_set(ts: TrainingSet, directory) -> None:
    """Write manifest.json plus patches.bin (raw float32 records in manifest order)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_json(d / "manifest.json", ts.manifest)
    by_id_positive: dict[str, list[Patch]] = {kid: list(plist) for kid, plist in ts.positives.items()}
    anchor_by_id = {a.keypoint_id: a for a in ts.anchors}
    with open(d / "patches.bin", "wb") as f:
        for rec in ts.manifest["patches"]:
            if rec["kind"] == "anchor":
                patch = anchor_by_id[rec["keypoint_id"]]
            else:
                patch = by_id_positive[rec["keypoint_id"]].pop(0)
            if patch.normalized:
                raise DatasetError("training sets are persisted raw; got a normalized patch")
            f.write(np.ascontiguousarray(patch.pixels, dtype="<f4").tobytes())


def load_training_set(directory) -> TrainingSet:
    d = Path(directory)
    manifest = read_json(d / "manifest.json")
    size = int(manifest["patch_size"])
    record_bytes = size * size * 4
    stats = NormStats(
        mean=float(manifest["norm_stats"]["mean"]),
        std=float(manifest["norm_stats"]["std"]),
        n_patches=int(manifest["norm_stats"]["n_patches"]),
    )
    anchors: list[Patch] = []
    positives: dict[str, list[Patch]] = {}
    with open(d / "patches.bin", "rb") as f:
        for rec in manifest["patches"]:
            blob = f.read(record_bytes)
            if len(blob) != record_bytes:
                raise DatasetError(f"{d}/patches.bin truncated at record for {rec['keypoint_id']}")
            pixels = np.frombuffer(blob, dtype="<f4").reshape(size, size).copy()
            patch = Patch(pixels=pixels, keypoint_id=rec["keypoint_id"], source=rec["source"])
            if rec["kind"] == "anchor":
                anchors.append(patch)
            else:
                positives.setdefault(rec["keypoint_id"], []).append(patch)
        if f.read(1):
            raise DatasetError(f"{d}/patches.bin longer than manifest declares")
    return TrainingSet(anchors=anchors, positives=positives, norm_stats=stats, manifest=manifest)
