"""Corner keypoint detection, re-detection enforcement, and consensus voting.

The built-in detector scores pixels by the minimum eigenvalue of the local
structure tensor (gradients pooled over a 3x3 window), suppresses non-maxima
within a Euclidean radius, and refines surviving maxima to sub-pixel accuracy
with a per-axis parabolic fit. Any external detector can be substituted
through the keypoints CSV import path.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from xmk.volume import Slice

KEYPOINT_SOURCES = ("MR", "US", "external")  # plus "SynUS-<i>" variant tags


class DetectionError(ValueError):
    """Invalid detector configuration or keypoint payload."""


@dataclass(frozen=True)
class Keypoint:
    """A sub-pixel 2D location on one slice; x runs along width, y along height."""

    x: float
    y: float
    slice_index: int
    response: float
    source: str = "MR"

    def xy(self) -> tuple[float, float]:
        return (self.x, self.y)


@dataclass(frozen=True)
class DetectorConfig:
    max_keypoints: int = 256
    nms_radius_px: int = 4
    response_threshold: float = 1e-4
    border_margin_px: int = 32

    def __post_init__(self) -> None:
        if self.max_keypoints < 1:
            raise DetectionError("max_keypoints must be >= 1")
        if self.nms_radius_px < 1:
            raise DetectionError("nms_radius_px must be >= 1")
        if self.border_margin_px < 0:
            raise DetectionError("border_margin_px must be >= 0")


@dataclass(frozen=True)
class ConsensusParams:
    margin_px: float = 5.0
    min_votes: int = 3
    cluster_eps_px: float = 5.0
    cluster_min_samples: int = 1

    def __post_init__(self) -> None:
        if self.margin_px <= 0:
            raise DetectionError("margin_px must be > 0")
        if self.min_votes < 1:
            raise DetectionError("min_votes must be >= 1")
        if self.cluster_eps_px <= 0 or self.cluster_min_samples < 1:
            raise DetectionError("cluster parameters out of range")


def corner_response(pixels: np.ndarray) -> np.ndarray:
    """Minimum eigenvalue of the 3x3-pooled structure tensor at every pixel."""
    img = np.asarray(pixels, dtype=np.float32)
    gy, gx = np.gradient(img)
    sxx = ndimage.uniform_filter(gx * gx, size=3)
    syy = ndimage.uniform_filter(gy * gy, size=3)
    sxy = ndimage.uniform_filter(gx * gy, size=3)
    half_trace = 0.5 * (sxx + syy)
    root = np.sqrt(np.maximum((0.5 * (sxx - syy)) ** 2 + sxy * sxy, 0.0))
    return np.maximum(half_trace - root, 0.0)


def _disk_footprint(radius: int) -> np.ndarray:
    r = int(radius)
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    return (yy * yy + xx * xx) <= r * r


def _parabolic_offset(r_minus: float, r_0: float, r_plus: float) -> float:
    denom = 2.0 * (2.0 * r_0 - r_plus - r_minus)
    if abs(denom) < 1e-12:
        return 0.0
    t = (r_plus - r_minus) / denom
    return float(np.clip(t, -0.499, 0.499))  # strictly sub-half so rounding recovers the grid cell


def _greedy_nms(rows: np.ndarray, cols: np.ndarray, responses: np.ndarray, radius: float) -> np.ndarray:
    """Keep candidates in descending response order, suppressing anything within radius."""
    order = np.lexsort((cols, rows, -responses))
    kept: list[int] = []
    kept_rc: list[tuple[int, int]] = []
    r2 = radius * radius
    for idx in order:
        rr, cc = int(rows[idx]), int(cols[idx])
        if any((rr - kr) ** 2 + (cc - kc) ** 2 <= r2 for kr, kc in kept_rc):
            continue
        kept.append(int(idx))
        kept_rc.append((rr, cc))
    return np.asarray(kept, dtype=np.int64)


def detect_keypoints(
    s: Slice,
    cfg: DetectorConfig,
    source: str | None = None,
    truncate: bool = True,
) -> list[Keypoint]:
    """Detect corner keypoints on one slice, strongest first.

    Candidates must clear the response threshold, survive non-maximum
    suppression within nms_radius_px, and respect the border margin; with
    truncate=False the max_keypoints cap is ignored (used when probing
    whether a given location re-detects).
    """
    resp = corner_response(s.pixels)
    h, w = resp.shape
    mask = resp >= cfg.response_threshold
    maxima = mask & (resp == ndimage.maximum_filter(resp, footprint=_disk_footprint(cfg.nms_radius_px)))
    m = cfg.border_margin_px
    if m > 0:
        border = np.zeros_like(maxima)
        if h > 2 * m and w > 2 * m:
            border[m : h - m, m : w - m] = True
        maxima &= border
    rows, cols = np.nonzero(maxima)
    if rows.size == 0:
        return []
    responses = resp[rows, cols]
    keep = _greedy_nms(rows, cols, responses, float(cfg.nms_radius_px))

    if source is None:
        vid = s.volume_id
        source = vid if vid.startswith("SynUS") or vid in KEYPOINT_SOURCES else "MR"

    kps: list[Keypoint] = []
    for idx in keep:
        r, c = int(rows[idx]), int(cols[idx])
        dy = _parabolic_offset(resp[r - 1, c], resp[r, c], resp[r + 1, c]) if 0 < r < h - 1 else 0.0
        dx = _parabolic_offset(resp[r, c - 1], resp[r, c], resp[r, c + 1]) if 0 < c < w - 1 else 0.0
        kps.append(
            Keypoint(x=c + dx, y=r + dy, slice_index=s.slice_index, response=float(responses[idx]), source=source)
        )
    if truncate and len(kps) > cfg.max_keypoints:
        kps = kps[: cfg.max_keypoints]
    return kps


def enforce_detection(
    s: Slice,
    anchors: list[Keypoint],
    margin_px: float,
    cfg: DetectorConfig,
) -> list[tuple[int, bool]]:
    """Probe whether each anchor location re-detects on this slice.

    An anchor hits when the full (untruncated) detection set contains a
    keypoint within margin_px Euclidean distance.
    """
    dets = detect_keypoints(s, cfg, truncate=False)
    if not anchors:
        return []
    if not dets:
        return [(i, False) for i in range(len(anchors))]
    det_xy = np.array([[d.x, d.y] for d in dets])
    anc_xy = np.array([[a.x, a.y] for a in anchors])
    d2 = ((anc_xy[:, None, :] - det_xy[None, :, :]) ** 2).sum(axis=2)
    hit = d2.min(axis=1) <= margin_px * margin_px
    return [(i, bool(hit[i])) for i in range(len(anchors))]


def consensus_filter(
    anchors: list[Keypoint],
    hits_per_variant: list[list[tuple[int, bool]]],
    min_votes: int = 3,
) -> list[Keypoint]:
    """Keep anchors re-detected in at least min_votes variants."""
    votes = np.zeros(len(anchors), dtype=np.int64)
    for variant_hits in hits_per_variant:
        for anchor_id, hit in variant_hits:
            if hit:
                votes[anchor_id] += 1
    return [a for a, v in zip(anchors, votes) if v >= min_votes]


def consensus_votes(hits_per_variant: list[list[tuple[int, bool]]], n_anchors: int) -> np.ndarray:
    votes = np.zeros(n_anchors, dtype=np.int64)
    for variant_hits in hits_per_variant:
        for anchor_id, hit in variant_hits:
            if hit:
                votes[anchor_id] += 1
    return votes


def save_keypoints_csv(path, kps: list[Keypoint]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["slice_index", "x", "y", "response", "source"])
        for k in kps:
            writer.writerow([k.slice_index, repr(k.x), repr(k.y), repr(k.response), k.source])


def load_keypoints_csv(path) -> list[Keypoint]:
    p = Path(path)
    with open(p, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["slice_index", "x", "y", "response", "source"]:
            raise DetectionError(f"{p}: unexpected keypoints CSV header {header}")
        kps = []
        for row in reader:
            kps.append(
                Keypoint(
                    slice_index=int(row[0]),
                    x=float(row[1]),
                    y=float(row[2]),
                    response=float(row[3]),
                    source=row[4],
                )
            )
    return kps
