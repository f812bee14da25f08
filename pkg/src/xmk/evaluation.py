"""Ground-truth metrics, repeatability analyses, and slice retrieval.

A match is correct when the matched location lands within tolerance_px of
the ground-truth correspondence of its source keypoint. Precision is correct
over matched, matching score is correct over detected, and area is the
convex-hull coverage of the correctly matched source keypoints.
"""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from xmk.dataset import NormStats
from xmk.detection import ConsensusParams, DetectorConfig, detect_keypoints
from xmk.matching import MatchConfig, MatchSet, describe_keypoints, match_descriptors, match_slices
from xmk.model import DescriptorNet
from xmk.util import derive_seed
from xmk.volume import DegenerateVolumeWarning, Volume, get_slice

log = logging.getLogger(__name__)


class EvaluationError(ValueError):
    """Metric preconditions violated."""


@dataclass(frozen=True)
class GroundTruth:
    """Maps an MR pixel location to its US correspondence on the same slice."""

    mapping: Callable[[float, float], tuple[float, float]]
    tolerance_px: float = 4.0

    @classmethod
    def identity(cls, tolerance_px: float = 4.0) -> "GroundTruth":
        return cls(mapping=lambda x, y: (x, y), tolerance_px=tolerance_px)

    @classmethod
    def smooth_warp(
        cls,
        shape: tuple[int, int],
        amplitude_px: float,
        seed: int = 0,
        tolerance_px: float = 4.0,
    ) -> "GroundTruth":
        """Low-frequency sinusoidal displacement field with the given peak amplitude."""
        h, w = shape
        rng = np.random.default_rng(derive_seed(seed, "gt-warp"))
        fx, fy = rng.uniform(0.5, 1.5, size=2)
        px, py = rng.uniform(0, 2 * np.pi, size=2)

        def mapping(x: float, y: float) -> tuple[float, float]:
            dx = amplitude_px * np.sin(2 * np.pi * fx * y / h + px)
            dy = amplitude_px * np.cos(2 * np.pi * fy * x / w + py)
            return (x + float(dx), y + float(dy))

        return cls(mapping=mapping, tolerance_px=tolerance_px)


def convex_hull_area(points: np.ndarray) -> float:
    """Area of the convex hull via monotone chain + shoelace; degenerate sets give 0."""
    pts = np.unique(np.asarray(points, dtype=np.float64).reshape(-1, 2), axis=0)
    if pts.shape[0] < 3:
        return 0.0
    pts = pts[np.lexsort((pts[:, 1], pts[:, 0]))]

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower: list[np.ndarray] = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list[np.ndarray] = []
    for p in pts[::-1]:
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    hull = np.array(lower[:-1] + upper[:-1])
    if hull.shape[0] < 3:
        return 0.0
    x, y = hull[:, 0], hull[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def area_coverage(points: np.ndarray, slice_shape: tuple[int, int], mode: str = "hull", grid: int = 16) -> float:
    """Percent of the slice covered by the given points.

    "hull": convex-hull area over slice area (fewer than 3 non-collinear
    points give 0). "grid": fraction of grid x grid cells containing a point.
    """
    h, w = slice_shape
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if mode == "hull":
        return 100.0 * convex_hull_area(pts) / float(h * w)
    if mode == "grid":
        if pts.shape[0] == 0:
            return 0.0
        cx = np.clip((pts[:, 0] / w * grid).astype(int), 0, grid - 1)
        cy = np.clip((pts[:, 1] / h * grid).astype(int), 0, grid - 1)
        return 100.0 * len(set(zip(cx.tolist(), cy.tolist()))) / float(grid * grid)
    raise EvaluationError(f"unknown area mode {mode!r}")


@dataclass
class SliceScore:
    """Metrics for one matched slice pair."""

    slice_index: int
    n_detected: int
    matched_points: int
    n_correct: int
    precision_pct: float
    matching_score_pct: float
    area_pct: float
    degenerate: bool  # no matches: precision reported as 0 with this flag

    def to_dict(self) -> dict:
        return {
            "slice": self.slice_index,
            "n_detected": self.n_detected,
            "mp": self.matched_points,
            "n_correct": self.n_correct,
            "precision_pct": self.precision_pct,
            "msc_pct": self.matching_score_pct,
            "area_pct": self.area_pct,
            "degenerate": self.degenerate,
        }


@dataclass
class EvalReport:
    """Volume-level averages plus the per-slice table they came from."""

    precision_pct: float
    matching_score_pct: float
    matched_points: float
    area_pct: float
    per_slice: list[SliceScore]
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "precision_pct": self.precision_pct,
            "matching_score_pct": self.matching_score_pct,
            "matched_points": self.matched_points,
            "area_pct": self.area_pct,
            "per_slice": [s.to_dict() for s in self.per_slice],
            "config": self.config,
        }


def correct_match_mask(ms: MatchSet, gt: GroundTruth) -> np.ndarray:
    """Boolean mask over ms.matches: matched US location within tolerance of GT."""
    mask = np.zeros(len(ms.matches), dtype=bool)
    tol2 = gt.tolerance_px**2
    for i, m in enumerate(ms.matches):
        mr = ms.mr_keypoints[m.mr_id]
        us = ms.us_keypoints[m.us_id]
        gx, gy = gt.mapping(mr.x, mr.y)
        mask[i] = (us.x - gx) ** 2 + (us.y - gy) ** 2 <= tol2
    return mask


def score_matches(
    ms: MatchSet,
    gt: GroundTruth,
    n_detected: int,
    slice_shape: tuple[int, int],
    slice_index: int = 0,
    area_mode: str = "hull",
) -> SliceScore:
    """Score one MatchSet against ground truth."""
    if n_detected < 0:
        raise EvaluationError("n_detected must be >= 0")
    mp = len(ms.matches)
    if mp == 0:
        return SliceScore(
            slice_index=slice_index,
            n_detected=n_detected,
            matched_points=0,
            n_correct=0,
            precision_pct=0.0,
            matching_score_pct=0.0,
            area_pct=0.0,
            degenerate=True,
        )
    correct = correct_match_mask(ms, gt)
    n_correct = int(correct.sum())
    correct_xy = np.array(
        [[ms.mr_keypoints[m.mr_id].x, ms.mr_keypoints[m.mr_id].y] for m, ok in zip(ms.matches, correct) if ok]
    ).reshape(-1, 2)
    return SliceScore(
        slice_index=slice_index,
        n_detected=n_detected,
        matched_points=mp,
        n_correct=n_correct,
        precision_pct=100.0 * n_correct / mp,
        matching_score_pct=100.0 * n_correct / n_detected if n_detected else 0.0,
        area_pct=area_coverage(correct_xy, slice_shape, mode=area_mode),
        degenerate=False,
    )


def aggregate_scores(scores: Sequence[SliceScore], config: dict | None = None) -> EvalReport:
    """Average per-slice metrics; precision averages skip degenerate slices."""
    if not scores:
        raise EvaluationError("no slice scores to aggregate")
    non_degenerate = [s for s in scores if not s.degenerate]
    prec = float(np.mean([s.precision_pct for s in non_degenerate])) if non_degenerate else 0.0
    return EvalReport(
        precision_pct=prec,
        matching_score_pct=float(np.mean([s.matching_score_pct for s in scores])),
        matched_points=float(np.mean([s.matched_points for s in scores])),
        area_pct=float(np.mean([s.area_pct for s in scores])),
        per_slice=list(scores),
        config=dict(config or {}),
    )


def per_slice_deviation(precisions: Sequence[float]) -> tuple[float, float]:
    """(mean absolute deviation, standard deviation) of per-slice precision."""
    vals = np.asarray(list(precisions), dtype=np.float64)
    if vals.size < 2:
        raise EvaluationError("per-slice deviation needs at least 2 slices")
    mean = vals.mean()
    return float(np.abs(vals - mean).mean()), float(vals.std())


@dataclass
class SliceIndexEntry:
    keypoints: list
    descriptors: np.ndarray


def build_volume_index(
    volume: Volume,
    net: DescriptorNet,
    norm_stats: NormStats,
    det_cfg: DetectorConfig,
    max_keypoints: int,
    patch_size: int = 64,
) -> list[SliceIndexEntry]:
    """Detect and describe every slice once so retrieval can reuse the work."""
    entries: list[SliceIndexEntry] = []
    cfg = DetectorConfig(
        max_keypoints=max_keypoints,
        nms_radius_px=det_cfg.nms_radius_px,
        response_threshold=det_cfg.response_threshold,
        border_margin_px=det_cfg.border_margin_px,
    )
    for k in range(volume.depth):
        s = get_slice(volume, k)
        kps = detect_keypoints(s, cfg)
        kept, desc = describe_keypoints(s, kps, net, norm_stats, patch_size)
        entries.append(SliceIndexEntry(keypoints=kept, descriptors=desc))
    return entries


@dataclass
class RetrievalResult:
    target_index: int
    best_index: int
    error_mm: float
    scores: list[int]


def slice_retrieval(
    mr_volume: Volume,
    target_index: int,
    us_index: list[SliceIndexEntry],
    net: DescriptorNet,
    norm_stats: NormStats,
    det_cfg: DetectorConfig,
    match_cfg: MatchConfig,
    spacing_mm: float | None = None,
    patch_size: int = 64,
) -> RetrievalResult:
    """Find the US slice whose filtered match count against the target MR slice peaks."""
    mr_slice = get_slice(mr_volume, target_index)
    mr_det = DetectorConfig(
        max_keypoints=match_cfg.n_mr,
        nms_radius_px=det_cfg.nms_radius_px,
        response_threshold=det_cfg.response_threshold,
        border_margin_px=det_cfg.border_margin_px,
    )
    mr_kps = detect_keypoints(mr_slice, mr_det, source="MR")
    mr_kept, mr_desc = describe_keypoints(mr_slice, mr_kps, net, norm_stats, patch_size)
    scores: list[int] = []
    for entry in us_index:
        ms = match_descriptors(mr_desc, entry.descriptors, match_cfg, mr_kept, entry.keypoints)
        scores.append(len(ms))
    best = int(np.argmax(scores)) if scores else 0
    spacing = spacing_mm if spacing_mm is not None else mr_volume.spacing_mm[2]
    return RetrievalResult(
        target_index=target_index,
        best_index=best,
        error_mm=abs(best - target_index) * float(spacing),
        scores=scores,
    )


def mode_holdout_repeatability(
    net: DescriptorNet,
    norm_stats: NormStats,
    reference: Volume,
    baseline_volume: Volume,
    held_out_volumes: list[tuple[str, Volume]],
    det_cfg: DetectorConfig,
    match_cfg: MatchConfig,
    slices: Sequence[int],
    tolerance_px: float = 4.0,
    patch_size: int = 64,
) -> dict:
    """Fraction of baseline matches that recur on each held-out synthesis mode.

    The baseline pairs the reference with an in-training variant; a baseline
    match recurs when the same MR keypoint is matched again with a US
    location within tolerance of its baseline US location.
    """
    tol2 = tolerance_px**2
    per_variant: dict[str, float] = {name: 0.0 for name, _ in held_out_volumes}
    recur_counts = {name: 0 for name, _ in held_out_volumes}
    baseline_total = 0
    for k in slices:
        mr_slice = get_slice(reference, k)
        base_ms = match_slices(mr_slice, get_slice(baseline_volume, k), net, norm_stats, det_cfg, match_cfg, patch_size)
        if not base_ms.matches:
            continue
        baseline_total += len(base_ms.matches)
        base_points = {}
        for m in base_ms.matches:
            mr = base_ms.mr_keypoints[m.mr_id]
            us = base_ms.us_keypoints[m.us_id]
            base_points[(round(mr.x, 3), round(mr.y, 3))] = (us.x, us.y)
        for name, vol in held_out_volumes:
            ms = match_slices(mr_slice, get_slice(vol, k), net, norm_stats, det_cfg, match_cfg, patch_size)
            for m in ms.matches:
                mr = ms.mr_keypoints[m.mr_id]
                key = (round(mr.x, 3), round(mr.y, 3))
                if key not in base_points:
                    continue
                bx, by = base_points[key]
                us = ms.us_keypoints[m.us_id]
                if (us.x - bx) ** 2 + (us.y - by) ** 2 <= tol2:
                    recur_counts[name] += 1
    if baseline_total == 0:
        raise EvaluationError("baseline match set is empty; nothing to repeat")
    for name in per_variant:
        per_variant[name] = 100.0 * recur_counts[name] / baseline_total
    return {
        "baseline_matches": baseline_total,
        "per_variant_pct": per_variant,
        "mean_pct": float(np.mean(list(per_variant.values()))),
    }


def write_report_json(report: EvalReport, path) -> None:
    from xmk.util import write_json

    write_json(path, report.to_dict())


def write_report_csv(report: EvalReport, path) -> None:
    """Per-slice table plus a trailing volume-average row."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["slice", "n_detected", "mp", "n_correct", "precision_pct", "msc_pct", "area_pct"])
        for s in report.per_slice:
            writer.writerow(
                [s.slice_index, s.n_detected, s.matched_points, s.n_correct,
                 f"{s.precision_pct:.2f}", f"{s.matching_score_pct:.2f}", f"{s.area_pct:.2f}"]
            )
        writer.writerow(
            ["mean", "", f"{report.matched_points:.2f}", "",
             f"{report.precision_pct:.2f}", f"{report.matching_score_pct:.2f}", f"{report.area_pct:.2f}"]
        )


def write_ablation_csv(rows: list[dict], path) -> None:
    """Table mirroring the modality-ablation layout (one row per synthesis set)."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["T2", "T1", "FLAIR", "prec_pct", "msc_pct", "avg_mp", "area_pct"])
        for r in rows:
            mods = r["modalities"]
            writer.writerow(
                [int("T2" in mods), int("T1" in mods), int("FLAIR" in mods),
                 f"{r['precision_pct']:.2f}", f"{r['matching_score_pct']:.2f}",
                 f"{r['matched_points']:.2f}", f"{r['area_pct']:.2f}"]
            )
