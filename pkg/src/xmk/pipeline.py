"""Orchestration shared by the CLI and the experiment suites.

These helpers wire config sections into module calls and implement the
multi-stage experiments (volume evaluation, modality ablation, holdout
repeatability) on in-memory artifacts.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from xmk.config import RunConfig
from xmk.dataset import NormStats, TrainingSet, build_training_set
from xmk.detection import ConsensusParams, DetectorConfig, detect_keypoints
from xmk.evaluation import (
    EvalReport,
    GroundTruth,
    SliceScore,
    aggregate_scores,
    score_matches,
)
from xmk.matching import MatchConfig, MatchSet, describe_keypoints, match_descriptors
from xmk.model import DescriptorNet
from xmk.phantom import PhantomSpec, generate_phantom
from xmk.synthesis import DEFAULT_COMBOS, SynthesisConfig, VariantSet, synthesize_us
from xmk.training import TrainConfig, train
from xmk.util import derive_seed
from xmk.volume import Volume, get_slice

log = logging.getLogger(__name__)

EVAL_COMBO = ("T1", "T2", "FLAIR")


def spec_from_config(cfg: RunConfig) -> PhantomSpec:
    return PhantomSpec(
        seed=cfg.seed,
        shape=tuple(cfg.phantom.shape),
        n_structures=cfg.phantom.n_structures,
        bias_field_strength=cfg.phantom.bias_field_strength,
        noise_sigma=cfg.phantom.noise_sigma,
        spacing_mm=(cfg.phantom.spacing_mm,) * 3,
    )


def detector_from_config(cfg: RunConfig) -> DetectorConfig:
    d = cfg.detection
    return DetectorConfig(
        max_keypoints=d.max_keypoints,
        nms_radius_px=d.nms_radius_px,
        response_threshold=d.response_threshold,
        border_margin_px=d.border_margin_px,
    )


def consensus_from_config(cfg: RunConfig) -> ConsensusParams:
    d = cfg.dataset
    return ConsensusParams(
        margin_px=d.margin_px,
        min_votes=d.min_votes,
        cluster_eps_px=d.cluster_eps_px,
        cluster_min_samples=d.cluster_min_samples,
    )


def train_from_config(cfg: RunConfig) -> TrainConfig:
    t = cfg.train
    return TrainConfig(
        learning_rate=t.learning_rate,
        batch_size=t.batch_size,
        margin=t.margin,
        epochs=t.epochs,
        seed=cfg.seed,
        descriptor_dim=t.descriptor_dim,
    )


def match_from_config(cfg: RunConfig) -> MatchConfig:
    m = cfg.match
    return MatchConfig(
        n_mr=m.n_mr,
        m_us_cap=m.m_us_cap,
        knn_k=m.knn_k,
        ratio_threshold=m.ratio_threshold,
        min_similarity=m.min_similarity,
    )


def training_combos(cfg: RunConfig) -> tuple[tuple[str, ...], ...]:
    if cfg.synthesis.combos is None:
        return DEFAULT_COMBOS
    return tuple(tuple(c) for c in cfg.synthesis.combos)


def make_training_variants(
    renderings: dict[str, Volume],
    label_volume: Volume,
    cfg: RunConfig,
    combos: tuple[tuple[str, ...], ...] | None = None,
) -> VariantSet:
    from xmk.synthesis import generate_variant_set

    s = cfg.synthesis
    return generate_variant_set(
        renderings,
        label_volume,
        combos=combos if combos is not None else training_combos(cfg),
        samples_per_combo=s.samples_per_combo,
        base_seed=cfg.seed,
        dropout_ladder=tuple(s.dropout_ladder),
        speckle_ladder=tuple(s.speckle_ladder),
        blur_ladder=tuple(s.blur_ladder),
    )


def make_eval_variants(renderings: dict[str, Volume], label_volume: Volume, cfg: RunConfig) -> VariantSet:
    """Held-out synthesis modes: full-modality fusion with unseen texture seeds."""
    s = cfg.synthesis
    variants = []
    for j in range(s.eval_modes):
        sc = SynthesisConfig(
            modalities=EVAL_COMBO,
            sampling_seed=derive_seed(cfg.seed, "eval-sample", j),
            speckle_strength=s.eval_speckle_ladder[j % len(s.eval_speckle_ladder)],
            blur_sigma_px=s.eval_blur_ladder[j % len(s.eval_blur_ladder)],
            dropout_rate=s.eval_dropout_ladder[j % len(s.eval_dropout_ladder)],
            intensity_warp_seed=derive_seed(cfg.seed, "eval-warp", j),
            mode=f"eval_{j}",
        )
        variants.append((sc, synthesize_us(renderings, label_volume, sc)))
    return VariantSet(reference=renderings["T2"], variants=tuple(variants))


def resolve_slices(spec: str | tuple[int, ...], depth: int) -> list[int]:
    if spec == "all":
        return list(range(depth))
    return [int(k) for k in spec]


@dataclass
class VolumeEvaluation:
    report: EvalReport
    match_sets: dict[tuple[str, int], MatchSet]  # (volume name, slice) -> matches


def evaluate_against_volumes(
    net: DescriptorNet,
    norm_stats: NormStats,
    reference: Volume,
    volumes: list[tuple[str, Volume]],
    det_cfg: DetectorConfig,
    match_cfg: MatchConfig,
    gt: GroundTruth,
    slices: list[int],
    area_mode: str = "hull",
    patch_size: int = 64,
    keep_match_sets: bool = False,
) -> VolumeEvaluation:
    """Match the reference against each volume over the given slices and average.

    The reference side of each slice is detected and described once and
    reused across targets.
    """
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
    scores: list[SliceScore] = []
    kept_sets: dict[tuple[str, int], MatchSet] = {}
    for k in slices:
        mr_slice = get_slice(reference, k)
        mr_kps = detect_keypoints(mr_slice, mr_det, source="MR")
        if not mr_kps:
            continue
        mr_kept, mr_desc = describe_keypoints(mr_slice, mr_kps, net, norm_stats, patch_size)
        for name, vol in volumes:
            us_slice = get_slice(vol, k)
            us_kps = detect_keypoints(us_slice, us_det)
            us_kept, us_desc = describe_keypoints(us_slice, us_kps, net, norm_stats, patch_size)
            ms = match_descriptors(mr_desc, us_desc, match_cfg, mr_kept, us_kept)
            scores.append(
                score_matches(ms, gt, n_detected=len(mr_kept), slice_shape=mr_slice.pixels.shape,
                              slice_index=k, area_mode=area_mode)
            )
            if keep_match_sets:
                kept_sets[(name, k)] = ms
    report = aggregate_scores(scores, config=match_cfg.to_dict())
    return VolumeEvaluation(report=report, match_sets=kept_sets)


ABLATION_ROWS: tuple[tuple[str, ...], ...] = (
    ("T2",),
    ("T2", "FLAIR"),
    ("T2", "T1"),
    ("T2", "T1", "FLAIR"),
)


def combos_for_row(row: tuple[str, ...]) -> tuple[tuple[str, ...], ...]:
    """All default combos whose modalities are available in this row."""
    available = set(row)
    return tuple(c for c in DEFAULT_COMBOS if set(c) <= available)


def run_modality_ablation(
    renderings: dict[str, Volume],
    label_volume: Volume,
    eval_volumes: list[tuple[str, Volume]],
    cfg: RunConfig,
    seed: int,
    rows: tuple[tuple[str, ...], ...] = ABLATION_ROWS,
) -> list[dict]:
    """Train and evaluate one pipeline per synthesis-modality subset.

    Every row shares the phantom, the evaluation volumes, the network
    initialization seed, and the matching configuration; only the synthesis
    combo coverage changes.
    """
    det_cfg = detector_from_config(cfg)
    consensus = consensus_from_config(cfg)
    match_cfg = match_from_config(cfg)
    gt = GroundTruth.identity(tolerance_px=cfg.eval.tolerance_px)
    depth = label_volume.depth
    n_eval = min(cfg.ablate.eval_slices, depth)
    eval_slices = sorted({int(round(x)) for x in np.linspace(0, depth - 1, n_eval)})
    train_cfg = TrainConfig(
        learning_rate=cfg.train.learning_rate,
        batch_size=cfg.train.batch_size,
        margin=cfg.train.margin,
        epochs=cfg.ablate.epochs,
        seed=derive_seed(seed, "ablation-train"),
        descriptor_dim=cfg.train.descriptor_dim,
    )
    results: list[dict] = []
    for row in rows:
        combos = combos_for_row(row)
        log.info("ablation row %s: %d combos x %d samples", "+".join(row), len(combos), cfg.synthesis.samples_per_combo)
        variants = make_training_variants(renderings, label_volume, cfg, combos=combos)
        ts = build_training_set(variants.reference, variants, det_cfg, consensus)
        net, history = train(ts, train_cfg)
        evaluation = evaluate_against_volumes(
            net, ts.norm_stats, variants.reference, eval_volumes, det_cfg, match_cfg, gt,
            eval_slices, area_mode=cfg.eval.area_mode,
        )
        report = evaluation.report
        results.append(
            {
                "modalities": list(row),
                "p": variants.p,
                "n_anchors": ts.n_anchors,
                "final_loss": history[-1] if history else None,
                "precision_pct": report.precision_pct,
                "matching_score_pct": report.matching_score_pct,
                "matched_points": report.matched_points,
                "area_pct": report.area_pct,
            }
        )
    return results


def full_pipeline_in_memory(cfg: RunConfig) -> dict:
    """Phantom -> variants -> dataset -> training -> evaluation, all in memory.

    Returns the artifacts keyed by stage; used by the reproducibility suite
    and anywhere a scripted end-to-end run is cheaper than going through
    the CLI's on-disk staging.
    """
    spec = spec_from_config(cfg)
    label_volume, renderings = generate_phantom(spec)
    variants = make_training_variants(renderings, label_volume, cfg)
    if cfg.dataset.exclude_modes:
        train_variants = variants.without(list(cfg.dataset.exclude_modes))
    else:
        train_variants = variants
    det_cfg = detector_from_config(cfg)
    consensus = consensus_from_config(cfg)
    ts = build_training_set(train_variants.reference, train_variants, det_cfg, consensus)
    net, history = train(ts, train_from_config(cfg))
    eval_variants = make_eval_variants(renderings, label_volume, cfg)
    gt = GroundTruth.identity(tolerance_px=cfg.eval.tolerance_px)
    slices = resolve_slices(cfg.eval.slices, label_volume.depth)
    evaluation = evaluate_against_volumes(
        net, ts.norm_stats, variants.reference,
        [(c.mode, v) for c, v in eval_variants.variants],
        det_cfg, match_from_config(cfg), gt, slices, area_mode=cfg.eval.area_mode,
    )
    return {
        "label_volume": label_volume,
        "renderings": renderings,
        "variants": variants,
        "train_variants": train_variants,
        "training_set": ts,
        "net": net,
        "history": history,
        "eval_variants": eval_variants,
        "report": evaluation.report,
    }
