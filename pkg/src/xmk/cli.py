"""Command-line pipeline: phantom | synth | build-dataset | train | match | eval | retrieve | ablate.

Stages communicate through a directory convention under the output root
(--out flag, then the config file, then $XMK_OUT, then ./out). Every run
writes a run.json echoing the resolved configuration. Exit codes: 0 success,
2 config error, 3 missing upstream artifact, 4 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from xmk import __version__
from xmk.config import ConfigError, RunConfig, load_config
from xmk.util import derive_seed, read_json, write_json

log = logging.getLogger("xmk")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_RUNTIME = 4

MODALITY_FILES = ("T1", "T2", "FLAIR", "LABEL")


class MissingArtifactError(FileNotFoundError):
    """An upstream stage's outputs are required but absent."""


def _resolve_out(args, cfg: RunConfig) -> Path:
    if args.out:
        return Path(args.out)
    if cfg.out:
        return Path(cfg.out)
    return Path(os.environ.get("XMK_OUT", "out"))


def _load(args) -> tuple[RunConfig, Path]:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    out = _resolve_out(args, cfg)
    cfg.out = str(out)
    if args.jobs is not None:
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        import torch

        torch.set_num_threads(args.jobs)
    return cfg, out


def _stage_dir(out: Path, name: str, primary: str, force: bool) -> Path:
    d = out / name
    if (d / primary).exists() and not force:
        raise RuntimeError(f"{d / primary} already exists; re-run with --force to overwrite")
    d.mkdir(parents=True, exist_ok=True)
    return d


def _write_run_echo(directory: Path, command: str, cfg: RunConfig) -> None:
    write_json(directory / "run.json", {"command": command, "version": __version__, "config": cfg.to_dict()})


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(f"missing artifact {path}; run `xmk {hint}` first")
    return path


def _load_reference(out: Path):
    from xmk.volume import load_volume

    return load_volume(_require(out / "phantom" / "T2.mvol", "phantom"))


def _load_variant_volume(out: Path, mode: str):
    from xmk.volume import load_volume

    for stage in ("eval_variants", "variants"):
        p = out / stage / f"{mode}.mvol"
        if p.exists():
            return load_volume(p)
    raise MissingArtifactError(f"no variant volume named {mode!r} under {out}; run `xmk synth` first")


def cmd_phantom(args) -> int:
    from xmk.phantom import generate_phantom
    from xmk.pipeline import spec_from_config
    from xmk.plots import save_slice_preview
    from xmk.volume import save_volume

    cfg, out = _load(args)
    d = _stage_dir(out, "phantom", "T2.mvol", args.force)
    spec = spec_from_config(cfg)
    label_volume, renderings = generate_phantom(spec)
    save_volume(label_volume, d / "LABEL.mvol")
    for m, vol in renderings.items():
        save_volume(vol, d / f"{m}.mvol")
    write_json(
        d / "manifest.json",
        {
            "seed": spec.seed,
            "shape": list(spec.shape),
            "n_structures": spec.n_structures,
            "bias_field_strength": spec.bias_field_strength,
            "spacing_mm": list(spec.spacing_mm),
            "files": [f"{m}.mvol" for m in MODALITY_FILES],
        },
    )
    mid = label_volume.depth // 2
    save_slice_preview(
        {m: renderings[m].voxels[:, :, mid] for m in ("T1", "T2", "FLAIR")}, d / "preview.png"
    )
    _write_run_echo(d, "phantom", cfg)
    log.info("phantom written to %s", d)
    return EXIT_OK


def cmd_synth(args) -> int:
    from xmk.pipeline import make_eval_variants, make_training_variants
    from xmk.plots import save_slice_preview
    from xmk.synthesis import save_variant_set
    from xmk.volume import load_volume

    cfg, out = _load(args)
    phantom_dir = out / "phantom"
    renderings = {m: load_volume(_require(phantom_dir / f"{m}.mvol", "phantom")) for m in ("T1", "T2", "FLAIR")}
    label_volume = load_volume(_require(phantom_dir / "LABEL.mvol", "phantom"))
    d = _stage_dir(out, "variants", "manifest.json", args.force)
    variants = make_training_variants(renderings, label_volume, cfg)
    save_variant_set(variants, d)
    mid = label_volume.depth // 2
    preview = {c.mode: v.voxels[:, :, mid] for c, v in variants.variants[:4]}
    save_slice_preview(preview, d / "preview.png")
    _write_run_echo(d, "synth", cfg)

    de = _stage_dir(out, "eval_variants", "manifest.json", args.force)
    eval_variants = make_eval_variants(renderings, label_volume, cfg)
    save_variant_set(eval_variants, de)
    _write_run_echo(de, "synth", cfg)
    log.info("wrote %d training and %d eval variants", variants.p, eval_variants.p)
    return EXIT_OK


def cmd_build_dataset(args) -> int:
    from xmk.dataset import build_training_set, save_training_set
    from xmk.pipeline import consensus_from_config, detector_from_config
    from xmk.synthesis import load_variant_set

    cfg, out = _load(args)
    reference = _load_reference(out)
    variants = load_variant_set(_require(out / "variants" / "manifest.json", "synth").parent, reference)
    if cfg.dataset.exclude_modes:
        variants = variants.without(list(cfg.dataset.exclude_modes))
        log.info("excluded %d modes; training on %d variants", len(cfg.dataset.exclude_modes), variants.p)
    d = _stage_dir(out, "dataset", "manifest.json", args.force)
    ts = build_training_set(
        reference, variants, detector_from_config(cfg), consensus_from_config(cfg), cfg.dataset.patch_size
    )
    ts.manifest["excluded_modes"] = list(cfg.dataset.exclude_modes)
    save_training_set(ts, d)
    _write_run_echo(d, "build-dataset", cfg)
    log.info("dataset: %d anchors, %d patches", ts.n_anchors, ts.manifest["n_patches"])
    return EXIT_OK


def cmd_train(args) -> int:
    from xmk.dataset import load_training_set
    from xmk.model import save_checkpoint
    from xmk.pipeline import train_from_config
    from xmk.plots import plot_loss_history
    from xmk.training import train

    cfg, out = _load(args)
    ts = load_training_set(_require(out / "dataset" / "manifest.json", "build-dataset").parent)
    d = _stage_dir(out, "model", "checkpoint.xdsc", args.force)
    net, history = train(ts, train_from_config(cfg))
    save_checkpoint(net, d / "checkpoint.xdsc", ts.norm_stats, seed=cfg.seed, epoch=cfg.train.epochs)
    write_json(d / "history.json", {"mean_triplet_loss": history})
    plot_loss_history(history, d / "loss.png")
    _write_run_echo(d, "train", cfg)
    log.info("trained %d epochs; final mean loss %.5f", cfg.train.epochs, history[-1])
    return EXIT_OK


def cmd_match(args) -> int:
    from xmk.matching import match_slices, save_match_set
    from xmk.model import load_checkpoint
    from xmk.pipeline import detector_from_config, match_from_config, resolve_slices
    from xmk.plots import plot_matches
    from xmk.volume import get_slice

    cfg, out = _load(args)
    if getattr(args, "volume", None):
        cfg.match.volume = args.volume
    net, stats, _ = load_checkpoint(_require(out / "model" / "checkpoint.xdsc", "train"))
    reference = _load_reference(out)
    target = _load_variant_volume(out, cfg.match.volume)
    d = _stage_dir(out, "matches", "run.json", args.force)
    det_cfg = detector_from_config(cfg)
    match_cfg = match_from_config(cfg)
    slices = resolve_slices(cfg.match.slices, reference.depth)
    total = 0
    for k in slices:
        mr_slice = get_slice(reference, k)
        us_slice = get_slice(target, k)
        ms = match_slices(mr_slice, us_slice, net, stats, det_cfg, match_cfg, cfg.dataset.patch_size)
        save_match_set(ms, d / f"slice_{k:03d}.json")
        if cfg.match.save_plots:
            plot_matches(mr_slice, us_slice, ms, d / f"slice_{k:03d}.png")
        total += len(ms)
    _write_run_echo(d, "match", cfg)
    log.info("matched %d slices against %s: %d total matches", len(slices), cfg.match.volume, total)
    return EXIT_OK


def _ground_truth(cfg: RunConfig, shape: tuple[int, int]):
    from xmk.evaluation import GroundTruth

    if cfg.eval.warp_amplitude_px > 0:
        return GroundTruth.smooth_warp(
            shape, cfg.eval.warp_amplitude_px, seed=cfg.seed, tolerance_px=cfg.eval.tolerance_px
        )
    return GroundTruth.identity(tolerance_px=cfg.eval.tolerance_px)


def _eval_external(args, cfg: RunConfig, out: Path, d: Path) -> int:
    """Score externally produced match JSONs (baseline comparison path)."""
    import csv

    from xmk.evaluation import aggregate_scores, score_matches
    from xmk.matching import load_match_set

    matches_dir = Path(args.matches)
    files = sorted(matches_dir.glob("slice_*.json"))
    if not files:
        raise MissingArtifactError(f"no slice_*.json match files under {matches_dir}")
    reference = _load_reference(out)
    h, w, _ = reference.shape
    gt = _ground_truth(cfg, (h, w))
    scores = []
    for f in files:
        ms = load_match_set(f)
        k = int(f.stem.split("_")[1])
        scores.append(score_matches(ms, gt, n_detected=len(ms.mr_keypoints), slice_shape=(h, w), slice_index=k))
    report = aggregate_scores(scores)
    method = args.method or matches_dir.name
    row = [method, f"{report.precision_pct:.2f}", f"{report.matching_score_pct:.2f}", f"{report.matched_points:.2f}"]
    comparison = d / "comparison.csv"
    new_file = not comparison.exists()
    with open(comparison, "a", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        if new_file:
            writer.writerow(["method", "prec_pct", "msc_pct", "avg_mp"])
        writer.writerow(row)
    log.info("external method %s: Prec %s%%, MSc %s%%, MP %s", method, row[1], row[2], row[3])
    return EXIT_OK


def cmd_eval(args) -> int:
    from xmk.evaluation import (
        mode_holdout_repeatability,
        per_slice_deviation,
        write_report_csv,
        write_report_json,
    )
    from xmk.model import load_checkpoint
    from xmk.pipeline import (
        detector_from_config,
        evaluate_against_volumes,
        match_from_config,
        resolve_slices,
    )
    from xmk.plots import plot_per_slice_precision, plot_repeatability
    from xmk.synthesis import load_variant_set

    cfg, out = _load(args)
    d = _stage_dir(out, "eval", "run.json", args.force)
    if args.matches:
        code = _eval_external(args, cfg, out, d)
        _write_run_echo(d, "eval", cfg)
        return code

    net, stats, _ = load_checkpoint(_require(out / "model" / "checkpoint.xdsc", "train"))
    reference = _load_reference(out)
    eval_set = load_variant_set(_require(out / "eval_variants" / "manifest.json", "synth").parent, reference)
    h, w, _ = reference.shape
    gt = _ground_truth(cfg, (h, w))
    det_cfg = detector_from_config(cfg)
    match_cfg = match_from_config(cfg)
    slices = resolve_slices(cfg.eval.slices, reference.depth)
    volumes = [(c.mode, v) for c, v in eval_set.variants]
    evaluation = evaluate_against_volumes(
        net, stats, reference, volumes, det_cfg, match_cfg, gt, slices, area_mode=cfg.eval.area_mode
    )
    report = evaluation.report
    precisions = [s.precision_pct for s in report.per_slice if not s.degenerate]
    if len(precisions) >= 2:
        mad, std = per_slice_deviation(precisions)
        report.config["per_slice_precision_mad"] = mad
        report.config["per_slice_precision_std"] = std
    write_report_json(report, d / "report.json")
    write_report_csv(report, d / "report.csv")
    if cfg.eval.save_plots:
        plot_per_slice_precision(report, d / "per_slice.png")

    if args.holdout:
        ds_manifest = read_json(_require(out / "dataset" / "manifest.json", "build-dataset"))
        excluded = ds_manifest.get("excluded_modes", [])
        if not excluded:
            raise ConfigError("--holdout needs a dataset built with dataset.exclude_modes set")
        trained_modes = ds_manifest["variant_modes"]
        baseline = _load_variant_volume(out, trained_modes[0])
        held = [(m, _load_variant_volume(out, m)) for m in excluded]
        rep = mode_holdout_repeatability(
            net, stats, reference, baseline, held, det_cfg, match_cfg, slices,
            tolerance_px=cfg.eval.tolerance_px, patch_size=cfg.dataset.patch_size,
        )
        write_json(d / "repeatability.json", rep)
        if cfg.eval.save_plots:
            plot_repeatability(rep["per_variant_pct"], d / "repeatability.png")
        log.info("holdout repeatability: %.1f%% of baseline matches recur", rep["mean_pct"])

    _write_run_echo(d, "eval", cfg)
    log.info(
        "eval: Prec %.2f%%, MSc %.2f%%, MP %.2f, Area %.2f%%",
        report.precision_pct, report.matching_score_pct, report.matched_points, report.area_pct,
    )
    return EXIT_OK


def cmd_retrieve(args) -> int:
    from xmk.detection import detect_keypoints
    from xmk.evaluation import build_volume_index, slice_retrieval
    from xmk.model import load_checkpoint
    from xmk.pipeline import detector_from_config, match_from_config
    from xmk.plots import plot_retrieval_curve
    from xmk.volume import get_slice

    cfg, out = _load(args)
    net, stats, _ = load_checkpoint(_require(out / "model" / "checkpoint.xdsc", "train"))
    reference = _load_reference(out)
    target_volume = _load_variant_volume(out, cfg.retrieve.volume)
    d = _stage_dir(out, "retrieval", "retrieval.json", args.force)
    det_cfg = detector_from_config(cfg)
    match_cfg = match_from_config(cfg)
    us_index = build_volume_index(target_volume, net, stats, det_cfg, match_cfg.m_us_cap, cfg.dataset.patch_size)

    rng = np.random.default_rng(derive_seed(cfg.seed, "retrieval-targets"))
    candidates = [
        k for k in range(reference.depth)
        if len(detect_keypoints(get_slice(reference, k), det_cfg)) >= cfg.retrieve.min_slice_keypoints
    ]
    if not candidates:
        raise RuntimeError("no slices have enough keypoints for retrieval targets")
    n = min(cfg.retrieve.n_targets, len(candidates))
    targets = sorted(int(t) for t in rng.choice(np.asarray(candidates), size=n, replace=False))

    results = []
    for t in targets:
        r = slice_retrieval(reference, t, us_index, net, stats, det_cfg, match_cfg,
                            patch_size=cfg.dataset.patch_size)
        results.append(r)
        plot_retrieval_curve(r.scores, r.target_index, r.best_index, d / f"curve_{t:03d}.png")
        log.info("target slice %d -> retrieved %d (%.2f mm)", t, r.best_index, r.error_mm)
    write_json(
        d / "retrieval.json",
        {
            "volume": cfg.retrieve.volume,
            "targets": [
                {"target": r.target_index, "best": r.best_index, "error_mm": r.error_mm, "scores": r.scores}
                for r in results
            ],
            "mean_error_mm": float(np.mean([r.error_mm for r in results])),
        },
    )
    _write_run_echo(d, "retrieve", cfg)
    return EXIT_OK


def cmd_ablate(args) -> int:
    from xmk.evaluation import write_ablation_csv
    from xmk.pipeline import make_eval_variants, run_modality_ablation
    from xmk.plots import plot_ablation
    from xmk.volume import load_volume

    cfg, out = _load(args)
    phantom_dir = out / "phantom"
    renderings = {m: load_volume(_require(phantom_dir / f"{m}.mvol", "phantom")) for m in ("T1", "T2", "FLAIR")}
    label_volume = load_volume(_require(phantom_dir / "LABEL.mvol", "phantom"))
    d = _stage_dir(out, "ablation", "table.csv", args.force)
    eval_set = make_eval_variants(renderings, label_volume, cfg)
    eval_volumes = [(c.mode, v) for c, v in eval_set.variants[: cfg.ablate.eval_volumes]]
    rows = run_modality_ablation(renderings, label_volume, eval_volumes, cfg, seed=cfg.seed)
    write_ablation_csv(rows, d / "table.csv")
    write_json(d / "table.json", {"rows": rows})
    plot_ablation(rows, d / "ablation.png")
    _write_run_echo(d, "ablate", cfg)
    for r in rows:
        log.info(
            "%-12s p=%-3d Prec %6.2f  MSc %6.2f  MP %6.2f  Area %6.2f",
            "+".join(r["modalities"]), r["p"], r["precision_pct"], r["matching_score_pct"],
            r["matched_points"], r["area_pct"],
        )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="xmk",
        description="Cross-modality keypoint descriptor pipeline on procedural phantoms.",
    )
    parser.add_argument("--version", action="version", version=f"xmk {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, func, help_text: str):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None, help="TOML or JSON config file (default: built-in defaults)")
        p.add_argument("--out", default=None, help="output root (default: config, then $XMK_OUT, then ./out)")
        p.add_argument("--seed", type=int, default=None, help="override the global seed (default: config seed)")
        p.add_argument("--jobs", type=int, default=None, help="cap worker threads (default: library default)")
        p.add_argument("--force", action="store_true", help="overwrite existing stage outputs (default: refuse)")
        p.set_defaults(func=func)
        return p

    add("phantom", cmd_phantom, "generate the labeled phantom and per-modality renderings")
    add("synth", cmd_synth, "synthesize training and held-out evaluation variants")
    add("build-dataset", cmd_build_dataset, "detect, vote, cluster, and extract training patches")
    add("train", cmd_train, "train the descriptor network")
    p_match = add("match", cmd_match, "match reference slices against one variant volume")
    p_match.add_argument("--volume", default=None, help="variant mode to match against (default: config match.volume)")
    p_eval = add("eval", cmd_eval, "score matches against ground truth and write reports")
    p_eval.add_argument("--matches", default=None, help="score externally produced match JSONs from this directory")
    p_eval.add_argument("--method", default=None, help="method name for the external comparison row")
    p_eval.add_argument("--holdout", action="store_true", help="also compute held-out-mode repeatability")
    add("retrieve", cmd_retrieve, "retrieve target slices inside a variant volume")
    add("ablate", cmd_ablate, "train/evaluate once per synthesis-modality subset")
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse errors use exit code 2 already
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except MissingArtifactError as exc:
        log.error("%s", exc)
        return EXIT_MISSING
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        log.error("runtime failure: %s", exc)
        return EXIT_RUNTIME


def entry() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    raise SystemExit(main())
