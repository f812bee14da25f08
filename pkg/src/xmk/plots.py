"""Matplotlib renderings of matches, score curves, and report tables.

All entry points write PNG files next to the JSON/CSV artifacts; nothing
opens an interactive window.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from xmk.matching import MatchSet
from xmk.volume import Slice


def plot_matches(mr_slice: Slice, us_slice: Slice, ms: MatchSet, path, correct=None) -> None:
    """Side-by-side pair with green match lines and red dots on rejected keypoints.

    When a per-match correctness mask is given, wrong matches draw in orange.
    """
    h, w = mr_slice.pixels.shape
    canvas = np.concatenate([mr_slice.pixels, us_slice.pixels], axis=1)
    fig, ax = plt.subplots(figsize=(10, 5))
    ax.imshow(canvas, cmap="gray", vmin=-1, vmax=1)
    matched_mr = {m.mr_id for m in ms.matches}
    for i, k in enumerate(ms.mr_keypoints):
        if i not in matched_mr:
            ax.plot(k.x, k.y, ".", color="red", markersize=3)
    for j, m in enumerate(ms.matches):
        mr = ms.mr_keypoints[m.mr_id]
        us = ms.us_keypoints[m.us_id]
        color = "lime"
        if correct is not None and not correct[j]:
            color = "orange"
        ax.plot([mr.x, us.x + w], [mr.y, us.y], "-", color=color, linewidth=0.7)
    ax.set_axis_off()
    ax.set_title(f"matches: {len(ms.matches)} kept of {len(ms.mr_keypoints)} keypoints")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_retrieval_curve(scores, target_index: int, best_index: int, path) -> None:
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(range(len(scores)), scores, "-o", markersize=3)
    ax.axvline(target_index, color="green", linestyle="--", label=f"target {target_index}")
    ax.axvline(best_index, color="red", linestyle=":", label=f"retrieved {best_index}")
    ax.set_xlabel("slice index")
    ax.set_ylabel("filtered matches")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_per_slice_precision(report, path) -> None:
    slices = [s.slice_index for s in report.per_slice if not s.degenerate]
    precs = [s.precision_pct for s in report.per_slice if not s.degenerate]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(slices, precs, "-o", markersize=3)
    if precs:
        ax.axhline(float(np.mean(precs)), color="gray", linestyle="--", label="mean")
        ax.legend()
    ax.set_xlabel("slice index")
    ax.set_ylabel("precision (%)")
    ax.set_ylim(0, 105)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_repeatability(per_variant_pct: dict[str, float], path) -> None:
    names = list(per_variant_pct)
    values = [per_variant_pct[n] for n in names]
    fig, ax = plt.subplots(figsize=(max(6, 0.5 * len(names)), 4))
    ax.bar(range(len(names)), values)
    ax.axhline(50, color="red", linestyle="--")
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=60, ha="right", fontsize=7)
    ax.set_ylabel("repeated matches (%)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_ablation(rows: list[dict], path) -> None:
    labels = ["+".join(r["modalities"]) for r in rows]
    x = np.arange(len(rows))
    fig, ax1 = plt.subplots(figsize=(7, 4))
    ax1.bar(x - 0.2, [r["matching_score_pct"] for r in rows], width=0.4, label="MSc (%)")
    ax1.bar(x + 0.2, [r["precision_pct"] for r in rows], width=0.4, label="Prec (%)")
    ax1.set_xticks(x)
    ax1.set_xticklabels(labels)
    ax1.set_ylabel("percent")
    ax2 = ax1.twinx()
    ax2.plot(x, [r["matched_points"] for r in rows], "k-o", label="MP")
    ax2.set_ylabel("matched points")
    ax1.legend(loc="upper left")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_loss_history(history, path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(range(1, len(history) + 1), history, "-o", markersize=3)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean triplet loss")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_slice_preview(volumes: dict[str, np.ndarray], path) -> None:
    """One row of center slices, used as a quick phantom/variant preview."""
    fig, axes = plt.subplots(1, len(volumes), figsize=(3 * len(volumes), 3.2))
    if len(volumes) == 1:
        axes = [axes]
    for ax, (name, img) in zip(axes, volumes.items()):
        ax.imshow(img, cmap="gray", vmin=-1, vmax=1)
        ax.set_title(name, fontsize=9)
        ax.set_axis_off()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
