"""Seeded training loop for the descriptor network.

Each epoch shuffles the anchor keypoints, draws one positive variant per
anchor uniformly from that keypoint's hits, forwards both branches through
the shared weights, mines hard negatives in-batch, and takes an ADAM step on
the summed triplet loss. Everything is a deterministic function of the seed.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
import torch

from xmk.dataset import TrainingSet
from xmk.model import DescriptorNet, mine_hard_negatives, new_descriptor_net, triplet_loss
from xmk.util import derive_seed
from xmk.volume import DegenerateVolumeWarning

log = logging.getLogger(__name__)


class TrainingError(ValueError):
    """Invalid training configuration or empty dataset."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 256
    margin: float = 1.0
    epochs: int = 50
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    descriptor_dim: int = 128

    def __post_init__(self) -> None:
        if self.batch_size < 2 or self.batch_size % 2 != 0:
            raise TrainingError("batch_size must be an even number >= 2")
        if self.margin <= 0:
            raise TrainingError("margin must be > 0")
        if self.epochs < 1:
            raise TrainingError("epochs must be >= 1")


def _stack_training_arrays(ts: TrainingSet) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Flatten the training set into anchors plus a ragged positive pool."""
    stats = ts.norm_stats
    anchors = np.stack([stats.apply(a.pixels) for a in ts.anchors])
    pos_chunks: list[np.ndarray] = []
    starts = np.zeros(len(ts.anchors), dtype=np.int64)
    counts = np.zeros(len(ts.anchors), dtype=np.int64)
    offset = 0
    for i, a in enumerate(ts.anchors):
        plist = ts.positives[a.keypoint_id]
        starts[i] = offset
        counts[i] = len(plist)
        offset += len(plist)
        for p in plist:
            pos_chunks.append(stats.apply(p.pixels))
    return anchors, np.stack(pos_chunks), starts, counts


def train(dataset: TrainingSet, cfg: TrainConfig) -> tuple[DescriptorNet, list[float]]:
    """Train a fresh network; returns (net, mean per-triplet loss per epoch)."""
    if dataset.n_anchors == 0:
        raise TrainingError("training set has no anchors")
    if dataset.n_anchors < cfg.batch_size:
        warnings.warn(
            f"dataset has {dataset.n_anchors} anchors, fewer than batch_size={cfg.batch_size}; "
            "training with a single smaller batch per epoch",
            DegenerateVolumeWarning,
        )

    anchors, pos_pool, starts, counts = _stack_training_arrays(dataset)
    n = anchors.shape[0]
    rng = np.random.default_rng(derive_seed(cfg.seed, "train-loop"))
    net = new_descriptor_net(descriptor_dim=cfg.descriptor_dim, patch_size=anchors.shape[1], seed=cfg.seed)
    opt = torch.optim.Adam(
        net.parameters(), lr=cfg.learning_rate, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps
    )

    history: list[float] = []
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        loss_total = 0.0
        triplets = 0
        for lo in range(0, n, cfg.batch_size):
            batch = perm[lo : lo + cfg.batch_size]
            if batch.size < 2:
                continue  # a single pair cannot mine a negative
            pick = starts[batch] + rng.integers(0, counts[batch])
            a = torch.from_numpy(anchors[batch]).unsqueeze(1)
            p = torch.from_numpy(pos_pool[pick]).unsqueeze(1)
            d_a = net(a)
            d_p = net(p)
            with torch.no_grad():
                neg_idx = mine_hard_negatives(d_a.detach(), d_p.detach())
            loss = triplet_loss(d_a, d_p, d_p[neg_idx], cfg.margin)
            opt.zero_grad()
            loss.backward()
            opt.step()
            loss_total += float(loss.item())
            triplets += int(batch.size)
        mean_loss = loss_total / max(triplets, 1)
        history.append(mean_loss)
        log.info("epoch %d/%d: mean triplet loss %.5f", epoch + 1, cfg.epochs, mean_loss)
    return net, history
