"""Siamese patch descriptor network, triplet loss, hard mining, checkpoints.

The network maps a normalized 1x64x64 patch to a unit-norm descriptor: six
3x3 convolution stages (widths 32,32,64,64,128,128; stride-2 downsampling at
stages 2,4,6; bias + ReLU, no normalization layers), a final 8x8 convolution
to descriptor_dim channels, then L2 normalization. Checkpoints are a JSON
metadata line plus the raw little-endian float32 parameter payload.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from xmk.dataset import NormStats
from xmk.util import derive_seed

CHANNELS = (32, 32, 64, 64, 128, 128)
STRIDES = (1, 2, 1, 2, 1, 2)
CHECKPOINT_MAGIC = "XDSC1"


class CheckpointError(ValueError):
    """Checkpoint metadata or payload does not match the architecture."""


class DescriptorNet(nn.Module):
    """One branch of the Siamese descriptor; both branches share these weights."""

    def __init__(self, descriptor_dim: int = 128, patch_size: int = 64):
        super().__init__()
        if patch_size % 8 != 0:
            raise ValueError("patch_size must be divisible by 8")
        self.descriptor_dim = descriptor_dim
        self.patch_size = patch_size
        layers: list[nn.Module] = []
        in_c = 1
        for c, s in zip(CHANNELS, STRIDES):
            layers.append(nn.Conv2d(in_c, c, kernel_size=3, stride=s, padding=1, bias=True))
            layers.append(nn.ReLU(inplace=True))
            in_c = c
        self.body = nn.Sequential(*layers)
        self.head = nn.Conv2d(in_c, descriptor_dim, kernel_size=patch_size // 8, bias=True)
        self.to(memory_format=torch.channels_last)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[2:] != (self.patch_size, self.patch_size):
            raise ValueError(f"expected (B, 1, {self.patch_size}, {self.patch_size}) input, got {tuple(x.shape)}")
        x = x.contiguous(memory_format=torch.channels_last)
        z = self.head(self.body(x)).flatten(1)
        return F.normalize(z, p=2, dim=1, eps=1e-12)

    @torch.inference_mode()
    def describe(self, patches: np.ndarray, batch_size: int = 128) -> np.ndarray:
        """Descriptors for an (N, s, s) stack of normalized patches."""
        pts = np.asarray(patches, dtype=np.float32)
        if pts.ndim == 2:
            pts = pts[None]
        out = np.empty((pts.shape[0], self.descriptor_dim), dtype=np.float32)
        for i in range(0, pts.shape[0], batch_size):
            chunk = torch.from_numpy(np.ascontiguousarray(pts[i : i + batch_size])).unsqueeze(1)
            out[i : i + chunk.shape[0]] = self(chunk).numpy()
        return out


def new_descriptor_net(descriptor_dim: int = 128, patch_size: int = 64, seed: int = 0) -> DescriptorNet:
    """Build a freshly initialized network deterministically from a seed."""
    with torch.random.fork_rng():
        torch.manual_seed(derive_seed(seed, "net-init") % 2**63)
        return DescriptorNet(descriptor_dim=descriptor_dim, patch_size=patch_size)


def triplet_loss(d_a: torch.Tensor, d_p: torch.Tensor, d_n: torch.Tensor, margin: float = 1.0) -> torch.Tensor:
    """Sum over triplets of max(0, |a-p|^2 - |a-n|^2 + margin)."""
    d_a, d_p, d_n = (torch.as_tensor(t) for t in (d_a, d_p, d_n))
    if not d_a.shape == d_p.shape == d_n.shape:
        raise ValueError(f"descriptor shape mismatch: {d_a.shape} / {d_p.shape} / {d_n.shape}")
    pos = (d_a - d_p).pow(2).sum(dim=-1)
    neg = (d_a - d_n).pow(2).sum(dim=-1)
    return torch.clamp(pos - neg + margin, min=0.0).sum()


def mine_hard_negatives(d_a: torch.Tensor, d_p: torch.Tensor) -> torch.Tensor:
    """Hardest in-batch negative per anchor: argmin over j != k of |a_k - p_j|.

    Ties resolve to the lowest index. The most confusable non-corresponding
    positive gives the largest hinge contribution, so this is the in-batch
    hard negative.
    """
    d_a = torch.as_tensor(d_a)
    d_p = torch.as_tensor(d_p)
    b = d_a.shape[0]
    if b < 2:
        raise ValueError("hard mining needs a batch of at least 2 pairs")
    dist = torch.cdist(d_a, d_p)
    dist.fill_diagonal_(float("inf"))
    return dist.argmin(dim=1)


def gradient_check(
    net: DescriptorNet,
    anchors: np.ndarray,
    positives: np.ndarray,
    margin: float = 1.0,
    n_params: int = 50,
    step: float = 1e-6,
    seed: int = 0,
) -> float:
    """Max relative error between autograd and central finite differences.

    Mined negative indices are frozen before differentiation so both routes
    differentiate the same (piecewise-smooth) restriction of the loss. The
    step must stay small: the expected number of ReLU kinks crossed inside
    [theta-h, theta+h] grows linearly with h, and each crossing biases the
    central difference. At 1e-6 in float64 both that bias and the rounding
    error stay well under the 1e-3 acceptance bar.
    """
    # contiguous layout so flat element views alias the parameter storage
    net64 = copy.deepcopy(net).to(torch.float64).to(memory_format=torch.contiguous_format)
    a = torch.as_tensor(np.asarray(anchors, dtype=np.float64)).unsqueeze(1)
    p = torch.as_tensor(np.asarray(positives, dtype=np.float64)).unsqueeze(1)
    with torch.no_grad():
        idx = mine_hard_negatives(net64(a), net64(p))

    def batch_loss() -> torch.Tensor:
        da = net64(a)
        dp = net64(p)
        return triplet_loss(da, dp, dp[idx], margin)

    net64.zero_grad()
    batch_loss().backward()
    params = list(net64.parameters())
    sizes = np.array([q.numel() for q in params])
    rng = np.random.default_rng(derive_seed(seed, "gradcheck"))
    picks = rng.integers(0, int(sizes.sum()), size=n_params)
    max_rel = 0.0
    for flat in picks:
        pi = int(np.searchsorted(np.cumsum(sizes), flat, side="right"))
        e = int(flat - (np.cumsum(sizes)[pi - 1] if pi > 0 else 0))
        q = params[pi]
        with torch.no_grad():
            orig = q.view(-1)[e].item()
            q.view(-1)[e] = orig + step
            lp = batch_loss().item()
            q.view(-1)[e] = orig - step
            lm = batch_loss().item()
            q.view(-1)[e] = orig
        fd = (lp - lm) / (2.0 * step)
        an = q.grad.view(-1)[e].item()
        rel = abs(fd - an) / max(abs(fd), abs(an), 1e-6)
        max_rel = max(max_rel, rel)
    return max_rel


def save_checkpoint(
    net: DescriptorNet,
    path,
    norm_stats: NormStats,
    seed: int | None = None,
    epoch: int | None = None,
) -> None:
    """Write architecture metadata, normalization stats, and raw parameters."""
    state = net.state_dict()
    meta = {
        "magic": CHECKPOINT_MAGIC,
        "descriptor_dim": net.descriptor_dim,
        "patch_size": net.patch_size,
        "channels": list(CHANNELS),
        "strides": list(STRIDES),
        "norm_stats": {"mean": norm_stats.mean, "std": norm_stats.std, "n_patches": norm_stats.n_patches},
        "seed": seed,
        "epoch": epoch,
        "params": [{"name": k, "shape": list(v.shape)} for k, v in state.items()],
    }
    with open(path, "wb") as f:
        f.write(json.dumps(meta).encode("utf-8") + b"\n")
        for v in state.values():
            f.write(v.detach().to(torch.float32).contiguous().numpy().astype("<f4").tobytes())


def load_checkpoint(path) -> tuple[DescriptorNet, NormStats, dict]:
    """Rebuild the network bit-exactly from a checkpoint file."""
    p = Path(path)
    if not p.is_file():
        raise CheckpointError(f"no such checkpoint: {p}")
    with open(p, "rb") as f:
        meta = json.loads(f.readline().decode("utf-8"))
        if meta.get("magic") != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{p}: bad checkpoint magic {meta.get('magic')!r}")
        if list(meta.get("channels", [])) != list(CHANNELS) or list(meta.get("strides", [])) != list(STRIDES):
            raise CheckpointError(f"{p}: architecture mismatch with this implementation")
        net = DescriptorNet(descriptor_dim=int(meta["descriptor_dim"]), patch_size=int(meta["patch_size"]))
        state = net.state_dict()
        declared = meta.get("params", [])
        if [d["name"] for d in declared] != list(state.keys()):
            raise CheckpointError(f"{p}: parameter names do not match the architecture")
        new_state = {}
        for d in declared:
            shape = tuple(d["shape"])
            expected = tuple(state[d["name"]].shape)
            if shape != expected:
                raise CheckpointError(f"{p}: parameter {d['name']} has shape {shape}, architecture wants {expected}")
            n = int(np.prod(shape)) if shape else 1
            blob = f.read(4 * n)
            if len(blob) != 4 * n:
                raise CheckpointError(f"{p}: truncated parameter payload at {d['name']}")
            arr = np.frombuffer(blob, dtype="<f4").reshape(shape).copy()
            new_state[d["name"]] = torch.from_numpy(arr)
        if f.read(1):
            raise CheckpointError(f"{p}: trailing bytes after declared parameters")
    net.load_state_dict(new_state)
    net.to(memory_format=torch.channels_last)
    stats = NormStats(
        mean=float(meta["norm_stats"]["mean"]),
        std=float(meta["norm_stats"]["std"]),
        n_patches=int(meta["norm_stats"]["n_patches"]),
    )
    return net, stats, meta
