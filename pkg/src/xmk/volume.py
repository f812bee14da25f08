"""Volume and slice primitives plus the MVOL on-disk container.

A Volume is an immutable (H, W, D) float32 grid with physical spacing; slice
k is the (H, W) plane ``voxels[:, :, k]``. The MVOL file format is a single
UTF-8 JSON header line followed by the raw little-endian float32 payload in
row-major-within-slice, slice-major order.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

MODALITY_TAGS = ("T1", "T2", "FLAIR", "US", "SynUS", "LABEL")

MVOL_MAGIC = "MVOL1"
MVOL_DTYPE = "f32le"
MVOL_ORDER = "row-major-slice-major"


class VolumeError(ValueError):
    """Invalid volume payload, header, or index."""


class DegenerateVolumeWarning(UserWarning):
    """Emitted when an operation hits a documented degenerate-input rule."""


@dataclass(frozen=True)
class Volume:
    """A 3D scalar image grid with per-axis physical spacing in mm."""

    voxels: np.ndarray
    spacing_mm: tuple[float, float, float] = (0.5, 0.5, 0.5)
    modality_tag: str = "T2"
    intensity_range: tuple[float, float] | None = None
    name: str = ""

    def __post_init__(self) -> None:
        vox = np.ascontiguousarray(self.voxels, dtype=np.float32)
        if vox.ndim != 3 or min(vox.shape) < 1:
            raise VolumeError(f"voxels must be a 3D array with all dims >= 1, got shape {vox.shape}")
        if not np.all(np.isfinite(vox)):
            raise VolumeError("voxels contain non-finite values")
        spacing = tuple(float(s) for s in self.spacing_mm)
        if len(spacing) != 3 or any(s <= 0 for s in spacing):
            raise VolumeError(f"spacing_mm components must be > 0, got {self.spacing_mm}")
        if self.modality_tag not in MODALITY_TAGS:
            raise VolumeError(f"unknown modality_tag {self.modality_tag!r}, expected one of {MODALITY_TAGS}")
        rng = self.intensity_range
        if rng is None:
            rng = (float(vox.min()), float(vox.max()))
        vox.flags.writeable = False
        object.__setattr__(self, "voxels", vox)
        object.__setattr__(self, "spacing_mm", spacing)
        object.__setattr__(self, "intensity_range", (float(rng[0]), float(rng[1])))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.voxels.shape  # (H, W, D)

    @property
    def depth(self) -> int:
        return self.voxels.shape[2]


@dataclass(frozen=True)
class Slice:
    """One in-plane (H, W) view of a parent volume."""

    pixels: np.ndarray
    volume_id: str
    slice_index: int


def get_slice(v: Volume, k: int) -> Slice:
    """Return slice k of v; raises VolumeError when k is out of range."""
    if not 0 <= k < v.depth:
        raise VolumeError(f"slice index {k} out of range [0, {v.depth})")
    return Slice(pixels=v.voxels[:, :, k], volume_id=v.name or v.modality_tag, slice_index=k)


def normalize_volume(v: Volume) -> Volume:
    """Linearly map the volume's intensity extremes onto [-1, 1].

    A constant volume has no usable contrast; it maps to all zeros and emits
    a DegenerateVolumeWarning instead of erroring so degenerate phantom
    configurations still run end to end.
    """
    vox = v.voxels
    lo = float(vox.min())
    hi = float(vox.max())
    if hi == lo:
        warnings.warn("constant volume normalized to all zeros", DegenerateVolumeWarning)
        out = np.zeros_like(vox)
    else:
        # divide by the span (not multiply by its reciprocal) so the extremes
        # land on exactly -1 and +1
        out = (2.0 * ((vox - lo) / (hi - lo)) - 1.0).astype(np.float32)
    return replace(v, voxels=out, intensity_range=(-1.0, 1.0))


def _axis_windows(n: int, t: int) -> tuple[slice, slice]:
    """Source and destination slices that center an n-long axis in t samples."""
    if n >= t:
        start = (n - t) // 2
        return slice(start, start + t), slice(0, t)
    start = (t - n) // 2
    return slice(0, n), slice(start, start + n)


def pad_crop_inplane(v: Volume, target: tuple[int, int], pad_value: float = -1.0) -> Volume:
    """Center every slice in a target-sized canvas.

    Borders are filled with -1 (the post-normalization background level);
    oversized inputs are cropped symmetrically.
    """
    th, tw = int(target[0]), int(target[1])
    if th < 1 or tw < 1:
        raise VolumeError(f"target must have components >= 1, got {target}")
    h, w, d = v.shape
    if (h, w) == (th, tw):
        return v
    src_h, dst_h = _axis_windows(h, th)
    src_w, dst_w = _axis_windows(w, tw)
    out = np.full((th, tw, d), pad_value, dtype=np.float32)
    out[dst_h, dst_w, :] = v.voxels[src_h, src_w, :]
    return replace(v, voxels=out)


def save_volume(v: Volume, path) -> None:
    """Write v as an MVOL file; load_volume(path) reproduces it bit-exactly."""
    h, w, d = v.shape
    header = {
        "magic": MVOL_MAGIC,
        "shape": [h, w, d],
        "spacing_mm": list(v.spacing_mm),
        "dtype": MVOL_DTYPE,
        "order": MVOL_ORDER,
        "modality": v.modality_tag,
    }
    payload = np.moveaxis(v.voxels, 2, 0)  # (D, H, W): slice-major, row-major inside
    with open(path, "wb") as f:
        f.write(json.dumps(header).encode("utf-8") + b"\n")
        f.write(np.ascontiguousarray(payload, dtype="<f4").tobytes())


def load_volume(path) -> Volume:
    """Read an MVOL file, rejecting malformed headers and size mismatches."""
    p = Path(path)
    if not p.is_file():
        raise VolumeError(f"no such volume file: {p}")
    with open(p, "rb") as f:
        header_line = f.readline()
        if not header_line.endswith(b"\n"):
            raise VolumeError(f"{p}: missing header line terminator")
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise VolumeError(f"{p}: unparseable MVOL header: {exc}") from exc
        if header.get("magic") != MVOL_MAGIC:
            raise VolumeError(f"{p}: bad magic {header.get('magic')!r}")
        if header.get("dtype") != MVOL_DTYPE or header.get("order") != MVOL_ORDER:
            raise VolumeError(f"{p}: unsupported dtype/order {header.get('dtype')}/{header.get('order')}")
        shape = header.get("shape")
        if not (isinstance(shape, list) and len(shape) == 3 and all(isinstance(s, int) and s >= 1 for s in shape)):
            raise VolumeError(f"{p}: bad shape field {shape!r}")
        h, w, d = shape
        n = h * w * d
        blob = f.read()
    if len(blob) != 4 * n:
        raise VolumeError(f"{p}: payload holds {len(blob) // 4} voxels, header declares {n}")
    vox = np.frombuffer(blob, dtype="<f4").reshape(d, h, w)
    vox = np.moveaxis(vox, 0, 2)  # back to (H, W, D)
    if not np.all(np.isfinite(vox)):
        raise VolumeError(f"{p}: payload contains non-finite values")
    spacing = header.get("spacing_mm", [0.5, 0.5, 0.5])
    return Volume(
        voxels=vox,
        spacing_mm=tuple(float(s) for s in spacing),
        modality_tag=str(header.get("modality", "T2")),
        name=p.stem,
    )
