"""Texture-randomized synthetic counterparts of a multi-modality phantom.

The synthesizer stands in for a learned MR-to-US generator while keeping the
same contract: one reference volume paired with p texture/content variants.
Per-slice pipeline: fuse the selected modality renderings with visibility
weights, remap intensities through a seeded monotone warp, suppress a seeded
fraction of structure contrasts, multiply by clamped Gamma speckle, blur
in-plane, and renormalize to [-1, 1].
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from xmk.phantom import FIRST_STRUCTURE_CLASS, MODALITIES, RIM, TISSUE
from xmk.util import derive_seed, read_json, write_json
from xmk.volume import Volume, load_volume, normalize_volume, save_volume

# Default texture ladders for the per-combo sampling parameters: sample j of
# every combo shares these knobs but gets its own speckle/warp/dropout seeds.
DEFAULT_SPECKLE_LADDER = (0.3, 0.4, 0.5, 0.6)
DEFAULT_BLUR_LADDER = (0.9, 1.2, 1.5, 1.8)
DEFAULT_DROPOUT_LADDER = (0.15, 0.25, 0.35, 0.45)

# The fused image is band-limited before texturing so variants carry only
# their own fine-scale texture, not the reference's acquisition noise.
FUSION_BAND_LIMIT_SIGMA = 0.6

# Bone is barely echogenic: the synthetic acquisition renders the rim close
# to tissue level, keeping only this residual of its MR contrast.
RIM_ECHO_RESIDUAL = 0.15

# The texture step couples a smooth multiplicative gain field (regional
# brightness variation, like probe gain/TGC differences) to the fine-scale
# speckle; its amplitude scales with speckle_strength by this factor.
GAIN_FIELD_FACTOR = 1.0

DEFAULT_COMBOS: tuple[tuple[str, ...], ...] = (
    ("T1",),
    ("T2",),
    ("FLAIR",),
    ("T1", "T2"),
    ("T1", "FLAIR"),
    ("T2", "FLAIR"),
    ("T1", "T2", "FLAIR"),
)

_FUSION_WEIGHT_FLOOR = 0.1
_DROPOUT_RESIDUAL = 0.1


class SynthesisError(ValueError):
    """Invalid synthesis configuration or inputs."""


@dataclass(frozen=True)
class SynthesisConfig:
    """One synthesis mode; a pure function of (inputs, config) selects the output."""

    modalities: tuple[str, ...]
    sampling_seed: int
    speckle_strength: float = 0.3
    blur_sigma_px: float = 1.0
    dropout_rate: float = 0.2
    intensity_warp_seed: int | None = None  # None keeps the identity warp
    mode: str = ""

    def __post_init__(self) -> None:
        mods = tuple(self.modalities)
        if not mods:
            raise SynthesisError("modalities must be a non-empty subset of " + str(MODALITIES))
        for m in mods:
            if m not in MODALITIES:
                raise SynthesisError(f"unknown modality {m!r}")
        if len(set(mods)) != len(mods):
            raise SynthesisError(f"duplicate modalities in {mods}")
        if self.speckle_strength < 0 or self.blur_sigma_px < 0:
            raise SynthesisError("speckle_strength and blur_sigma_px must be >= 0")
        if not 0.0 <= self.dropout_rate <= 1.0:
            raise SynthesisError("dropout_rate must be in [0, 1]")
        object.__setattr__(self, "modalities", mods)

    def to_dict(self) -> dict:
        return {
            "modalities": list(self.modalities),
            "sampling_seed": self.sampling_seed,
            "speckle_strength": self.speckle_strength,
            "blur_sigma_px": self.blur_sigma_px,
            "dropout_rate": self.dropout_rate,
            "intensity_warp_seed": self.intensity_warp_seed,
            "mode": self.mode,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SynthesisConfig":
        return cls(
            modalities=tuple(d["modalities"]),
            sampling_seed=int(d["sampling_seed"]),
            speckle_strength=float(d["speckle_strength"]),
            blur_sigma_px=float(d["blur_sigma_px"]),
            dropout_rate=float(d["dropout_rate"]),
            intensity_warp_seed=None if d.get("intensity_warp_seed") is None else int(d["intensity_warp_seed"]),
            mode=str(d.get("mode", "")),
        )


def class_means(image: np.ndarray, labels: np.ndarray, n_classes: int) -> np.ndarray:
    """Mean intensity per label class; empty classes yield NaN."""
    flat = labels.ravel()
    sums = np.bincount(flat, weights=image.ravel().astype(np.float64), minlength=n_classes)
    counts = np.bincount(flat, minlength=n_classes)
    with np.errstate(invalid="ignore"):
        return sums / counts


def fuse_renderings(renderings: dict[str, Volume], label_volume: Volume, modalities: tuple[str, ...]) -> np.ndarray:
    """Per-class visibility-weighted average of the selected renderings.

    A modality's weight for a class grows with that class's contrast against
    tissue in the modality, so structures invisible in one input are carried
    by the inputs that do see them. A uniform floor keeps contrast-free
    classes (tissue itself, background) at a plain average. The result is
    band-limited in-plane: the synthetic acquisition carries its own texture,
    not the reference's fine-scale noise.
    """
    labels = label_volume.voxels.astype(np.int32)
    n_classes = int(labels.max()) + 1
    weights = np.zeros((len(modalities), n_classes), dtype=np.float64)
    for i, m in enumerate(modalities):
        means = class_means(renderings[m].voxels, labels, n_classes)
        tissue_level = means[TISSUE] if n_classes > TISSUE and np.isfinite(means[TISSUE]) else np.nanmean(means)
        contrast = np.abs(means - tissue_level)
        contrast[~np.isfinite(contrast)] = 0.0
        weights[i] = contrast + _FUSION_WEIGHT_FLOOR
    wsum = weights.sum(axis=0)
    fused = np.zeros(labels.shape, dtype=np.float64)
    for i, m in enumerate(modalities):
        fused += (weights[i] / wsum)[labels] * renderings[m].voxels
    rim_mask = labels == RIM
    tissue_mask = labels == TISSUE
    if rim_mask.any() and tissue_mask.any():
        tissue_level = float(fused[tissue_mask].mean())
        fused[rim_mask] = tissue_level * (1.0 - RIM_ECHO_RESIDUAL) + fused[rim_mask] * RIM_ECHO_RESIDUAL
    fused = ndimage.gaussian_filter(
        fused.astype(np.float32), sigma=(FUSION_BAND_LIMIT_SIGMA, FUSION_BAND_LIMIT_SIGMA, 0.0)
    )
    return fused.astype(np.float32)


def smooth_gain_field(shape: tuple[int, int, int], seed: int, strength: float) -> np.ndarray:
    """Seeded smooth multiplicative field 1 + strength * s(x) with |s| <= 1.

    A handful of low-frequency cosine waves produce regional brightness
    variation at roughly patch scale, far smoother than speckle.
    """
    if strength <= 0:
        return np.ones(shape, dtype=np.float32)
    rng = np.random.default_rng(derive_seed(seed, "gain-field"))
    h, w, d = shape
    y = np.arange(h, dtype=np.float32)[:, None, None] / h
    x = np.arange(w, dtype=np.float32)[None, :, None] / w
    z = np.arange(d, dtype=np.float32)[None, None, :] / d
    waves = np.zeros(shape, dtype=np.float32)
    amps = rng.uniform(0.5, 1.0, size=4)
    for j in range(4):
        f = rng.uniform(1.2, 3.0, size=3) * rng.choice([-1.0, 1.0], size=3)
        phase = rng.uniform(0, 2 * np.pi)
        waves += amps[j] * np.cos(2 * np.pi * (f[0] * y + f[1] * x + f[2] * z) + phase).astype(np.float32)
    waves /= float(np.sum(amps))
    return (1.0 + strength * waves).astype(np.float32)


def intensity_warp(seed: int, n_knots: int = 13) -> tuple[np.ndarray, np.ndarray]:
    """Seeded strictly-increasing piecewise-linear map of [-1, 1] onto itself."""
    rng = np.random.default_rng(derive_seed(seed, "warp-knots"))
    xs = np.linspace(-1.0, 1.0, n_knots)
    gaps = rng.uniform(0.15, 2.2, size=n_knots - 1)
    ys = np.concatenate([[-1.0], -1.0 + 2.0 * np.cumsum(gaps) / np.sum(gaps)])
    ys[-1] = 1.0
    return xs, ys


def _apply_dropout(image: np.ndarray, labels: np.ndarray, cfg: SynthesisConfig) -> np.ndarray:
    """Suppress the contrast of a seeded fraction of structures.

    Dropped structures are blended toward the mean intensity of a thin
    surrounding shell (per slice), which tracks the local bias level, leaving
    a faint residual instead of a hard hole.
    """
    structure_classes = sorted(int(c) for c in np.unique(labels) if c >= FIRST_STRUCTURE_CLASS)
    n_drop = int(round(cfg.dropout_rate * len(structure_classes)))
    if n_drop == 0:
        return image
    rng = np.random.default_rng(derive_seed(cfg.sampling_seed, "dropout"))
    dropped = rng.choice(np.asarray(structure_classes), size=n_drop, replace=False)
    out = image.copy()
    tissue_mean = float(image[labels == TISSUE].mean()) if np.any(labels == TISSUE) else float(image.mean())
    for cls in sorted(int(c) for c in dropped):
        mask3 = labels == cls
        for k in np.flatnonzero(mask3.any(axis=(0, 1))):
            m2 = mask3[:, :, k]
            shell = ndimage.binary_dilation(m2, iterations=2) & ~m2 & (labels[:, :, k] == TISSUE)
            fill = float(out[:, :, k][shell].mean()) if shell.any() else tissue_mean
            plane = out[:, :, k]
            plane[m2] = fill * (1.0 - _DROPOUT_RESIDUAL) + plane[m2] * _DROPOUT_RESIDUAL
    return out


def synthesize_us(renderings: dict[str, Volume], label_volume: Volume, cfg: SynthesisConfig) -> Volume:
    """Render one synthetic US-like volume from the phantom renderings."""
    for m in cfg.modalities:
        if m not in renderings:
            raise SynthesisError(f"modality {m} not among available renderings {sorted(renderings)}")
    reference = renderings[cfg.modalities[0]]
    labels = label_volume.voxels.astype(np.int32)

    img = fuse_renderings(renderings, label_volume, cfg.modalities)

    if cfg.intensity_warp_seed is not None:
        xs, ys = intensity_warp(cfg.intensity_warp_seed)
        img = np.interp(np.clip(img, -1.0, 1.0), xs, ys).astype(np.float32)

    img = _apply_dropout(img, labels, cfg)

    if cfg.speckle_strength > 0:
        rng = np.random.default_rng(derive_seed(cfg.sampling_seed, "speckle"))
        k = 1.0 / cfg.speckle_strength**2
        field = rng.gamma(shape=k, scale=1.0 / k, size=img.shape).astype(np.float32)
        gain = smooth_gain_field(img.shape, cfg.sampling_seed, GAIN_FIELD_FACTOR * cfg.speckle_strength)
        shifted = (img + 1.0) * 0.5
        top = float(shifted.max())
        shifted = np.clip(shifted * field * gain, 0.0, top)  # clamp to the pre-speckle intensity range
        img = shifted * 2.0 - 1.0

    if cfg.blur_sigma_px > 0:
        img = ndimage.gaussian_filter(img, sigma=(cfg.blur_sigma_px, cfg.blur_sigma_px, 0.0))

    vol = Volume(
        voxels=img.astype(np.float32),
        spacing_mm=reference.spacing_mm,
        modality_tag="SynUS",
        name=cfg.mode or "SynUS",
    )
    return normalize_volume(vol)


@dataclass(frozen=True)
class VariantSet:
    """A reference volume plus its ordered texture/content variants."""

    reference: Volume
    variants: tuple[tuple[SynthesisConfig, Volume], ...]

    def __post_init__(self) -> None:
        for cfg, vol in self.variants:
            if vol.shape != self.reference.shape:
                raise SynthesisError(f"variant {cfg.mode!r} shape {vol.shape} != reference {self.reference.shape}")

    @property
    def p(self) -> int:
        return len(self.variants)

    def configs(self) -> list[SynthesisConfig]:
        return [cfg for cfg, _ in self.variants]

    def subset(self, modes: list[str]) -> "VariantSet":
        wanted = set(modes)
        kept = tuple((c, v) for c, v in self.variants if c.mode in wanted)
        missing = wanted - {c.mode for c, _ in kept}
        if missing:
            raise SynthesisError(f"unknown variant modes: {sorted(missing)}")
        return VariantSet(reference=self.reference, variants=kept)

    def without(self, modes: list[str]) -> "VariantSet":
        excluded = set(modes)
        missing = excluded - {c.mode for c, _ in self.variants}
        if missing:
            raise SynthesisError(f"unknown variant modes: {sorted(missing)}")
        return VariantSet(
            reference=self.reference,
            variants=tuple((c, v) for c, v in self.variants if c.mode not in excluded),
        )


def mode_name(combo: tuple[str, ...], sample: int) -> str:
    return "+".join(combo) + f"_{sample}"


def generate_variant_set(
    renderings: dict[str, Volume],
    label_volume: Volume,
    combos: tuple[tuple[str, ...], ...] = DEFAULT_COMBOS,
    samples_per_combo: int = 4,
    base_seed: int = 0,
    dropout_ladder: tuple[float, ...] = DEFAULT_DROPOUT_LADDER,
    speckle_ladder: tuple[float, ...] = DEFAULT_SPECKLE_LADDER,
    blur_ladder: tuple[float, ...] = DEFAULT_BLUR_LADDER,
    reference_modality: str = "T2",
) -> VariantSet:
    """Synthesize |combos| x samples_per_combo variants (the default is 7 x 4 = 28)."""
    if not combos:
        raise SynthesisError("combos must be non-empty")
    if samples_per_combo < 1:
        raise SynthesisError("samples_per_combo must be >= 1")
    variants: list[tuple[SynthesisConfig, Volume]] = []
    for combo in combos:
        combo_key = "+".join(combo)  # seed by content so combos are stable across combo lists
        for j in range(samples_per_combo):
            cfg = SynthesisConfig(
                modalities=tuple(combo),
                sampling_seed=derive_seed(base_seed, "sample", combo_key, j),
                speckle_strength=speckle_ladder[j % len(speckle_ladder)],
                blur_sigma_px=blur_ladder[j % len(blur_ladder)],
                dropout_rate=dropout_ladder[j % len(dropout_ladder)],
                intensity_warp_seed=derive_seed(base_seed, "warp", combo_key, j),
                mode=mode_name(tuple(combo), j),
            )
            variants.append((cfg, synthesize_us(renderings, label_volume, cfg)))
    return VariantSet(reference=renderings[reference_modality], variants=tuple(variants))


def save_variant_set(vs: VariantSet, directory) -> None:
    """Persist variants as <mode>.mvol files plus a manifest of every config."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries = []
    for cfg, vol in vs.variants:
        fname = f"{cfg.mode}.mvol"
        save_volume(vol, d / fname)
        entries.append({"file": fname, "config": cfg.to_dict()})
    write_json(d / "manifest.json", {"p": vs.p, "variants": entries})


def load_variant_set(directory, reference: Volume) -> VariantSet:
    """Load a persisted variant set; the reference volume is supplied by the caller."""
    d = Path(directory)
    manifest = read_json(d / "manifest.json")
    variants = []
    for entry in manifest["variants"]:
        cfg = SynthesisConfig.from_dict(entry["config"])
        variants.append((cfg, load_volume(d / entry["file"])))
    return VariantSet(reference=reference, variants=tuple(variants))
