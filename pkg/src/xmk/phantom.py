"""Procedural labeled phantoms: ellipsoidal tissue structures rendered per modality.

The phantom is a head-like outer ellipsoid (rim + tissue) containing randomly
placed ellipsoidal structures. Each modality renders the same label field
through its own class-intensity table, so a structure can be high-contrast in
one modality and barely visible in another; the shared multiplicative bias
field keeps inter-modality differences attributable to the tables alone.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from xmk.util import derive_seed
from xmk.volume import Volume, normalize_volume

MODALITIES = ("T1", "T2", "FLAIR")

BACKGROUND, RIM, TISSUE = 0, 1, 2
FIRST_STRUCTURE_CLASS = 3
MIN_STRUCTURE_RADIUS_PX = 4.0

# Fraction of appearance groups each modality renders at nominal contrast.
# T2 anchors keypoints, so it sees the most; FLAIR deliberately sees the
# fewest (and at weaker contrast) so modality combinations add content in a
# stable order: T2 < T2+FLAIR < T2+T1 < T2+T1+FLAIR.
_VISIBILITY_QUOTA = {"T1": 0.70, "T2": 0.75, "FLAIR": 0.30}
_TISSUE_BASE = {"T1": 0.48, "T2": 0.34, "FLAIR": 0.42}
_RIM_BASE = {"T1": 0.88, "T2": 0.95, "FLAIR": 0.82}
_BACKGROUND_LEVEL = 0.02

# Contrast magnitude ranges relative to tissue: visible structures are easy
# for a corner detector, low-visibility ones sit below its threshold.
_VISIBLE_CONTRAST = {"T1": (0.18, 0.42), "T2": (0.18, 0.42), "FLAIR": (0.10, 0.22)}
_HIDDEN_CONTRAST = (0.012, 0.03)


class PhantomError(ValueError):
    """Phantom spec invalid or structures cannot be placed."""


def default_intensity_table(seed: int, n_structures: int) -> dict[str, dict[int, float]]:
    """Build per-modality class -> intensity maps for a seeded phantom.

    Structures are drawn from a handful of appearance groups: one polarity
    and per-modality contrast per group, plus a tiny per-structure offset so
    class intensities stay pairwise distinct. Repeated lookalike structures
    are what make raw patch appearance ambiguous and context discrimination
    worth learning.
    """
    rng = np.random.default_rng(derive_seed(seed, "intensity-table"))
    table: dict[str, dict[int, float]] = {}
    for m in MODALITIES:
        table[m] = {
            BACKGROUND: _BACKGROUND_LEVEL + 0.004 * rng.random(),
            TISSUE: _TISSUE_BASE[m] + rng.uniform(-0.02, 0.02),
            RIM: _RIM_BASE[m] + rng.uniform(-0.02, 0.02),
        }
    n_groups = max(2, min(4, n_structures // 3)) if n_structures else 0
    visible_groups: dict[str, set[int]] = {}
    for m in MODALITIES:
        quota = max(1, round(_VISIBILITY_QUOTA[m] * n_groups)) if n_groups else 0
        visible_groups[m] = set(rng.choice(n_groups, size=min(quota, n_groups), replace=False)) if n_groups else set()
    for g in range(n_groups):
        if not any(g in visible_groups[m] for m in MODALITIES):
            visible_groups["T2"].add(g)  # every group must be detectable somewhere
    groups = []
    for g in range(n_groups):
        polarity = 1.0 if rng.random() < 0.5 else -1.0
        mags = {}
        for m in MODALITIES:
            lo, hi = _VISIBLE_CONTRAST[m] if g in visible_groups[m] else _HIDDEN_CONTRAST
            if polarity < 0:
                hi = min(hi, table[m][TISSUE] - 0.06)  # keep intensities positive
                lo = min(lo, hi)
            mags[m] = rng.uniform(lo, hi)
        groups.append((polarity, mags))
    for i in range(n_structures):
        cls = FIRST_STRUCTURE_CLASS + i
        polarity, mags = groups[int(rng.integers(0, n_groups))]
        jitter = rng.uniform(-0.008, 0.008)
        for m in MODALITIES:
            table[m][cls] = table[m][TISSUE] + polarity * mags[m] + jitter
    for m in MODALITIES:
        values = list(table[m].values())
        while len(set(values)) < len(values):  # exact collisions are vanishingly rare
            for c in table[m]:
                table[m][c] += 1e-5 * rng.random()
            values = list(table[m].values())
    return table


@dataclass(frozen=True)
class PhantomSpec:
    """Deterministic recipe for one phantom; identical specs yield identical volumes."""

    seed: int = 7
    shape: tuple[int, int, int] = (192, 192, 40)
    n_structures: int = 14
    class_intensity_table: dict[str, dict[int, float]] | None = None
    bias_field_strength: float = 0.1
    noise_sigma: float = 0.012  # per-modality acquisition noise, pre-normalization
    spacing_mm: tuple[float, float, float] = (0.5, 0.5, 0.5)

    def __post_init__(self) -> None:
        h, w, d = self.shape
        if min(h, w, d) < 1:
            raise PhantomError(f"shape components must be >= 1, got {self.shape}")
        if self.n_structures < 0:
            raise PhantomError("n_structures must be >= 0")
        if self.bias_field_strength < 0 or self.noise_sigma < 0:
            raise PhantomError("bias_field_strength and noise_sigma must be >= 0")
        object.__setattr__(self, "shape", (int(h), int(w), int(d)))

    def resolved_table(self) -> dict[str, dict[int, float]]:
        if self.class_intensity_table is not None:
            table = {m: {int(c): float(v) for c, v in t.items()} for m, t in self.class_intensity_table.items()}
            for m in MODALITIES:
                if m not in table:
                    raise PhantomError(f"intensity table missing modality {m}")
                values = list(table[m].values())
                if len(set(values)) < len(values):
                    raise PhantomError(f"intensity table for {m} has duplicate class intensities")
            return table
        return default_intensity_table(self.seed, self.n_structures)


def _normalized_grid(shape: tuple[int, int, int], semi_axes: tuple[float, float, float]):
    h, w, d = shape
    cy, cx, cz = (h - 1) / 2.0, (w - 1) / 2.0, (d - 1) / 2.0
    y = (np.arange(h, dtype=np.float32) - cy) / semi_axes[0]
    x = (np.arange(w, dtype=np.float32) - cx) / semi_axes[1]
    z = (np.arange(d, dtype=np.float32) - cz) / semi_axes[2]
    return y[:, None, None], x[None, :, None], z[None, None, :], (cy, cx, cz)


def _place_structures(spec: PhantomSpec, head_axes: tuple[float, float, float], center) -> list[dict]:
    """Rejection-sample ellipsoid structures fully inside the tissue region."""
    rng = np.random.default_rng(derive_seed(spec.seed, "structures"))
    inner = 0.90  # structures stay inside the normalized radius of the tissue
    min_r = MIN_STRUCTURE_RADIUS_PX
    if spec.n_structures > 0 and max(min_r / a for a in head_axes) > inner:
        raise PhantomError(f"shape {spec.shape} too small for structures of radius {min_r}px")
    # Semi-axis ranges shrink with the volume so small phantoms stay feasible;
    # the tight in-plane range keeps structure instances similar in size.
    hi_y = max(min_r + 0.5, min(9.0, 0.30 * head_axes[0]))
    hi_x = max(min_r + 0.5, min(9.0, 0.30 * head_axes[1]))
    hi_z = max(min_r + 0.5, min(8.0, 0.45 * head_axes[2]))
    placed: list[dict] = []
    attempts = 0
    max_attempts = 500 * max(spec.n_structures, 1)
    while len(placed) < spec.n_structures:
        attempts += 1
        if attempts > max_attempts:
            raise PhantomError(
                f"could not place {spec.n_structures} structures of radius >= {min_r}px in shape {spec.shape}"
            )
        u = rng.uniform(-0.75, 0.75, size=3)
        if float(np.sum(u * u)) > 0.75**2:
            continue
        sy = rng.uniform(min_r, hi_y)
        sx = rng.uniform(min_r, hi_x)
        sz = rng.uniform(min_r, hi_z)
        reach = float(np.sqrt(np.sum(u * u))) + max(sy / head_axes[0], sx / head_axes[1], sz / head_axes[2])
        if reach > inner:
            continue
        if any(float(np.sqrt(np.sum((u - q["u"]) ** 2))) < 0.12 for q in placed):
            continue
        placed.append(
            {
                "u": u,
                "center": (center[0] + u[0] * head_axes[0], center[1] + u[1] * head_axes[1], center[2] + u[2] * head_axes[2]),
                "semi_axes": (sy, sx, sz),
            }
        )
    return placed


def _bias_field(shape: tuple[int, int, int], strength: float, seed: int) -> np.ndarray:
    """Smooth multiplicative field 1 + strength * s(x) with |s| <= 1."""
    if strength == 0:
        return np.ones(shape, dtype=np.float32)
    rng = np.random.default_rng(derive_seed(seed, "bias"))
    h, w, d = shape
    y = np.arange(h, dtype=np.float32)[:, None, None] / h
    x = np.arange(w, dtype=np.float32)[None, :, None] / w
    z = np.arange(d, dtype=np.float32)[None, None, :] / d
    waves = np.zeros(shape, dtype=np.float32)
    amps = rng.uniform(0.5, 1.0, size=4)
    for j in range(4):
        f = rng.uniform(0.4, 1.3, size=3) * rng.choice([-1.0, 1.0], size=3)
        phase = rng.uniform(0, 2 * np.pi)
        waves += amps[j] * np.cos(2 * np.pi * (f[0] * y + f[1] * x + f[2] * z) + phase).astype(np.float32)
    waves /= float(np.sum(amps))
    return (1.0 + strength * waves).astype(np.float32)


def generate_phantom(spec: PhantomSpec) -> tuple[Volume, dict[str, Volume]]:
    """Generate the label volume and one normalized rendering per modality.

    Label classes: 0 background, 1 rim, 2 tissue, 3.. structures. Renderings
    map classes through the intensity table, apply the shared bias field, and
    normalize to [-1, 1].
    """
    h, w, d = spec.shape
    head_axes = (0.44 * h, 0.44 * w, 0.62 * d)
    ny, nx, nz, center = _normalized_grid(spec.shape, head_axes)
    r2 = ny**2 + nx**2 + nz**2
    labels = np.zeros(spec.shape, dtype=np.int32)
    labels[r2 <= 1.0] = RIM
    labels[r2 <= 0.92**2] = TISSUE

    for i, s in enumerate(_place_structures(spec, head_axes, center)):
        cy, cx, cz = s["center"]
        sy, sx, sz = s["semi_axes"]
        y0, y1 = max(0, int(cy - sy) - 1), min(h, int(cy + sy) + 2)
        x0, x1 = max(0, int(cx - sx) - 1), min(w, int(cx + sx) + 2)
        z0, z1 = max(0, int(cz - sz) - 1), min(d, int(cz + sz) + 2)
        yy = (np.arange(y0, y1, dtype=np.float32) - cy) / sy
        xx = (np.arange(x0, x1, dtype=np.float32) - cx) / sx
        zz = (np.arange(z0, z1, dtype=np.float32) - cz) / sz
        mask = yy[:, None, None] ** 2 + xx[None, :, None] ** 2 + zz[None, None, :] ** 2 <= 1.0
        box = labels[y0:y1, x0:x1, z0:z1]
        box[mask] = FIRST_STRUCTURE_CLASS + i

    table = spec.resolved_table()
    bias = _bias_field(spec.shape, spec.bias_field_strength, spec.seed)
    n_classes = FIRST_STRUCTURE_CLASS + spec.n_structures
    renderings: dict[str, Volume] = {}
    for m in MODALITIES:
        lut = np.zeros(n_classes, dtype=np.float32)
        for c in range(n_classes):
            if c not in table[m]:
                raise PhantomError(f"intensity table for {m} missing class {c}")
            lut[c] = table[m][c]
        img = lut[labels] * bias
        if spec.noise_sigma > 0:
            noise_rng = np.random.default_rng(derive_seed(spec.seed, "acquisition-noise", m))
            img = img + spec.noise_sigma * noise_rng.standard_normal(spec.shape).astype(np.float32)
        vol = Volume(voxels=img, spacing_mm=spec.spacing_mm, modality_tag=m, name=m)
        renderings[m] = normalize_volume(vol)

    label_volume = Volume(
        voxels=labels.astype(np.float32),
        spacing_mm=spec.spacing_mm,
        modality_tag="LABEL",
        intensity_range=(0.0, float(n_classes - 1)),
        name="LABEL",
    )
    return label_volume, renderings
