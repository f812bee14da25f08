"""Run configuration: one file (TOML or JSON) drives every subcommand.

Every field has a default; unknown keys are rejected so typos fail loudly.
Command-line flags (--seed, --out) override file values.
"""

from __future__ import annotations

import dataclasses
import json
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised only on 3.10
    import tomli as tomllib


class ConfigError(ValueError):
    """Malformed, unknown, or missing configuration."""


@dataclass
class PhantomSection:
    shape: tuple[int, int, int] = (192, 192, 40)
    n_structures: int = 20
    bias_field_strength: float = 0.1
    noise_sigma: float = 0.012
    spacing_mm: float = 0.5


@dataclass
class SynthesisSection:
    samples_per_combo: int = 4
    dropout_ladder: tuple[float, ...] = (0.15, 0.25, 0.35, 0.45)
    speckle_ladder: tuple[float, ...] = (0.3, 0.4, 0.5, 0.6)
    blur_ladder: tuple[float, ...] = (0.9, 1.2, 1.5, 1.8)
    combos: tuple[tuple[str, ...], ...] | None = None  # None selects the 7 default combos
    eval_modes: int = 4
    eval_dropout_ladder: tuple[float, ...] = (0.3, 0.4, 0.35, 0.45)
    eval_speckle_ladder: tuple[float, ...] = (0.45, 0.55, 0.5, 0.6)
    eval_blur_ladder: tuple[float, ...] = (1.0, 1.2, 1.1, 1.3)


@dataclass
class DetectionSection:
    max_keypoints: int = 256
    nms_radius_px: int = 2
    response_threshold: float = 3e-3
    border_margin_px: int = 32


@dataclass
class DatasetSection:
    patch_size: int = 64
    margin_px: float = 5.0
    min_votes: int = 3
    cluster_eps_px: float = 5.0
    cluster_min_samples: int = 1
    exclude_modes: tuple[str, ...] = ()


@dataclass
class TrainSection:
    learning_rate: float = 1e-3
    batch_size: int = 256
    margin: float = 1.0
    epochs: int = 50
    descriptor_dim: int = 128


@dataclass
class MatchSection:
    n_mr: int = 200
    m_us_cap: int = 1500
    knn_k: int = 2
    ratio_threshold: float = 0.9
    min_similarity: float = 0.5
    slices: str | tuple[int, ...] = "all"
    volume: str = "eval_0"  # variant mode name to match against
    save_plots: bool = False


@dataclass
class EvalSection:
    tolerance_px: float = 4.0
    area_mode: str = "hull"
    warp_amplitude_px: float = 0.0
    slices: str | tuple[int, ...] = "all"
    save_plots: bool = True


@dataclass
class RetrieveSection:
    n_targets: int = 10
    volume: str = "eval_0"
    min_slice_keypoints: int = 20


@dataclass
class AblateSection:
    epochs: int = 15
    eval_slices: int = 10
    eval_volumes: int = 2
    seeds: tuple[int, ...] = ()  # empty means (global seed,)


@dataclass
class RunConfig:
    seed: int = 7
    out: str | None = None  # resolved by the CLI: flag > config > $XMK_OUT > "out"
    phantom: PhantomSection = field(default_factory=PhantomSection)
    synthesis: SynthesisSection = field(default_factory=SynthesisSection)
    detection: DetectionSection = field(default_factory=DetectionSection)
    dataset: DatasetSection = field(default_factory=DatasetSection)
    train: TrainSection = field(default_factory=TrainSection)
    match: MatchSection = field(default_factory=MatchSection)
    eval: EvalSection = field(default_factory=EvalSection)
    retrieve: RetrieveSection = field(default_factory=RetrieveSection)
    ablate: AblateSection = field(default_factory=AblateSection)

    def to_dict(self) -> dict:
        def convert(obj):
            if dataclasses.is_dataclass(obj):
                return {f.name: convert(getattr(obj, f.name)) for f in fields(obj)}
            if isinstance(obj, tuple):
                return [convert(v) for v in obj]
            return obj

        return convert(self)


_SECTIONS = {
    f.name: f
    for f in fields(RunConfig)
    if f.default_factory is not dataclasses.MISSING and dataclasses.is_dataclass(f.default_factory())
}


def _coerce(name: str, value, default):
    """Match the default's container type; scalars pass through."""
    if isinstance(default, tuple) or (default is None and isinstance(value, list)):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{name}: expected a list, got {type(value).__name__}")
        return tuple(tuple(v) if isinstance(v, (list, tuple)) else v for v in value)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name}: expected a number, got {value!r}")
        return int(value)
    if isinstance(default, float):
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise ConfigError(f"{name}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str) and isinstance(value, (list, tuple)):
        return tuple(int(v) for v in value)  # "all" | [indices] fields
    return value


def _fill_section(section_obj, data: dict, prefix: str):
    known = {f.name: f for f in fields(section_obj)}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"unknown config key: {prefix}.{key}")
        default = getattr(section_obj, key)
        setattr(section_obj, key, _coerce(f"{prefix}.{key}", value, default))
    return section_obj


def config_from_dict(data: dict) -> RunConfig:
    cfg = RunConfig()
    for key, value in data.items():
        if key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"config section {key!r} must be a table/object")
            _fill_section(getattr(cfg, key), value, key)
        elif key == "seed":
            cfg.seed = int(value)
        elif key == "out":
            cfg.out = str(value)
        else:
            raise ConfigError(f"unknown config key: {key}")
    return cfg


def load_config(path: str | Path | None) -> RunConfig:
    """Load TOML (default) or JSON config; None yields all defaults."""
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    raw = p.read_bytes()
    if p.suffix.lower() == ".json" or raw.lstrip()[:1] == b"{":
        try:
            data = json.loads(raw.decode("utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON: {exc}") from exc
    else:
        try:
            data = tomllib.loads(raw.decode("utf-8"))
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{p}: invalid TOML: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{p}: top-level config must be a table/object")
    return config_from_dict(data)
