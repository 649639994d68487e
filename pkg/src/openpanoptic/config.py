"""Run configuration: defaults, YAML files, and dotted-key overrides.

Precedence is flags > file > built-in defaults. Every leaf key is
addressable both in the YAML file (nested mapping) and on the command
line as a dotted flag, e.g. ``--infer.t 3``.
"""

from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass, field, fields
from typing import Any

import yaml

from .errors import ConfigError


@dataclass
class GridConfig:
    h: int = 96
    w: int = 72
    z: int = 16
    r_min_m: float = 0.5
    r_max_m: float = 12.0
    z_min_m: float = -0.5
    z_max_m: float = 2.5


@dataclass
class HeatmapConfig:
    sigma_voxels: float = 2.0


@dataclass
class LossConfig:
    delta_margin: float = 0.1
    pairs_per_batch: int = 256
    warmup_epochs: int = 10
    sigma_floor: float = 1e-6


@dataclass
class EmbedConfig:
    dim: int = 32
    push_margin: float = 1.5
    var_reg_weight: float = 0.01
    include_unknown_instances: bool = True


@dataclass
class InferConfig:
    t: float = 3.0
    u_floor: float = 0.5
    center_min_score: float = 0.1
    center_top_k: int = 100
    center_nms_radius: float = 8.0
    dbscan_eps: float = 0.5
    dbscan_min_pts: int = 5
    dbscan_use_xyz: bool = False
    no_center_fallback: str = "per_class"  # or "drop"


@dataclass
class TrainSection:
    epochs: int = 60
    batch_scenes: int = 1
    learning_rate: float = 0.01
    lr_decay_epochs: list = field(default_factory=lambda: [45, 55])
    lr_decay_factor: float = 10.0
    w_seg: float = 1.0
    w_center: float = 200.0
    w_uniform: float = 0.1
    w_adaptive: float = 0.1
    w_contrastive: float = 0.7
    w_embed: float = 1.0
    seg_class_balance: bool = True
    semantic_mode: str = "dirichlet"  # or "softmax" (ablation baseline)


@dataclass
class SynthConfig:
    train_scenes: int = 50
    eval_scenes: int = 10
    ground_radius_m: float = 11.5
    ground_hole_m: float = 0.7
    ground_density: float = 25.0
    walls_min: int = 2
    walls_max: int = 3
    wall_length_min_m: float = 3.0
    wall_length_max_m: float = 6.0
    wall_height_min_m: float = 1.5
    wall_height_max_m: float = 2.2
    wall_density: float = 60.0
    boxes_min: int = 1
    boxes_max: int = 2
    box_side_min_m: float = 0.4
    box_side_max_m: float = 0.7
    box_height_min_m: float = 0.4
    box_height_max_m: float = 0.8
    posts_min: int = 1
    posts_max: int = 1
    post_side_min_m: float = 0.12
    post_side_max_m: float = 0.22
    post_height_min_m: float = 1.2
    post_height_max_m: float = 1.8
    unknowns_min: int = 1
    unknowns_max: int = 2
    sphere_radius_min_m: float = 0.25
    sphere_radius_max_m: float = 0.40
    cylinder_radius_min_m: float = 0.2
    cylinder_radius_max_m: float = 0.35
    cylinder_height_min_m: float = 0.5
    cylinder_height_max_m: float = 0.9
    object_density: float = 300.0
    place_r_min_m: float = 2.0
    place_r_max_m: float = 10.0
    place_gap_m: float = 0.6
    noise_sigma_m: float = 0.008
    train_unknown_kinds: list = field(default_factory=lambda: ["sphere"])
    eval_unknown_kinds: list = field(default_factory=lambda: ["cylinder"])


@dataclass
class VocabConfig:
    stuff_ids: list = field(default_factory=lambda: [40, 52])
    thing_ids: list = field(default_factory=lambda: [10, 18])
    unknown_train_ids: list = field(default_factory=lambda: [80])
    unknown_eval_ids: list = field(default_factory=lambda: [81])


@dataclass
class RunConfig:
    seed: int = 7
    grid: GridConfig = field(default_factory=GridConfig)
    heatmap: HeatmapConfig = field(default_factory=HeatmapConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    embed: EmbedConfig = field(default_factory=EmbedConfig)
    infer: InferConfig = field(default_factory=InferConfig)
    train: TrainSection = field(default_factory=TrainSection)
    synth: SynthConfig = field(default_factory=SynthConfig)
    vocab: VocabConfig = field(default_factory=VocabConfig)


_SECTIONS = {f.name: f.type for f in fields(RunConfig) if f.name != "seed"}


def default_config() -> RunConfig:
    return RunConfig()


def _coerce(value: Any, target: Any, key: str) -> Any:
    """Coerce a raw file/flag value onto the type of the current default."""
    if isinstance(target, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str):
            low = value.strip().lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
        raise ConfigError(f"key '{key}': expected a boolean, got {value!r}")
    if isinstance(target, int) and not isinstance(target, bool):
        if isinstance(value, bool):
            raise ConfigError(f"key '{key}': expected an integer, got {value!r}")
        try:
            as_float = float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"key '{key}': expected an integer, got {value!r}")
        as_int = int(as_float)
        if as_int != as_float:
            raise ConfigError(f"key '{key}': expected an integer, got {value!r}")
        return as_int
    if isinstance(target, float):
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"key '{key}': expected a number, got {value!r}")
    if isinstance(target, list):
        if isinstance(value, str):
            parts = [p for p in value.replace(",", " ").split() if p]
            elem = target[0] if target else 0
            return [_coerce(p, elem, key) for p in parts]
        if isinstance(value, list):
            elem = target[0] if target else 0
            return [_coerce(v, elem, key) for v in value]
        raise ConfigError(f"key '{key}': expected a list, got {value!r}")
    if isinstance(target, str):
        return str(value)
    return value


def set_key(cfg: RunConfig, dotted: str, value: Any) -> None:
    """Assign one dotted key, validating that it exists in the schema."""
    parts = dotted.split(".")
    if len(parts) == 1:
        if parts[0] != "seed":
            raise ConfigError(f"unknown configuration key '{dotted}'")
        cfg.seed = _coerce(value, cfg.seed, dotted)
        return
    if len(parts) != 2 or parts[0] not in _SECTIONS:
        raise ConfigError(f"unknown configuration key '{dotted}'")
    section = getattr(cfg, parts[0])
    if not hasattr(section, parts[1]):
        raise ConfigError(f"unknown configuration key '{dotted}'")
    current = getattr(section, parts[1])
    setattr(section, parts[1], _coerce(value, current, dotted))


def apply_mapping(cfg: RunConfig, mapping: dict) -> None:
    """Apply a nested mapping (parsed YAML) onto the config."""
    if not isinstance(mapping, dict):
        raise ConfigError("configuration file must contain a mapping at top level")
    for key, value in mapping.items():
        if key == "seed":
            set_key(cfg, "seed", value)
        elif isinstance(value, dict):
            for sub, subval in value.items():
                set_key(cfg, f"{key}.{sub}", subval)
        else:
            raise ConfigError(f"unknown configuration key '{key}'")


def load_config(path: str | None = None,
                overrides: dict[str, Any] | None = None) -> RunConfig:
    """Build the effective config: defaults <- file <- dotted overrides."""
    cfg = default_config()
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                data = yaml.safe_load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse config file: {exc}") from exc
        if data is not None:
            apply_mapping(cfg, data)
    for dotted, value in (overrides or {}).items():
        set_key(cfg, dotted, value)
    return cfg


def to_mapping(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def dump_config(cfg: RunConfig) -> str:
    """Effective configuration as YAML, stable key order."""
    return yaml.safe_dump(to_mapping(cfg), sort_keys=True)


def leaf_keys() -> list[str]:
    """All dotted keys, for CLI flag generation."""
    keys = ["seed"]
    cfg = RunConfig()
    for name in _SECTIONS:
        section = getattr(cfg, name)
        keys.extend(f"{name}.{f.name}" for f in fields(section))
    return keys


def clone(cfg: RunConfig) -> RunConfig:
    return copy.deepcopy(cfg)
