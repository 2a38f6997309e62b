"""Flat ``key = value`` run configuration shared by every command."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError
from .evaluation import SynthSpec
from .features import LevelConfig
from .flow import FlowConfig
from .learn import TrainConfig
from .match import MatchConfig
from .match3d import Match3DConfig

# keys naming input files; they must exist when the config is loaded
INPUT_PATH_KEYS = ("heads",)


@dataclass
class RunConfig:
    # feature hierarchy
    scale_factors: tuple[int, ...] = (1, 4)
    cell_size: int = 4
    grid: int = 3
    orientation_bins: int = 8
    head_out_dim: int = 64
    # training
    margin: float = 1.0
    positive_window: int = 8
    learning_rate: float = 1e-3
    iterations: int = 2000
    weight_decay: float = 1e-4
    pairs_per_batch: int = 3
    correspondences_per_pair: int = 1000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    # matching
    refine_radius: float = 32.0
    dense_stride: int = 1
    # flow
    fb_threshold: float = 0.0
    motion_window: float = 240.0
    interp_k: int = 25
    interp_sigma: float = 25.0
    min_affine_neighbors: int = 3
    # evaluation
    pck_thresholds: tuple[float, ...] = (1.0, 2.0, 5.0, 10.0, 15.0, 20.0, 30.0)
    # synthesis
    synth_transform: str = "similarity"
    synth_tx: tuple[float, ...] = (-8.0, 8.0)
    synth_ty: tuple[float, ...] = (-8.0, 8.0)
    synth_rotation_deg: tuple[float, ...] = (-5.0, 5.0)
    synth_scale: tuple[float, ...] = (0.95, 1.05)
    synth_noise_sigma: float = 0.0
    synth_grid_stride: int = 1
    # 3D search
    region_edge: float = 60.0
    subvolume_edge: float = 30.0
    coarse_gap: float = 3.0
    fine_gap: float = 1.0
    refine_radius_3d: float = 15.0
    deep_pool: int = 3
    shallow_pool: int = 5
    voxel_size: float = 1.0
    # inputs
    heads: str = ""

    # --- module configs ---
    def level_configs(self) -> list[LevelConfig]:
        return [
            LevelConfig(i, f, self.cell_size, self.grid, self.orientation_bins, self.head_out_dim)
            for i, f in enumerate(self.scale_factors)
        ]

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            margin=self.margin,
            positive_window=self.positive_window,
            learning_rate=self.learning_rate,
            iterations=self.iterations,
            weight_decay=self.weight_decay,
            pairs_per_batch=self.pairs_per_batch,
            correspondences_per_pair=self.correspondences_per_pair,
            adam_beta1=self.adam_beta1,
            adam_beta2=self.adam_beta2,
            adam_eps=self.adam_eps,
            rng_seed=self.seed,
        )

    def match_config(self) -> MatchConfig:
        return MatchConfig(self.refine_radius, self.dense_stride)

    def flow_config(self) -> FlowConfig:
        return FlowConfig(
            self.fb_threshold, self.motion_window, self.interp_k, self.interp_sigma, self.min_affine_neighbors
        )

    def synth_spec(self) -> SynthSpec:
        return SynthSpec(
            transform=self.synth_transform,
            tx_range=_range(self.synth_tx),
            ty_range=_range(self.synth_ty),
            rotation_deg_range=_range(self.synth_rotation_deg),
            scale_range=_range(self.synth_scale),
            noise_sigma=self.synth_noise_sigma,
            rng_seed=self.seed,
            grid_stride=self.synth_grid_stride,
        )

    def match3d_config(self) -> Match3DConfig:
        return Match3DConfig(
            self.region_edge, self.subvolume_edge, self.coarse_gap, self.fine_gap, self.refine_radius_3d
        )


def _range(values) -> tuple[float, float]:
    """A single value fixes the parameter; two values give a uniform range."""
    if len(values) == 1:
        return (values[0], values[0])
    if len(values) != 2:
        raise ConfigError(f"expected 1 or 2 values, got {values}")
    return (values[0], values[1])


_DEFAULTS = RunConfig()


def _convert(key: str, raw: str):
    default = getattr(_DEFAULTS, key)
    try:
        if isinstance(default, tuple):
            elem = type(default[0])
            return tuple(elem(v) for v in raw.split(",") if v.strip())
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes")
        return type(default)(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def parse_config(text: str, base_dir: Path | None = None) -> RunConfig:
    known = {f.name for f in fields(RunConfig)}
    values = {}
    for no, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {no}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {no}: unknown key {key!r}")
        values[key] = _convert(key, raw)
    cfg = RunConfig(**values)
    for key in INPUT_PATH_KEYS:
        val = getattr(cfg, key)
        if val:
            p = Path(val)
            if base_dir is not None and not p.is_absolute():
                p = base_dir / p
            if not p.exists():
                raise ConfigError(f"{key}: input file not found: {p}")
            setattr(cfg, key, str(p))
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    return parse_config(path.read_text(), base_dir=path.parent)


def format_config(cfg: RunConfig) -> str:
    lines = []
    for f in fields(cfg):
        val = getattr(cfg, f.name)
        if isinstance(val, tuple):
            val = ",".join(repr(v) for v in val)
        elif isinstance(val, float):
            val = repr(val)
        lines.append(f"{f.name} = {val}")
    return "\n".join(lines) + "\n"


def with_overrides(cfg: RunConfig, **kwargs) -> RunConfig:
    return dataclasses.replace(cfg, **{k: v for k, v in kwargs.items() if v is not None})
