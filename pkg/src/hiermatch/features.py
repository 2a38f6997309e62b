"""Multi-level feature hierarchy.

Each level downsamples the input by its scale factor, computes a dense
orientation-histogram descriptor per downsampled pixel, then projects it
through a per-level trainable linear head followed by L2 normalization.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import FeatureMap, Image, downsample, l2_normalize, to_grayscale
from .errors import (
    BadMagicError,
    DimMismatchError,
    DimOverflowError,
    HierarchyTooShallowError,
    ImageTooSmallError,
    TruncatedFileError,
)

HFM_MAGIC = b"HFM1"
_HFM_HEADER = struct.Struct("<5IB")
_MAX_ELEMENTS = 2**31 - 1


@dataclass(frozen=True)
class LevelConfig:
    level_id: int
    scale_factor: int
    cell_size: int = 4
    grid: int = 3
    orientation_bins: int = 8
    head_out_dim: int = 64

    @property
    def base_dim(self) -> int:
        return self.grid * self.grid * self.orientation_bins


def default_level_configs(scale_factors: Sequence[int] = (1, 4), **kwargs) -> list[LevelConfig]:
    return [LevelConfig(level_id=i, scale_factor=f, **kwargs) for i, f in enumerate(scale_factors)]


@dataclass
class EmbeddingHead:
    """Per-level linear projection, ``out = weights.T @ d + bias``."""

    level_id: int
    weights: np.ndarray  # (base_dim, out_dim)
    bias: np.ndarray  # (out_dim,)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[1],):
            raise DimMismatchError(
                f"head weights {self.weights.shape} and bias {self.bias.shape} disagree"
            )

    def copy(self) -> "EmbeddingHead":
        return EmbeddingHead(self.level_id, self.weights.copy(), self.bias.copy())


def xavier_head(cfg: LevelConfig, rng: np.random.Generator) -> EmbeddingHead:
    """Xavier-uniform weights, zero bias."""
    fan_in, fan_out = cfg.base_dim, cfg.head_out_dim
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
    return EmbeddingHead(cfg.level_id, w, np.zeros(fan_out))


def init_heads(cfgs: Sequence[LevelConfig], seed: int) -> list[EmbeddingHead]:
    rng = np.random.default_rng(seed)
    return [xavier_head(cfg, rng) for cfg in cfgs]


@dataclass
class FeatureHierarchy:
    """Levels ordered shallow (smallest scale factor) to deep."""

    configs: list[LevelConfig]
    maps: list[FeatureMap] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.maps)

    @property
    def shallow(self) -> FeatureMap:
        return self.maps[0]

    @property
    def deep(self) -> FeatureMap:
        return self.maps[-1]


def _orientation_votes(gray: np.ndarray, bins: int) -> np.ndarray:
    """Per-pixel gradient magnitude placed into its hard orientation bin. Shape (h, w, bins)."""
    p = np.pad(gray, 1, mode="edge")
    gx = (p[1:-1, 2:] - p[1:-1, :-2]) / 2.0
    gy = (p[2:, 1:-1] - p[:-2, 1:-1]) / 2.0
    mag = np.hypot(gx, gy)
    theta = np.mod(np.arctan2(gy, gx), 2 * np.pi)
    idx = np.floor(theta * bins / (2 * np.pi)).astype(np.int64) % bins
    votes = np.zeros(gray.shape + (bins,))
    np.put_along_axis(votes, idx[..., None], mag[..., None], axis=-1)
    return votes


def compute_base_descriptors(img: Image, cfg: LevelConfig) -> FeatureMap:
    """Dense orientation-histogram descriptors on the image downsampled by ``cfg.scale_factor``.

    The descriptor of downsampled pixel ``p`` concatenates, over a ``grid x grid``
    arrangement of ``cell_size``-pixel cells spanning rows/cols
    ``p - R .. p - R + grid*cell_size - 1`` (``R = grid*cell_size // 2``), the
    histogram of gradient magnitudes per orientation bin. Borders use replicate
    padding. Output is not normalized.
    """
    if img.channels != 1:
        raise ValueError("compute_base_descriptors expects a grayscale image")
    f, c, g = cfg.scale_factor, cfg.cell_size, cfg.grid
    need = g * c * f
    if img.width < need or img.height < need:
        raise ImageTooSmallError(
            f"level {cfg.level_id} needs at least {need}x{need} pixels, "
            f"got {img.width}x{img.height}"
        )
    gray = downsample(img, f).gray
    h, w = gray.shape
    votes = _orientation_votes(gray, cfg.orientation_bins)

    span = g * c
    r = span // 2
    padded = np.pad(votes, ((r, span - r - 1), (r, span - r - 1), (0, 0)), mode="edge")
    # integral image -> c x c box sums at every top-left position
    integral = np.zeros((padded.shape[0] + 1, padded.shape[1] + 1, padded.shape[2]))
    integral[1:, 1:] = padded.cumsum(0).cumsum(1)
    box = integral[c:, c:] - integral[:-c, c:] - integral[c:, :-c] + integral[:-c, :-c]

    cells = []
    for i in range(g):
        for j in range(g):
            cells.append(box[i * c: i * c + h, j * c: j * c + w])
    desc = np.concatenate(cells, axis=-1)
    return FeatureMap(desc, level_id=cfg.level_id, scale_factor=f, normalized=False)


def apply_head(base: FeatureMap, head: EmbeddingHead) -> FeatureMap:
    if base.dim != head.weights.shape[0]:
        raise DimMismatchError(
            f"descriptor dim {base.dim} does not match head input {head.weights.shape[0]}"
        )
    out = l2_normalize(base.data @ head.weights + head.bias)
    return FeatureMap(out, level_id=base.level_id, scale_factor=base.scale_factor, normalized=True)


def compute_base_levels(img: Image, cfgs: Sequence[LevelConfig]) -> list[FeatureMap]:
    if len(cfgs) < 2:
        raise HierarchyTooShallowError(f"a hierarchy needs at least 2 levels, got {len(cfgs)}")
    factors = [cfg.scale_factor for cfg in cfgs]
    if any(b <= a for a, b in zip(factors, factors[1:])):
        raise ValueError(f"scale factors must strictly increase, got {factors}")
    gray = to_grayscale(img)
    return [compute_base_descriptors(gray, cfg) for cfg in cfgs]


def heads_for(cfgs: Sequence[LevelConfig], heads: Sequence[EmbeddingHead]) -> list[EmbeddingHead]:
    """Order heads to match ``cfgs`` by level id."""
    by_id = {h.level_id: h for h in heads}
    missing = [cfg.level_id for cfg in cfgs if cfg.level_id not in by_id]
    if missing:
        raise DimMismatchError(f"no head for level(s) {missing}")
    return [by_id[cfg.level_id] for cfg in cfgs]


def hierarchy_from_base(
    cfgs: Sequence[LevelConfig], base: Sequence[FeatureMap], heads: Sequence[EmbeddingHead]
) -> FeatureHierarchy:
    heads = heads_for(cfgs, heads)
    return FeatureHierarchy(list(cfgs), [apply_head(b, h) for b, h in zip(base, heads)])


def extract_hierarchy(
    img: Image, cfgs: Sequence[LevelConfig], heads: Sequence[EmbeddingHead]
) -> FeatureHierarchy:
    return hierarchy_from_base(cfgs, compute_base_levels(img, cfgs), heads)


# --- HFM1 feature-map files ------------------------------------------------

def export_feature_map(fmap: FeatureMap, path) -> None:
    header = _HFM_HEADER.pack(
        fmap.level_id, fmap.scale_factor, fmap.width, fmap.height, fmap.dim, int(fmap.normalized)
    )
    payload = np.ascontiguousarray(fmap.data, dtype="<f4").tobytes()
    Path(path).write_bytes(HFM_MAGIC + header + payload)


def import_feature_map(path) -> FeatureMap:
    buf = Path(path).read_bytes()
    if buf[:4] != HFM_MAGIC:
        raise BadMagicError(f"{path}: expected magic {HFM_MAGIC!r}, got {buf[:4]!r}")
    if len(buf) < 4 + _HFM_HEADER.size:
        raise TruncatedFileError(f"{path}: header truncated")
    level_id, scale, width, height, dim, flag = _HFM_HEADER.unpack_from(buf, 4)
    count = width * height * dim
    if count > _MAX_ELEMENTS:
        raise DimOverflowError(f"{path}: {width}x{height}x{dim} exceeds {_MAX_ELEMENTS} elements")
    start = 4 + _HFM_HEADER.size
    if len(buf) - start < 4 * count:
        raise TruncatedFileError(
            f"{path}: header declares {count} floats, file holds {(len(buf) - start) // 4}"
        )
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=start)
    return FeatureMap(
        data.reshape(height, width, dim).astype(np.float64),
        level_id=level_id,
        scale_factor=scale,
        normalized=bool(flag),
    )
