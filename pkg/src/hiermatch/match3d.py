"""Two-stage subvolume search in 3D voxel grids.

Positions are ``(z, y, x)`` in abstract units (centimetres in the 3DMatch
protocol). A descriptor oracle maps a subvolume centre to a unit vector; the
deep oracle drives the coarse grid search and the shallow oracle the radius
bounded refinement.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .core import l2_normalize
from .errors import EmptyCandidateSetError

DescriptorOracle = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class Match3DConfig:
    region_edge: float = 60.0
    subvolume_edge: float = 30.0
    coarse_gap: float = 3.0
    fine_gap: float = 1.0
    refine_radius: float = 15.0

    def __post_init__(self):
        if self.coarse_gap <= 0 or self.fine_gap <= 0:
            raise ValueError("sampling gaps must be positive")
        if self.refine_radius < 0:
            raise ValueError("refine_radius must be >= 0")


@dataclass(frozen=True)
class Match3DResult:
    coarse_center: np.ndarray
    refined_center: np.ndarray
    offset: np.ndarray  # refined centre minus region centre
    d_coarse: float
    d_fine: float
    n_coarse_candidates: int
    n_fine_candidates: int


def candidates_per_axis(cfg: Match3DConfig) -> int:
    span = cfg.region_edge - cfg.subvolume_edge
    if span < 0:
        raise EmptyCandidateSetError(
            f"region edge {cfg.region_edge} smaller than subvolume edge {cfg.subvolume_edge}"
        )
    # tolerance absorbs float noise in span / gap
    return int(math.floor(span / cfg.coarse_gap + 1e-9)) + 1


def coarse_candidates(region_center, cfg: Match3DConfig) -> np.ndarray:
    """Subvolume centres on the coarse grid, shape (n, 3), lexicographic (z, y, x) order."""
    c = np.asarray(region_center, dtype=np.float64)
    n = candidates_per_axis(cfg)
    lo = c - (cfg.region_edge - cfg.subvolume_edge) / 2.0
    steps = np.arange(n) * cfg.coarse_gap
    iz, iy, ix = np.meshgrid(steps, steps, steps, indexing="ij")
    return lo + np.stack([iz.ravel(), iy.ravel(), ix.ravel()], axis=-1)


def fine_candidates(center, region_center, cfg: Match3DConfig) -> np.ndarray:
    """Fine-grid centres within ``refine_radius`` of ``center``, kept inside the admissible box."""
    center = np.asarray(center, dtype=np.float64)
    k = int(math.floor(cfg.refine_radius / cfg.fine_gap + 1e-9))
    r = np.arange(-k, k + 1)
    dz, dy, dx = np.meshgrid(r, r, r, indexing="ij")
    offs = np.stack([dz.ravel(), dy.ravel(), dx.ravel()], axis=-1) * cfg.fine_gap
    offs = offs[np.sum(offs * offs, axis=-1) <= cfg.refine_radius ** 2 + 1e-9]
    pts = center + offs
    half = (cfg.region_edge - cfg.subvolume_edge) / 2.0
    rc = np.asarray(region_center, dtype=np.float64)
    inside = np.all(np.abs(pts - rc) <= half + 1e-9, axis=-1)
    return pts[inside]


def _best(points: np.ndarray, oracle: DescriptorOracle, ref_desc: np.ndarray) -> tuple[int, float]:
    descs = np.stack([np.asarray(oracle(p), dtype=np.float64) for p in points])
    d = np.sqrt(np.sum((descs - ref_desc) ** 2, axis=-1))
    i = int(np.argmin(d))
    return i, float(d[i])


def match_3d(
    deep_ref_desc,
    shallow_ref_desc,
    deep_oracle: DescriptorOracle,
    shallow_oracle: DescriptorOracle,
    region_center,
    cfg: Match3DConfig = Match3DConfig(),
) -> Match3DResult:
    """Coarse grid search with the deep descriptor, then fine search within the radius."""
    region_center = np.asarray(region_center, dtype=np.float64)
    coarse = coarse_candidates(region_center, cfg)
    i, d_coarse = _best(coarse, deep_oracle, np.asarray(deep_ref_desc, dtype=np.float64))
    fine = fine_candidates(coarse[i], region_center, cfg)
    j, d_fine = _best(fine, shallow_oracle, np.asarray(shallow_ref_desc, dtype=np.float64))
    return Match3DResult(
        coarse_center=coarse[i],
        refined_center=fine[j],
        offset=fine[j] - region_center,
        d_coarse=d_coarse,
        d_fine=d_fine,
        n_coarse_candidates=len(coarse),
        n_fine_candidates=len(fine),
    )


@dataclass
class VoxelGrid:
    """Scalar volume (e.g. occupancy or TDF) indexed ``data[z, y, x]``; one voxel per ``voxel_size`` units."""

    data: np.ndarray
    voxel_size: float = 1.0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise ValueError("voxel grid must be 3D")


class SubvolumeDescriptor:
    """Default descriptor oracle: block-pooled occupancy of the subvolume, optionally head-projected.

    The cube of edge ``edge`` units around the centre is split into
    ``pool**3`` blocks; each block contributes its mean value. Voxels outside
    the grid read as zero. A coarse ``pool`` gives the deep (context) descriptor,
    a finer one the shallow descriptor.
    """

    def __init__(self, grid: VoxelGrid, edge: float = 30.0, pool: int = 3, head: np.ndarray | None = None):
        self.grid = grid
        self.edge = edge
        self.pool = pool
        self.head = None if head is None else np.asarray(head, dtype=np.float64)
        self._n = max(int(round(edge / grid.voxel_size)), pool)

    def __call__(self, center) -> np.ndarray:
        g = self.grid
        n = self._n
        start = np.rint(np.asarray(center, dtype=np.float64) / g.voxel_size - n / 2.0).astype(int)
        block = np.zeros((n, n, n))
        lo = np.maximum(start, 0)
        hi = np.minimum(start + n, g.data.shape)
        if np.all(hi > lo):
            dst = tuple(slice(a - s, b - s) for a, b, s in zip(lo, hi, start))
            src = tuple(slice(a, b) for a, b in zip(lo, hi))
            block[dst] = g.data[src]
        edges = np.linspace(0, n, self.pool + 1).astype(int)
        sums = block
        for axis in range(3):
            sums = np.add.reduceat(sums, edges[:-1], axis=axis)
        counts = np.diff(edges)
        v = (sums / np.multiply.outer(np.multiply.outer(counts, counts), counts)).ravel()
        if self.head is not None:
            v = v @ self.head
        return l2_normalize(v)


class TableDescriptor:
    """Oracle backed by a lookup table ``table[z, y, x] -> vector`` at integer centres."""

    def __init__(self, table: np.ndarray, origin=(0.0, 0.0, 0.0), spacing: float = 1.0):
        self.table = l2_normalize(np.asarray(table, dtype=np.float64))
        self.origin = np.asarray(origin, dtype=np.float64)
        self.spacing = spacing

    def __call__(self, center) -> np.ndarray:
        idx = np.rint((np.asarray(center, dtype=np.float64) - self.origin) / self.spacing).astype(int)
        return self.table[tuple(idx)]
