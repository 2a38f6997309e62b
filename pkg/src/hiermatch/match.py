"""Coarse-to-fine correspondence search over a feature hierarchy.

Points are ``(x, y)`` in original-image pixels unless stated otherwise. Every
nearest-neighbour search is exhaustive over integer cells, and ties resolve to
the lowest row-major index.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import FeatureMap, in_bounds, nearest_rows, sample_unit, unit_cells
from .features import FeatureHierarchy


@dataclass(frozen=True)
class MatchConfig:
    refine_radius: float = 32.0
    dense_stride: int = 1

    def __post_init__(self):
        if self.refine_radius < 0:
            raise ValueError("refine_radius must be >= 0")
        if self.dense_stride < 1:
            raise ValueError("dense_stride must be >= 1")


@dataclass(frozen=True)
class MatchResult:
    query: tuple[float, float]  # original pixels
    coarse: tuple[float, float]  # coarse cells
    refined: tuple[float, float]  # original pixels
    d_coarse: float
    d_fine: float
    valid: bool = True


def _nearest(cells: np.ndarray, q: np.ndarray) -> tuple[int, float]:
    """Index of the row of ``cells`` closest to ``q`` (first one on ties) and its distance."""
    d = np.sqrt(np.sum((cells - q) ** 2, axis=-1))
    i = int(np.argmin(d))
    return i, float(d[i])


def coarse_match(deep_ref: FeatureMap, deep_tgt: FeatureMap, p_d):
    """Global nearest neighbour of the (possibly fractional) coarse cell ``p_d``.

    Returns ``((x, y) integer target cell, distance)``.
    """
    q = sample_unit(deep_ref, p_d[0], p_d[1])[0]
    i, d = _nearest(unit_cells(deep_tgt).reshape(-1, deep_tgt.dim), q)
    row, col = divmod(i, deep_tgt.width)
    return (float(col), float(row)), d


def _disk_offsets(radius: float) -> np.ndarray:
    """Integer (dy, dx) offsets with norm <= radius, in row-major order."""
    r = int(np.floor(radius))
    dy, dx = np.mgrid[-r:r + 1, -r:r + 1]
    keep = dy * dy + dx * dx <= radius * radius
    return np.stack([dy[keep], dx[keep]], axis=-1)


def clip_center(shallow_tgt: FeatureMap, p) -> tuple[float, float]:
    """Nearest integer shallow cell to original-pixel point ``p``, clipped into the map."""
    f = shallow_tgt.scale_factor
    cx = min(max(int(np.rint(p[0] / f)), 0), shallow_tgt.width - 1)
    cy = min(max(int(np.rint(p[1] / f)), 0), shallow_tgt.height - 1)
    return float(cx), float(cy)


def refine_match(
    shallow_ref: FeatureMap,
    shallow_tgt: FeatureMap,
    p_s,
    p_d_prime,
    f: int,
    cfg: MatchConfig = MatchConfig(),
):
    """Search shallow cells within ``refine_radius`` original pixels of ``p_d' * f``.

    The disk is centred on the clipped projection, so the candidate set is
    never empty. Returns ``((x, y) in original pixels, distance)``.
    """
    fs = shallow_ref.scale_factor
    q = sample_unit(shallow_ref, p_s[0] / fs, p_s[1] / fs)[0]
    cx, cy = clip_center(shallow_tgt, (p_d_prime[0] * f, p_d_prime[1] * f))
    offs = _disk_offsets(cfg.refine_radius / shallow_tgt.scale_factor)
    rows = int(cy) + offs[:, 0]
    cols = int(cx) + offs[:, 1]
    ok = (rows >= 0) & (rows < shallow_tgt.height) & (cols >= 0) & (cols < shallow_tgt.width)
    rows, cols = rows[ok], cols[ok]
    i, d = _nearest(unit_cells(shallow_tgt)[rows, cols], q)
    ft = shallow_tgt.scale_factor
    return (float(cols[i] * ft), float(rows[i] * ft)), d


class _Matcher:
    """Vectorized hierarchical search; caches the re-normalized target cells."""

    def __init__(self, hier_ref: FeatureHierarchy, hier_tgt: FeatureHierarchy, cfg: MatchConfig):
        if len(hier_ref.maps) != len(hier_tgt.maps):
            raise ValueError("hierarchies have different numbers of levels")
        self.ref, self.tgt, self.cfg = hier_ref, hier_tgt, cfg
        self.deep_cells = unit_cells(hier_tgt.deep)
        self.shallow_cells = unit_cells(hier_tgt.shallow)
        self.offsets = _disk_offsets(cfg.refine_radius / hier_tgt.shallow.scale_factor)

    def match(self, points) -> list[MatchResult]:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        if len(pts) == 0:
            return []
        deep, sh = self.ref.deep, self.ref.shallow
        f, fs = deep.scale_factor, sh.scale_factor

        # coarse: clamp into the deep map, flag queries that needed clamping
        dx, dy = pts[:, 0] / f, pts[:, 1] / f
        valid = in_bounds(deep, dx, dy)
        dx = np.clip(dx, 0.0, deep.width - 1)
        dy = np.clip(dy, 0.0, deep.height - 1)
        ci, d_coarse = nearest_rows(self.deep_cells.reshape(-1, deep.dim), sample_unit(deep, dx, dy))
        crow, ccol = np.divmod(ci, self.tgt.deep.width)

        # refine around the projected coarse match
        qx = np.clip(pts[:, 0], 0.0, (sh.width - 1) * fs)
        qy = np.clip(pts[:, 1], 0.0, (sh.height - 1) * fs)
        valid &= (qx == pts[:, 0]) & (qy == pts[:, 1])
        q_sh = sample_unit(sh, qx / fs, qy / fs)
        tgt = self.tgt.shallow
        ft = tgt.scale_factor
        cx = np.clip(np.rint(ccol * f / ft).astype(np.int64), 0, tgt.width - 1)
        cy = np.clip(np.rint(crow * f / ft).astype(np.int64), 0, tgt.height - 1)

        fine_x = np.empty(len(pts))
        fine_y = np.empty(len(pts))
        d_fine = np.empty(len(pts))
        centers, group = np.unique(np.stack([cy, cx], axis=-1), axis=0, return_inverse=True)
        group = group.reshape(-1)
        for g, (y0, x0) in enumerate(centers):
            members = np.flatnonzero(group == g)
            rows = y0 + self.offsets[:, 0]
            cols = x0 + self.offsets[:, 1]
            ok = (rows >= 0) & (rows < tgt.height) & (cols >= 0) & (cols < tgt.width)
            rows, cols = rows[ok], cols[ok]
            j, d = nearest_rows(self.shallow_cells[rows, cols], q_sh[members])
            fine_x[members] = cols[j] * ft
            fine_y[members] = rows[j] * ft
            d_fine[members] = d

        return [
            MatchResult(
                (float(p[0]), float(p[1])),
                (float(ccol[i]), float(crow[i])),
                (float(fine_x[i]), float(fine_y[i])),
                float(d_coarse[i]),
                float(d_fine[i]),
                bool(valid[i]),
            )
            for i, p in enumerate(pts)
        ]


def hierarchical_match(
    hier_ref: FeatureHierarchy,
    hier_tgt: FeatureHierarchy,
    queries: Sequence,
    cfg: MatchConfig = MatchConfig(),
) -> list[MatchResult]:
    """Deepest level finds the coarse match, shallowest level refines it.

    Queries whose coarse coordinate leaves the deep map are clamped to its
    border and flagged ``valid=False``.
    """
    return _Matcher(hier_ref, hier_tgt, cfg).match(queries)


@dataclass
class DenseMatches:
    """Matches on a regular grid; arrays have shape (rows, cols[, 2])."""

    points: np.ndarray  # query (x, y)
    matches: np.ndarray  # refined (x, y)
    coarse: np.ndarray  # coarse cells (x, y)
    d_coarse: np.ndarray
    d_fine: np.ndarray
    valid: np.ndarray

    @property
    def displacement(self) -> np.ndarray:
        return self.matches - self.points


def dense_grid(width: int, height: int, stride: int) -> np.ndarray:
    xs = np.arange(width // stride) * stride
    ys = np.arange(height // stride) * stride
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx, gy], axis=-1).astype(np.float64)


def dense_match(hier_ref: FeatureHierarchy, hier_tgt: FeatureHierarchy, cfg: MatchConfig = MatchConfig(), size=None) -> DenseMatches:
    """Hierarchical match at every ``dense_stride``-th pixel of the reference image.

    ``size`` is the original image (width, height); by default it is inferred
    from the shallow map.
    """
    if size is None:
        s = hier_ref.shallow
        size = (s.width * s.scale_factor, s.height * s.scale_factor)
    grid = dense_grid(size[0], size[1], cfg.dense_stride)
    results = _Matcher(hier_ref, hier_tgt, cfg).match(grid.reshape(-1, 2))
    shape = grid.shape[:2]
    return DenseMatches(
        points=grid,
        matches=np.array([r.refined for r in results]).reshape(shape + (2,)),
        coarse=np.array([r.coarse for r in results]).reshape(shape + (2,)),
        d_coarse=np.array([r.d_coarse for r in results]).reshape(shape),
        d_fine=np.array([r.d_fine for r in results]).reshape(shape),
        valid=np.array([r.valid for r in results]).reshape(shape),
    )


def _concat_descriptors(maps: Sequence[FeatureMap], pts: np.ndarray) -> np.ndarray:
    """Per-level unit samples at ``pts`` (original pixels, clamped per level), concatenated.

    The concatenation of L unit vectors has norm sqrt(L); dividing by it
    re-normalizes exactly.
    """
    parts = []
    for fmap in maps:
        f = fmap.scale_factor
        x = np.clip(pts[:, 0] / f, 0, fmap.width - 1)
        y = np.clip(pts[:, 1] / f, 0, fmap.height - 1)
        parts.append(sample_unit(fmap, x, y))
    out = np.concatenate(parts, axis=-1)
    if len(maps) > 1:
        out = out / np.sqrt(len(maps))
    return out


def concat_match(ref_maps: Sequence[FeatureMap], tgt_maps: Sequence[FeatureMap], queries: Sequence) -> list[MatchResult]:
    """Hypercolumn baseline: single-stage exhaustive search on concatenated level descriptors.

    Candidates are the integer cells of the shallowest target level.
    """
    if isinstance(ref_maps, FeatureHierarchy):
        ref_maps = ref_maps.maps
    if isinstance(tgt_maps, FeatureHierarchy):
        tgt_maps = tgt_maps.maps
    base = tgt_maps[0]
    fb = base.scale_factor
    rows, cols = np.divmod(np.arange(base.width * base.height), base.width)
    cand_pts = np.stack([cols * fb, rows * fb], axis=-1).astype(np.float64)
    cand = _concat_descriptors(tgt_maps, cand_pts)
    qpts = np.asarray(queries, dtype=np.float64).reshape(-1, 2)
    idx, dist = nearest_rows(cand, _concat_descriptors(ref_maps, qpts))
    return [
        MatchResult(
            (float(p[0]), float(p[1])),
            (float(cols[i]), float(rows[i])),
            (float(cand_pts[i, 0]), float(cand_pts[i, 1])),
            float(d),
            float(d),
            True,
        )
        for p, i, d in zip(qpts, idx, dist)
    ]


# --- matches file ------------------------------------------------------------

def write_matches(results: Sequence[MatchResult], path) -> None:
    lines = []
    for r in results:
        vals = (*r.query, *r.refined, r.d_coarse, r.d_fine)
        lines.append(" ".join(repr(float(v)) for v in vals) + f" {int(r.valid)}")
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def dense_to_results(dm: DenseMatches) -> list[MatchResult]:
    pts = dm.points.reshape(-1, 2)
    mt = dm.matches.reshape(-1, 2)
    co = dm.coarse.reshape(-1, 2)
    return [
        MatchResult((p[0], p[1]), (c[0], c[1]), (m[0], m[1]), dc, df, bool(v))
        for p, c, m, dc, df, v in zip(pts, co, mt, dm.d_coarse.ravel(), dm.d_fine.ravel(), dm.valid.ravel())
    ]


def read_matches(path) -> np.ndarray:
    """Rows of ``x y xh yh d_coarse d_fine valid`` as an (n, 7) float array."""
    rows = [ln.split() for ln in Path(path).read_text().splitlines() if ln.strip()]
    arr = np.array(rows, dtype=np.float64).reshape(-1, 7) if rows else np.zeros((0, 7))
    return arr
