"""Dense matches to optical flow: outlier filters, sparse-to-dense interpolation, .flo I/O."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import BadMagicError, NoSeedsError, TruncatedFileError
from .match import DenseMatches

FLO_MAGIC = b"PIEH"
UNKNOWN_FLOW = 1e9


@dataclass
class FlowField:
    u: np.ndarray  # (height, width)
    v: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if not (self.u.shape == self.v.shape == self.valid.shape) or self.u.ndim != 2:
            raise ValueError("u, v and valid must be 2D arrays of equal shape")

    @property
    def height(self) -> int:
        return self.u.shape[0]

    @property
    def width(self) -> int:
        return self.u.shape[1]

    @classmethod
    def constant(cls, width: int, height: int, u: float, v: float) -> "FlowField":
        shape = (height, width)
        return cls(np.full(shape, float(u)), np.full(shape, float(v)), np.ones(shape, bool))


@dataclass(frozen=True)
class FlowConfig:
    fb_threshold: float = 0.0
    motion_window: float = 240.0
    interp_k: int = 25
    interp_sigma: float = 25.0
    min_affine_neighbors: int = 3


@dataclass
class SparseMatches:
    """Flat list of matches: ``src[i] -> dst[i]``, both (n, 2) as (x, y)."""

    src: np.ndarray
    dst: np.ndarray

    def __post_init__(self):
        self.src = np.asarray(self.src, dtype=np.float64).reshape(-1, 2)
        self.dst = np.asarray(self.dst, dtype=np.float64).reshape(-1, 2)

    def __len__(self) -> int:
        return len(self.src)

    def subset(self, keep) -> "SparseMatches":
        return SparseMatches(self.src[keep], self.dst[keep])

    @classmethod
    def from_dense(cls, dm: DenseMatches, only_valid: bool = True) -> "SparseMatches":
        keep = dm.valid.ravel() if only_valid else slice(None)
        return cls(dm.points.reshape(-1, 2)[keep], dm.matches.reshape(-1, 2)[keep])


def forward_backward_filter(fwd: SparseMatches, bwd_lookup, threshold: float) -> SparseMatches:
    """Keep ``x -> x'`` iff ``||bwd(round(x')) - x|| <= threshold``.

    ``bwd_lookup`` is an (H, W, 2) array giving the backward match of every
    target pixel as (x, y), or a :class:`DenseMatches` computed with stride 1.
    """
    if isinstance(bwd_lookup, DenseMatches):
        bwd_lookup = bwd_lookup.matches
    h, w = bwd_lookup.shape[:2]
    tx = np.rint(fwd.dst[:, 0]).astype(np.int64)
    ty = np.rint(fwd.dst[:, 1]).astype(np.int64)
    inside = (tx >= 0) & (tx < w) & (ty >= 0) & (ty < h)
    back = np.full(fwd.src.shape, np.inf)
    back[inside] = bwd_lookup[ty[inside], tx[inside]]
    err = np.sqrt(np.sum((back - fwd.src) ** 2, axis=-1))
    return fwd.subset(inside & (err <= threshold))


def motion_window_filter(matches: SparseMatches, window: float) -> SparseMatches:
    disp = matches.dst - matches.src
    keep = (np.abs(disp[:, 0]) <= window) & (np.abs(disp[:, 1]) <= window)
    return matches.subset(keep)


def interpolate_flow(seeds: SparseMatches, width: int, height: int, cfg: FlowConfig = FlowConfig()) -> FlowField:
    """Locally weighted affine interpolation of seed displacements to every pixel.

    Each pixel fits ``disp = a + B (x - p)`` by weighted least squares over its
    ``interp_k`` nearest seeds with Gaussian weights of width ``interp_sigma``;
    the fitted value at ``p`` is ``a``. Rank-deficient neighbourhoods, or fewer
    than ``min_affine_neighbors`` seeds, fall back to the weighted mean.
    """
    if len(seeds) == 0:
        raise NoSeedsError("no seed matches left to interpolate")
    disp = seeds.dst - seeds.src
    k = min(cfg.interp_k, len(seeds))
    gy, gx = np.mgrid[0:height, 0:width]
    pix = np.stack([gx.ravel(), gy.ravel()], axis=-1).astype(np.float64)
    dist, idx = cKDTree(seeds.src).query(pix, k=k)
    dist = dist.reshape(len(pix), k)
    idx = idx.reshape(len(pix), k)

    # weights relative to the nearest seed; the common factor cancels in the fit
    d2 = dist ** 2
    wts = np.exp(-(d2 - d2[:, :1]) / (2.0 * cfg.interp_sigma ** 2))
    nd = disp[idx]  # (P, k, 2)
    mean = np.einsum("pk,pkc->pc", wts, nd) / wts.sum(axis=1, keepdims=True)

    out = mean
    if k >= max(cfg.min_affine_neighbors, 3):
        rel = seeds.src[idx] - pix[:, None, :]
        design = np.concatenate([np.ones(idx.shape + (1,)), rel], axis=-1)  # (P, k, 3)
        normal = np.einsum("pk,pki,pkj->pij", wts, design, design)
        rhs = np.einsum("pk,pki,pkc->pic", wts, design, nd)
        eig = np.linalg.eigvalsh(normal)
        ok = eig[:, 0] > 1e-10 * np.maximum(eig[:, -1], 1e-300)
        if np.any(ok):
            coef = np.linalg.solve(normal[ok], rhs[ok])
            out = mean.copy()
            out[ok] = coef[:, 0, :]
    return FlowField(
        out[:, 0].reshape(height, width),
        out[:, 1].reshape(height, width),
        np.ones((height, width), bool),
    )


def flow_from_matches(fwd: DenseMatches, bwd: DenseMatches, width: int, height: int, cfg: FlowConfig = FlowConfig()) -> FlowField:
    """Consistency check, then motion window, then interpolation."""
    seeds = SparseMatches.from_dense(fwd)
    seeds = forward_backward_filter(seeds, bwd, cfg.fb_threshold)
    seeds = motion_window_filter(seeds, cfg.motion_window)
    return interpolate_flow(seeds, width, height, cfg)


def write_flo(flow: FlowField, path) -> None:
    u = np.where(flow.valid, flow.u, UNKNOWN_FLOW)
    v = np.where(flow.valid, flow.v, UNKNOWN_FLOW)
    header = FLO_MAGIC + np.array([flow.width, flow.height], dtype="<i4").tobytes()
    body = np.stack([u, v], axis=-1).astype("<f4").tobytes()
    Path(path).write_bytes(header + body)


def read_flo(path) -> FlowField:
    buf = Path(path).read_bytes()
    if buf[:4] != FLO_MAGIC:
        raise BadMagicError(f"{path}: expected magic {FLO_MAGIC!r}, got {buf[:4]!r}")
    if len(buf) < 12:
        raise TruncatedFileError(f"{path}: header truncated")
    width, height = np.frombuffer(buf, dtype="<i4", count=2, offset=4)
    n = int(width) * int(height) * 2
    if width < 0 or height < 0 or len(buf) < 12 + 4 * n:
        raise TruncatedFileError(f"{path}: expected {n} floats for {width}x{height} flow")
    uv = np.frombuffer(buf, dtype="<f4", count=n, offset=12).reshape(int(height), int(width), 2)
    u = uv[..., 0].astype(np.float64)
    v = uv[..., 1].astype(np.float64)
    valid = (np.abs(u) < UNKNOWN_FLOW) & (np.abs(v) < UNKNOWN_FLOW)
    return FlowField(u, v, valid)
