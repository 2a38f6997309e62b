"""Scoring (PCK, EPE, Fl outlier rate) and synthetic warped pairs with exact ground truth."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import Image, bilinear_sample_many, read_pnm
from .errors import (
    DegenerateTransformError,
    EmptyInputError,
    EmptyMaskError,
    LengthMismatchError,
)
from .flow import FlowField
from .learn import CorrespondenceSet


@dataclass(frozen=True)
class PckCurve:
    thresholds: np.ndarray
    values: np.ndarray
    n: int

    def at(self, theta: float) -> float:
        i = np.flatnonzero(self.thresholds == theta)
        if len(i) == 0:
            raise KeyError(theta)
        return float(self.values[i[0]])


def pck(pred, gt, thetas: Sequence[float]) -> PckCurve:
    """Fraction of predictions within ``theta`` pixels (inclusive) of ground truth."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 2)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 2)
    if len(pred) != len(gt):
        raise LengthMismatchError(f"{len(pred)} predictions vs {len(gt)} ground-truth points")
    if len(pred) == 0:
        raise EmptyInputError("PCK needs at least one point")
    thetas = np.sort(np.asarray(thetas, dtype=np.float64))
    err = np.sqrt(np.sum((pred - gt) ** 2, axis=-1))
    values = np.array([np.count_nonzero(err <= t) for t in thetas]) / len(err)
    return PckCurve(thetas, values, len(err))


def write_pck_csv(curve: PckCurve, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["theta", "pck"])
        for t, v in zip(curve.thresholds, curve.values):
            w.writerow([repr(float(t)), repr(float(v))])


def _endpoint_error(flow: FlowField, gt: FlowField) -> np.ndarray:
    if (flow.height, flow.width) != (gt.height, gt.width):
        raise LengthMismatchError(
            f"flow is {flow.width}x{flow.height}, ground truth is {gt.width}x{gt.height}"
        )
    return np.hypot(flow.u - gt.u, flow.v - gt.v)


def _region(gt: FlowField, mask) -> np.ndarray:
    region = gt.valid.copy()
    if mask is not None:
        region &= np.asarray(mask, dtype=bool)
    if not region.any():
        raise EmptyMaskError("evaluation region is empty")
    return region


def epe(flow: FlowField, gt: FlowField, mask=None) -> float:
    """Mean endpoint error over ``mask`` intersected with ground-truth validity."""
    err = _endpoint_error(flow, gt)
    return float(err[_region(gt, mask)].mean())


def fl_outlier_rate(flow: FlowField, gt: FlowField, mask=None) -> float:
    """Share of region pixels with endpoint error > 3 px and > 5% of the ground-truth magnitude."""
    err = _endpoint_error(flow, gt)
    region = _region(gt, mask)
    mag = np.hypot(gt.u, gt.v)
    outlier = (err > 3.0) & (err > 0.05 * mag)
    return float(np.count_nonzero(outlier & region) / np.count_nonzero(region))


# --- synthetic pairs ----------------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    """Random similarity warp about the image centre.

    ``transform`` is ``"translation"`` (rotation and scale ignored) or
    ``"similarity"``. Each parameter is drawn uniformly from its range; give
    equal bounds to fix it.
    """

    transform: str = "similarity"
    tx_range: tuple[float, float] = (-8.0, 8.0)
    ty_range: tuple[float, float] = (-8.0, 8.0)
    rotation_deg_range: tuple[float, float] = (-5.0, 5.0)
    scale_range: tuple[float, float] = (0.95, 1.05)
    noise_sigma: float = 0.0
    rng_seed: int = 0
    grid_stride: int = 1


@dataclass(frozen=True)
class Similarity:
    """``p' = scale * R(angle) (p - center) + center + t`` on (x, y) points."""

    scale: float
    angle: float
    tx: float
    ty: float
    center: tuple[float, float]

    @property
    def matrix(self) -> np.ndarray:
        c, s = math.cos(self.angle), math.sin(self.angle)
        return self.scale * np.array([[c, -s], [s, c]])

    def apply(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        ctr = np.asarray(self.center)
        return (pts - ctr) @ self.matrix.T + ctr + np.array([self.tx, self.ty])

    def inverse(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        ctr = np.asarray(self.center)
        return np.linalg.solve(self.matrix, (pts - ctr - np.array([self.tx, self.ty])).T).T + ctr


@dataclass
class SynthPair:
    source: Image
    target: Image
    correspondences: CorrespondenceSet
    gt_flow: FlowField
    transform: Similarity


def sample_transform(spec: SynthSpec, width: int, height: int, rng: np.random.Generator) -> Similarity:
    tx = rng.uniform(*spec.tx_range)
    ty = rng.uniform(*spec.ty_range)
    if spec.transform == "translation":
        angle, scale = 0.0, 1.0
    elif spec.transform == "similarity":
        angle = math.radians(rng.uniform(*spec.rotation_deg_range))
        scale = rng.uniform(*spec.scale_range)
    else:
        raise ValueError(f"unknown transform {spec.transform!r}")
    if not scale > 0:
        raise DegenerateTransformError(f"scale must be positive, got {scale}")
    return Similarity(scale, angle, tx, ty, ((width - 1) / 2.0, (height - 1) / 2.0))


def warp_image(img: Image, tf: Similarity) -> Image:
    """``target(q) = source(tf^-1(q))`` by bilinear lookup; outside samples clamp to the border."""
    h, w = img.height, img.width
    gy, gx = np.mgrid[0:h, 0:w]
    q = np.stack([gx.ravel(), gy.ravel()], axis=-1).astype(np.float64)
    p = tf.inverse(q)
    x = np.clip(p[:, 0], 0, w - 1)
    y = np.clip(p[:, 1], 0, h - 1)
    return Image(bilinear_sample_many(img.data, x, y).reshape(h, w, img.channels))


def synth_pair(img: Image, spec: SynthSpec, tf: Similarity | None = None) -> SynthPair:
    rng = np.random.default_rng(spec.rng_seed)
    h, w = img.height, img.width
    if tf is None:
        tf = sample_transform(spec, w, h, rng)
    target = warp_image(img, tf)
    if spec.noise_sigma > 0:
        noisy = target.data + rng.normal(0.0, spec.noise_sigma, size=target.data.shape)
        target = Image(np.clip(noisy, 0.0, 1.0))

    gy, gx = np.mgrid[0:h, 0:w]
    src = np.stack([gx.ravel(), gy.ravel()], axis=-1).astype(np.float64)
    dst = tf.apply(src)
    inside = (dst[:, 0] >= 0) & (dst[:, 0] <= w - 1) & (dst[:, 1] >= 0) & (dst[:, 1] <= h - 1)
    if inside.mean() < 0.5:
        raise DegenerateTransformError(
            f"only {inside.mean():.0%} of pixels stay in bounds under the transform"
        )
    flow = dst - src
    valid = inside.reshape(h, w)
    gt = FlowField(
        np.where(valid, flow[:, 0].reshape(h, w), 0.0),
        np.where(valid, flow[:, 1].reshape(h, w), 0.0),
        valid,
    )
    on_grid = (src[:, 0] % spec.grid_stride == 0) & (src[:, 1] % spec.grid_stride == 0)
    keep = inside & on_grid
    cs = CorrespondenceSet("source", "target", src[keep], dst[keep], np.ones(int(keep.sum()), np.int64))
    return SynthPair(img, target, cs, gt, tf)


def _value_noise(h: int, w: int, period: int, rng: np.random.Generator) -> np.ndarray:
    lattice = rng.random((h // period + 2, w // period + 2, 1))
    gy, gx = np.mgrid[0:h, 0:w]
    return bilinear_sample_many(lattice, gx.ravel() / period, gy.ravel() / period).reshape(h, w)


def _unit_range(a: np.ndarray) -> np.ndarray:
    a = a - a.min()
    return a / max(a.max(), 1e-12)


def random_texture(size: int | tuple[int, int], rng: np.random.Generator, octaves: Sequence[int] = (4, 8, 16, 32)) -> Image:
    """Multi-scale value noise in [0, 1]: bilinearly upsampled random lattices, summed."""
    w, h = (size, size) if isinstance(size, int) else size
    acc = sum(_value_noise(h, w, period, rng) / math.sqrt(period) for period in octaves)
    return Image(_unit_range(acc))


def repetitive_scene(
    size: int | tuple[int, int],
    rng: np.random.Generator,
    period: int = 48,
    fine_octaves: Sequence[int] = (2, 4),
    coarse_octaves: Sequence[int] = (16, 32, 64),
    coarse_weight: float = 2.0,
) -> Image:
    """Fine texture tiled with ``period`` pixels over a smooth aperiodic layout.

    Small patches recur every ``period`` pixels, so purely local descriptors
    are ambiguous, while the coarse layer tells the repeats apart. Values in [0, 1].
    """
    w, h = (size, size) if isinstance(size, int) else size
    tile = sum(_value_noise(period, period, p, rng) for p in fine_octaves)
    reps = (h // period + 1, w // period + 1)
    fine = np.tile(tile, reps)[:h, :w]
    coarse = sum(_value_noise(h, w, p, rng) * p / 32.0 for p in coarse_octaves)
    img = fine / fine.max() + coarse_weight * coarse / coarse.max()
    return Image(_unit_range(img))


def read_mask(path) -> np.ndarray:
    """PGM mask, nonzero pixels are in the region."""
    return read_pnm(path).data[..., 0] > 0
