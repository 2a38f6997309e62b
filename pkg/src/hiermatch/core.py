"""Image and feature-grid containers plus the resampling primitives used everywhere."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    EmptyOutputError,
    OutOfBoundsError,
    TruncatedFileError,
)

NORM_EPS = 1e-12

# ITU-R BT.601 luma weights
_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class Image:
    """Row-major image, ``data`` has shape (height, width, channels), values in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3 or data.shape[2] not in (1, 3):
            raise ValueError(f"image data must be HxW, HxWx1 or HxWx3, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("image data must be finite")
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def gray(self) -> np.ndarray:
        """2D view of a single-channel image."""
        if self.channels != 1:
            raise ValueError("image is not grayscale")
        return self.data[:, :, 0]


@dataclass(frozen=True)
class FeatureMap:
    """Grid of descriptors. ``data`` has shape (height_l, width_l, dim).

    ``scale_factor`` is the number of input pixels per cell, so a point ``p`` in
    original-image pixels sits at ``p / scale_factor`` in cell coordinates.
    """

    data: np.ndarray
    level_id: int = 0
    scale_factor: int = 1
    normalized: bool = False

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3:
            raise ValueError(f"feature map data must be 3D, got shape {data.shape}")
        if int(self.scale_factor) < 1:
            raise ValueError("scale_factor must be >= 1")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "scale_factor", int(self.scale_factor))
        object.__setattr__(self, "level_id", int(self.level_id))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def dim(self) -> int:
        return self.data.shape[2]


def l2_normalize(v, eps: float = NORM_EPS) -> np.ndarray:
    """Divide by ``max(||v||, eps)`` along the last axis."""
    v = np.asarray(v, dtype=np.float64)
    norm = np.sqrt(np.sum(v * v, axis=-1, keepdims=True))
    return v / np.maximum(norm, eps)


def in_bounds(fmap: FeatureMap, x, y) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return (x >= 0) & (y >= 0) & (x <= fmap.width - 1) & (y <= fmap.height - 1)


def bilinear_weights(width: int, height: int, x, y):
    """Corner indices and weights for bilinear lookups on a ``height x width`` grid.

    Returns ``(rows, cols, weights)``, each of shape ``(n, 4)``. Corners are ordered
    top-left, top-right, bottom-left, bottom-right. Coordinates must be in range.
    """
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    x0 = np.minimum(x0, width - 1)
    y0 = np.minimum(y0, height - 1)
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)
    fx = x - x0
    fy = y - y0
    rows = np.stack([y0, y0, y1, y1], axis=-1)
    cols = np.stack([x0, x1, x0, x1], axis=-1)
    weights = np.stack(
        [(1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx], axis=-1
    )
    return rows, cols, weights


def bilinear_sample_many(data: np.ndarray, x, y) -> np.ndarray:
    """Bilinear lookup of many points in an (H, W, D) array; returns (n, D).

    The blend is nested (horizontal then vertical) so that integer coordinates
    return the stored cell unchanged.
    """
    h, w = data.shape[:2]
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    x0 = np.minimum(np.floor(x).astype(np.int64), w - 1)
    y0 = np.minimum(np.floor(y).astype(np.int64), h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]
    top = (1 - fx) * data[y0, x0] + fx * data[y0, x1]
    bottom = (1 - fx) * data[y1, x0] + fx * data[y1, x1]
    return (1 - fy) * top + fy * bottom


def bilinear_sample(fmap: FeatureMap, p) -> np.ndarray:
    """Channel-wise bilinear blend at ``p = (x, y)`` given in cell coordinates."""
    x, y = float(p[0]), float(p[1])
    if not (0 <= x <= fmap.width - 1 and 0 <= y <= fmap.height - 1):
        raise OutOfBoundsError(
            f"point ({x}, {y}) outside {fmap.width}x{fmap.height} feature map"
        )
    return bilinear_sample_many(fmap.data, [x], [y])[0]


def sample_unit(fmap: FeatureMap, x, y) -> np.ndarray:
    """Bilinear samples at cell coordinates, re-normalized to unit length. Shape (n, D)."""
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    if not np.all(in_bounds(fmap, x, y)):
        bad = int(np.flatnonzero(~in_bounds(fmap, x, y))[0])
        raise OutOfBoundsError(
            f"point ({x[bad]}, {y[bad]}) outside {fmap.width}x{fmap.height} feature map"
        )
    return l2_normalize(bilinear_sample_many(fmap.data, x, y))


def unit_cells(fmap: FeatureMap) -> np.ndarray:
    """Every cell re-normalized, so integer-coordinate samples compare bit-exactly."""
    return l2_normalize(fmap.data)


def nearest_rows(cands: np.ndarray, queries: np.ndarray, tol: float = 1e-9, chunk: int = 1024):
    """Exact nearest row of ``cands`` for every row of ``queries``; ties go to the lowest index.

    Candidates are ranked with the BLAS-friendly score ``|b|^2 - 2 a.b``. Rows
    scoring within ``tol`` of the best (far above its rounding error) are
    re-ranked by exact distance, so the result equals a brute-force scan.
    Returns ``(indices, distances)``.
    """
    cands = np.asarray(cands, dtype=np.float64)
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    sq = np.sum(cands * cands, axis=-1)
    idx = np.empty(len(queries), dtype=np.int64)
    for s in range(0, len(queries), chunk):
        q = queries[s:s + chunk]
        score = sq[None, :] - 2.0 * (q @ cands.T)
        near = score <= score.min(axis=1, keepdims=True) + tol
        part = np.argmax(near, axis=1)
        for i in np.flatnonzero(np.count_nonzero(near, axis=1) > 1):
            js = np.flatnonzero(near[i])
            d = np.sum((cands[js] - q[i]) ** 2, axis=-1)
            part[i] = js[np.argmin(d)]
        idx[s:s + chunk] = part
    dist = np.sqrt(np.sum((cands[idx] - queries) ** 2, axis=-1))
    return idx, dist


def downsample(img: Image, factor: int) -> Image:
    """Box-average ``factor x factor`` blocks, dropping incomplete trailing blocks."""
    factor = int(factor)
    if factor < 1:
        raise ValueError("factor must be >= 1")
    if factor == 1:
        return img
    h, w = img.height // factor, img.width // factor
    if h == 0 or w == 0:
        raise EmptyOutputError(
            f"{img.width}x{img.height} image is smaller than one {factor}x{factor} block"
        )
    block = img.data[: h * factor, : w * factor].reshape(h, factor, w, factor, img.channels)
    return Image(block.mean(axis=(1, 3)))


def to_grayscale(img: Image) -> Image:
    if img.channels == 1:
        return img
    return Image(img.data @ _LUMA)


# --- binary PNM (P5 / P6) ---------------------------------------------------

def _pnm_tokens(buf: bytes, count: int):
    """Parse ``count`` whitespace-separated header tokens, skipping comments."""
    tokens = []
    i = 0
    while len(tokens) < count:
        if i >= len(buf):
            raise TruncatedFileError("PNM header ended early")
        c = buf[i:i + 1]
        if c == b"#":
            while i < len(buf) and buf[i:i + 1] not in (b"\n", b"\r"):
                i += 1
        elif c.isspace():
            i += 1
        else:
            j = i
            while j < len(buf) and not buf[j:j + 1].isspace() and buf[j:j + 1] != b"#":
                j += 1
            tokens.append(buf[i:j])
            i = j
    # exactly one whitespace byte separates the header from the raster
    return tokens, i + 1


def read_pnm(path) -> Image:
    buf = Path(path).read_bytes()
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise BadMagicError(f"{path}: not a binary PGM/PPM file")
    channels = 1 if magic == b"P5" else 3
    tokens, offset = _pnm_tokens(buf[2:], 3)
    width, height, maxval = (int(t) for t in tokens)
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PNM is supported (maxval {maxval})")
    n = width * height * channels
    raster = buf[2 + offset: 2 + offset + n]
    if len(raster) < n:
        raise TruncatedFileError(f"{path}: expected {n} bytes of pixel data, got {len(raster)}")
    arr = np.frombuffer(raster, dtype=np.uint8).reshape(height, width, channels)
    return Image(arr.astype(np.float64) / 255.0)


def write_pnm(img: Image, path) -> None:
    magic = b"P5" if img.channels == 1 else b"P6"
    raster = np.clip(np.rint(img.data * 255.0), 0, 255).astype(np.uint8)
    header = magic + f"\n{img.width} {img.height}\n255\n".encode()
    Path(path).write_bytes(header + raster.tobytes())
