"""Multi-level correspondence contrastive loss, hard-negative mining and ADAM training."""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import (
    NORM_EPS,
    FeatureMap,
    Image,
    bilinear_weights,
    in_bounds,
    sample_unit,
    unit_cells,
)
from .errors import (
    BadMagicError,
    DimMismatchError,
    EmptyDatasetError,
    NoValidNegativeError,
    OutOfBoundsError,
    TruncatedFileError,
)
from .features import (
    EmbeddingHead,
    FeatureHierarchy,
    LevelConfig,
    apply_head,
    compute_base_levels,
    heads_for,
    init_heads,
)

log = logging.getLogger(__name__)

HHD_MAGIC = b"HHD1"


@dataclass
class CorrespondenceSet:
    """Triplets ``(x, x', y)``; points are (x, y) in original-image pixels."""

    ref: str
    tgt: str
    x: np.ndarray
    xp: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64).reshape(-1, 2)
        self.xp = np.asarray(self.xp, dtype=np.float64).reshape(-1, 2)
        self.y = np.asarray(self.y, dtype=np.int64).reshape(-1)
        if not (len(self.x) == len(self.xp) == len(self.y)):
            raise DimMismatchError("correspondence arrays have different lengths")
        if np.any((self.y != 0) & (self.y != 1)):
            raise ValueError("labels must be 0 or 1")

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, idx) -> "CorrespondenceSet":
        return CorrespondenceSet(self.ref, self.tgt, self.x[idx], self.xp[idx], self.y[idx])


@dataclass
class TrainConfig:
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
    rng_seed: int = 0

    def __post_init__(self):
        if self.margin <= 0 or self.positive_window < 1 or self.learning_rate <= 0:
            raise ValueError("need margin > 0, positive_window >= 1, learning_rate > 0")


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


# --- loss --------------------------------------------------------------------

def ccl_pair_loss(d, y, m: float):
    """``y * d^2 + (1 - y) * max(0, m - d)^2``, elementwise."""
    d = np.asarray(d, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return y * d * d + (1.0 - y) * np.maximum(0.0, m - d) ** 2


def level_distances(ref_map: FeatureMap, tgt_map: FeatureMap, x, xp) -> np.ndarray:
    """Distances between re-normalized bilinear samples at original-pixel points."""
    x = np.asarray(x, dtype=np.float64).reshape(-1, 2)
    xp = np.asarray(xp, dtype=np.float64).reshape(-1, 2)
    a = sample_unit(ref_map, x[:, 0] / ref_map.scale_factor, x[:, 1] / ref_map.scale_factor)
    b = sample_unit(tgt_map, xp[:, 0] / tgt_map.scale_factor, xp[:, 1] / tgt_map.scale_factor)
    return np.sqrt(np.sum((a - b) ** 2, axis=-1))


def pair_distance(hier_ref: FeatureHierarchy, hier_tgt: FeatureHierarchy, level: int, x, xp) -> float:
    return float(level_distances(hier_ref.maps[level], hier_tgt.maps[level], [x], [xp])[0])


def total_loss(
    hier_pairs: Sequence[tuple[FeatureHierarchy, FeatureHierarchy]],
    sets: Sequence[CorrespondenceSet],
    margin: float = 1.0,
) -> float:
    """Unweighted sum of the CCL over every level and every triplet of every pair."""
    total = 0.0
    for (ref, tgt), cs in zip(hier_pairs, sets):
        if len(cs) == 0:
            continue
        for ref_map, tgt_map in zip(ref.maps, tgt.maps):
            d = level_distances(ref_map, tgt_map, cs.x, cs.xp)
            total += float(np.sum(ccl_pair_loss(d, cs.y, margin)))
    return total


# --- gradients ---------------------------------------------------------------

@dataclass
class PairBatch:
    """One image pair's base descriptors and the triplets applied at each level."""

    ref_base: list[FeatureMap]
    tgt_base: list[FeatureMap]
    triplets: list[CorrespondenceSet]


def _forward_side(base: FeatureMap, pts: np.ndarray, head: EmbeddingHead):
    f = base.scale_factor
    if not np.all(in_bounds(base, pts[:, 0] / f, pts[:, 1] / f)):
        raise OutOfBoundsError(f"training point outside level-{base.level_id} map")
    rows, cols, wts = bilinear_weights(base.width, base.height, pts[:, 0] / f, pts[:, 1] / f)
    desc = base.data[rows, cols]  # (n, 4, din)
    z = desc @ head.weights + head.bias  # (n, 4, dout)
    nz = np.sqrt(np.sum(z * z, axis=-1, keepdims=True))
    sz = np.maximum(nz, NORM_EPS)
    u = z / sz
    a = np.einsum("nk,nkd->nd", wts, u)
    na = np.sqrt(np.sum(a * a, axis=-1, keepdims=True))
    sa = np.maximum(na, NORM_EPS)
    return dict(desc=desc, wts=wts, u=u, nz=nz, sz=sz, ahat=a / sa, na=na, sa=sa)


def _normalize_backward(g, unit, norm, scale):
    """Vector-Jacobian product of ``v / max(||v||, eps)``."""
    proj = g - unit * np.sum(unit * g, axis=-1, keepdims=True)
    return np.where(norm >= NORM_EPS, proj, g) / scale


def _backward_side(fw, g_hat, grad_w, grad_b):
    g_a = _normalize_backward(g_hat, fw["ahat"], fw["na"], fw["sa"])
    g_u = fw["wts"][:, :, None] * g_a[:, None, :]
    g_z = _normalize_backward(g_u, fw["u"], fw["nz"], fw["sz"])
    grad_w += np.einsum("nki,nko->io", fw["desc"], g_z)
    grad_b += g_z.sum(axis=(0, 1))


def loss_gradients(
    batches: Sequence[PairBatch],
    heads: Sequence[EmbeddingHead],
    margin: float = 1.0,
    weight_decay: float = 0.0,
):
    """CCL loss summed over levels and its gradient w.r.t. each head.

    Returns ``(loss, grads)`` with ``grads[l] = (dW, db)`` aligned with ``heads``.
    The loss excludes the regularizer; the weight gradients include ``weight_decay * W``.
    """
    grads = [(np.zeros_like(h.weights), np.zeros_like(h.bias)) for h in heads]
    loss = 0.0
    for batch in batches:
        for lvl, head in enumerate(heads):
            cs = batch.triplets[lvl]
            if len(cs) == 0:
                continue
            fa = _forward_side(batch.ref_base[lvl], cs.x, head)
            fb = _forward_side(batch.tgt_base[lvl], cs.xp, head)
            diff = fa["ahat"] - fb["ahat"]
            d = np.sqrt(np.sum(diff * diff, axis=-1))
            y = cs.y.astype(np.float64)
            loss += float(np.sum(ccl_pair_loss(d, y, margin)))

            hinge = np.maximum(0.0, margin - d)
            safe_d = np.where(d > 0, d, 1.0)
            coef = np.where(y == 1, 2.0, np.where((hinge > 0) & (d > 0), -2.0 * hinge / safe_d, 0.0))
            g_diff = coef[:, None] * diff
            _backward_side(fa, g_diff, *grads[lvl])
            _backward_side(fb, -g_diff, *grads[lvl])
    for (gw, _), head in zip(grads, heads):
        gw += weight_decay * head.weights
    return loss, grads


def regularized_objective(batches, heads, margin: float = 1.0, weight_decay: float = 0.0) -> float:
    """Loss whose exact gradient :func:`loss_gradients` returns."""
    loss, _ = loss_gradients(batches, heads, margin, 0.0)
    return loss + 0.5 * weight_decay * sum(float(np.sum(h.weights ** 2)) for h in heads)


# --- mining ------------------------------------------------------------------

def exclusion_radius(positive_window: int, scale_factor: int) -> int:
    return math.ceil(positive_window / scale_factor) * scale_factor


def _excluded_cells(gt: np.ndarray, radius: int, f: int, width: int, height: int):
    """(anchor, flat cell) index pairs for cells within ``radius`` original pixels of ``gt``."""
    k = radius // f + 1
    off = np.arange(-k, k + 1)
    ox, oy = np.meshgrid(off, off)
    cx = np.rint(gt[:, 0] / f).astype(np.int64)[:, None] + ox.ravel()[None, :]
    cy = np.rint(gt[:, 1] / f).astype(np.int64)[:, None] + oy.ravel()[None, :]
    near = (cx * f - gt[:, :1]) ** 2 + (cy * f - gt[:, 1:]) ** 2 <= radius * radius
    near &= (cx >= 0) & (cx < width) & (cy >= 0) & (cy < height)
    rows, cols = np.nonzero(near)
    return rows, cy[rows, cols] * width + cx[rows, cols]


def mine_hard_negatives(anchors, target: FeatureMap, gt, positive_window: int, chunk: int = 512):
    """Hardest negative per anchor on ``target``.

    Candidates are integer cells whose original-pixel position lies strictly
    farther than ``ceil(c/f)*f`` from the ground-truth match. Ties go to the
    lowest row-major cell. Returns ``(points, distances)`` with points in
    original-image pixels.
    """
    anchors = np.atleast_2d(np.asarray(anchors, dtype=np.float64))
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 2)
    f = target.scale_factor
    radius = exclusion_radius(positive_window, f)
    n_cells = target.width * target.height
    cells = unit_cells(target).reshape(n_cells, target.dim)
    cell_sq = np.sum(cells * cells, axis=-1)

    idx = np.empty(len(anchors), dtype=np.int64)
    for s in range(0, len(anchors), chunk):
        a = anchors[s:s + chunk]
        # ||a - b||^2 - ||a||^2; the anchor term does not change the argmin
        score = cell_sq[None, :] - 2.0 * (a @ cells.T)
        rows, flat = _excluded_cells(gt[s:s + chunk], radius, f, target.width, target.height)
        score[rows, flat] = np.inf
        if np.any(np.bincount(rows, minlength=len(a)) >= n_cells):
            raise NoValidNegativeError(
                f"exclusion radius {radius} covers the whole {target.width}x{target.height} map"
            )
        # near-ties in the score are settled by exact distance, lowest index first
        near = score <= score.min(axis=1, keepdims=True) + 1e-9
        part = np.argmax(near, axis=1)
        for i in np.flatnonzero(np.count_nonzero(near, axis=1) > 1):
            js = np.flatnonzero(near[i])
            part[i] = js[np.argmin(np.sum((cells[js] - a[i]) ** 2, axis=-1))]
        idx[s:s + chunk] = part
    dist = np.sqrt(np.sum((anchors - cells[idx]) ** 2, axis=-1))
    rows, cols = np.divmod(idx, target.width)
    points = np.stack([cols * f, rows * f], axis=-1).astype(np.float64)
    return points, dist


# --- optimizer ---------------------------------------------------------------

def adam_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    state: AdamState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
):
    """One bias-corrected ADAM update. Returns new ``(params, state)``; inputs untouched."""
    t = state.t + 1
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        new_params.append(p - lr * (m / bc1) / (np.sqrt(v / bc2) + eps))
        new_m.append(m)
        new_v.append(v)
    return new_params, AdamState(new_m, new_v, t)


# --- training loop -----------------------------------------------------------

@dataclass
class TrainingPair:
    ref_base: list[FeatureMap]
    tgt_base: list[FeatureMap]
    x: np.ndarray
    xp: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64).reshape(-1, 2)
        self.xp = np.asarray(self.xp, dtype=np.float64).reshape(-1, 2)


def training_pair(ref_base: Sequence[FeatureMap], tgt_base: Sequence[FeatureMap], positives: CorrespondenceSet) -> TrainingPair:
    """Keep the positives that are sampleable on every level of both images."""
    keep = positives.y == 1
    for rb, tb in zip(ref_base, tgt_base):
        keep &= in_bounds(rb, positives.x[:, 0] / rb.scale_factor, positives.x[:, 1] / rb.scale_factor)
        keep &= in_bounds(tb, positives.xp[:, 0] / tb.scale_factor, positives.xp[:, 1] / tb.scale_factor)
    return TrainingPair(list(ref_base), list(tgt_base), positives.x[keep], positives.xp[keep])


def training_pair_from_images(ref: Image, tgt: Image, positives: CorrespondenceSet, cfgs: Sequence[LevelConfig]) -> TrainingPair:
    return training_pair(compute_base_levels(ref, cfgs), compute_base_levels(tgt, cfgs), positives)


@dataclass
class TrainResult:
    heads: list[EmbeddingHead]
    losses: list[float] = field(default_factory=list)


def _heads_to_params(heads):
    return [a for h in heads for a in (h.weights, h.bias)]


def _params_to_heads(params, like):
    return [EmbeddingHead(h.level_id, params[2 * i], params[2 * i + 1]) for i, h in enumerate(like)]


def train(
    pairs: Sequence[TrainingPair],
    cfgs: Sequence[LevelConfig],
    cfg: TrainConfig,
    heads: Sequence[EmbeddingHead] | None = None,
) -> TrainResult:
    """Train the embedding heads with per-level on-the-fly hard-negative mining.

    ``losses[i]`` is the CCL batch loss of iteration ``i`` before its update.
    """
    pairs = [p for p in pairs if len(p.x) > 0]
    if not pairs:
        raise EmptyDatasetError("no usable positive correspondences")
    rng = np.random.default_rng(cfg.rng_seed)
    heads = heads_for(cfgs, heads) if heads is not None else init_heads(cfgs, cfg.rng_seed)
    heads = [h.copy() for h in heads]
    params = _heads_to_params(heads)
    state = AdamState.zeros_like(params)
    losses = []

    for it in range(cfg.iterations):
        batches = []
        for pi in rng.integers(0, len(pairs), size=cfg.pairs_per_batch):
            pair = pairs[pi]
            n = len(pair.x)
            k = cfg.correspondences_per_pair
            sel = rng.choice(n, size=k, replace=n < k)
            x, xp = pair.x[sel], pair.xp[sel]
            triplets = []
            for lvl, head in enumerate(heads):
                ref_map = apply_head(pair.ref_base[lvl], head)
                tgt_map = apply_head(pair.tgt_base[lvl], head)
                f = ref_map.scale_factor
                anchors = sample_unit(ref_map, x[:, 0] / f, x[:, 1] / f)
                neg, _ = mine_hard_negatives(anchors, tgt_map, xp, cfg.positive_window)
                triplets.append(
                    CorrespondenceSet(
                        "", "",
                        np.concatenate([x, x]),
                        np.concatenate([xp, neg]),
                        np.concatenate([np.ones(k, np.int64), np.zeros(k, np.int64)]),
                    )
                )
            batches.append(PairBatch(pair.ref_base, pair.tgt_base, triplets))

        loss, grads = loss_gradients(batches, heads, cfg.margin, cfg.weight_decay)
        losses.append(loss)
        flat_grads = [a for g in grads for a in g]
        params, state = adam_step(
            params, flat_grads, state, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps
        )
        heads = _params_to_heads(params, heads)
        if it % 50 == 0:
            log.debug("iter %d loss %.6f", it, loss)
    return TrainResult(heads, losses)


# --- files -------------------------------------------------------------------

def write_correspondences(cs: CorrespondenceSet, path) -> None:
    lines = [f"PAIR {cs.ref} {cs.tgt}"]
    for row, lab in zip(np.hstack([cs.x, cs.xp]).tolist(), cs.y):
        lines.append(" ".join(repr(v) for v in row) + f" {int(lab)}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_correspondences(path) -> CorrespondenceSet:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("PAIR"):
        raise BadMagicError(f"{path}: first line must be 'PAIR <ref> <tgt>'")
    head = lines[0].split()
    if len(head) != 3:
        raise ValueError(f"{path}: malformed PAIR header {lines[0]!r}")
    rows = []
    for no, ln in enumerate(lines[1:], start=2):
        parts = ln.split()
        if len(parts) != 5:
            raise ValueError(f"{path}:{no}: expected 5 fields, got {len(parts)}")
        rows.append([float(p) for p in parts])
    arr = np.array(rows, dtype=np.float64).reshape(-1, 5)
    return CorrespondenceSet(head[1], head[2], arr[:, 0:2], arr[:, 2:4], arr[:, 4].astype(np.int64))


def write_heads(heads: Sequence[EmbeddingHead], path) -> None:
    out = [HHD_MAGIC, struct.pack("<I", len(heads))]
    for h in heads:
        rows, cols = h.weights.shape
        out.append(struct.pack("<3I", h.level_id, rows, cols))
        out.append(np.ascontiguousarray(h.weights, dtype="<f4").tobytes())
        out.append(np.ascontiguousarray(h.bias, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(out))


def read_heads(path) -> list[EmbeddingHead]:
    buf = Path(path).read_bytes()
    if buf[:4] != HHD_MAGIC:
        raise BadMagicError(f"{path}: expected magic {HHD_MAGIC!r}, got {buf[:4]!r}")
    if len(buf) < 8:
        raise TruncatedFileError(f"{path}: header truncated")
    (count,) = struct.unpack_from("<I", buf, 4)
    off = 8
    heads = []
    for _ in range(count):
        if len(buf) < off + 12:
            raise TruncatedFileError(f"{path}: level header truncated")
        level_id, rows, cols = struct.unpack_from("<3I", buf, off)
        off += 12
        n = rows * cols + cols
        if len(buf) < off + 4 * n:
            raise TruncatedFileError(f"{path}: level {level_id} data truncated")
        vals = np.frombuffer(buf, dtype="<f4", count=n, offset=off).astype(np.float64)
        off += 4 * n
        heads.append(EmbeddingHead(level_id, vals[: rows * cols].reshape(rows, cols), vals[rows * cols:]))
    return heads
