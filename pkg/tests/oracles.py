"""Slow, loop-based reference implementations used as test oracles."""

import math

import numpy as np

from hiermatch.core import FeatureMap
from hiermatch.learn import PairBatch, regularized_objective
from hiermatch.features import EmbeddingHead


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    n = math.sqrt(float(v @ v))
    return v / max(n, 1e-12)


def bilinear(data, x, y):
    """Textbook four-corner blend at one point."""
    h, w = data.shape[:2]
    x0, y0 = min(int(math.floor(x)), w - 1), min(int(math.floor(y)), h - 1)
    x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
    fx, fy = x - x0, y - y0
    return (
        (1 - fx) * (1 - fy) * data[y0, x0]
        + fx * (1 - fy) * data[y0, x1]
        + (1 - fx) * fy * data[y1, x0]
        + fx * fy * data[y1, x1]
    )


def nearest_row_major(fmap_data, q, allowed=None):
    """Scan cells row by row; strictly smaller distance wins, so ties keep the first."""
    h, w = fmap_data.shape[:2]
    best, best_d = None, math.inf
    for r in range(h):
        for c in range(w):
            if allowed is not None and not allowed(c, r):
                continue
            d = math.sqrt(float(np.sum((unit(fmap_data[r, c]) - q) ** 2)))
            if d < best_d:
                best, best_d = (c, r), d
    return best, best_d


def mine_oracle(anchor, target: FeatureMap, gt, positive_window):
    f = target.scale_factor
    radius = math.ceil(positive_window / f) * f

    def allowed(c, r):
        return (c * f - gt[0]) ** 2 + (r * f - gt[1]) ** 2 > radius * radius

    cell, d = nearest_row_major(target.data, anchor, allowed)
    if cell is None:
        return None, None
    return (cell[0] * f, cell[1] * f), d


def match_oracle(ref_maps, tgt_maps, p_s, refine_radius):
    """Coarse exhaustive search on the deepest level, then disk search on the shallowest."""
    deep_r, deep_t = ref_maps[-1], tgt_maps[-1]
    sh_r, sh_t = ref_maps[0], tgt_maps[0]
    f, fs = deep_r.scale_factor, sh_r.scale_factor
    q_deep = unit(bilinear(deep_r.data, p_s[0] / f, p_s[1] / f))
    (cx, cy), d_coarse = nearest_row_major(deep_t.data, q_deep)
    q_sh = unit(bilinear(sh_r.data, p_s[0] / fs, p_s[1] / fs))
    ccx = min(max(round(cx * f / fs), 0), sh_t.width - 1)
    ccy = min(max(round(cy * f / fs), 0), sh_t.height - 1)
    rr = refine_radius / fs

    def allowed(c, r):
        return (c - ccx) ** 2 + (r - ccy) ** 2 <= rr * rr

    (rx, ry), d_fine = nearest_row_major(sh_t.data, q_sh, allowed)
    return (cx, cy), d_coarse, (rx * fs, ry * fs), d_fine


def match3d_oracle(deep_ref, shallow_ref, deep_oracle, shallow_oracle, center, cfg):
    """Enumerate both stages with explicit triple loops in (z, y, x) order."""
    center = np.asarray(center, dtype=np.float64)
    half = (cfg.region_edge - cfg.subvolume_edge) / 2.0
    coarse = []
    steps = []
    while len(steps) * cfg.coarse_gap <= 2 * half + 1e-9:
        steps.append(len(steps) * cfg.coarse_gap)
    for dz in steps:
        for dy in steps:
            for dx in steps:
                coarse.append(center - half + np.array([dz, dy, dx]))

    def best(points, oracle, ref):
        bi, bd = None, math.inf
        for i, p in enumerate(points):
            d = math.sqrt(float(np.sum((oracle(p) - ref) ** 2)))
            if d < bd:
                bi, bd = i, d
        return bi, bd

    i, dc = best(coarse, deep_oracle, deep_ref)
    c0 = coarse[i]
    k = int(math.floor(cfg.refine_radius / cfg.fine_gap + 1e-9))
    fine = []
    for a in range(-k, k + 1):
        for b in range(-k, k + 1):
            for c in range(-k, k + 1):
                off = np.array([a, b, c]) * cfg.fine_gap
                p = c0 + off
                if off @ off > cfg.refine_radius ** 2 + 1e-9:
                    continue
                if np.any(np.abs(p - center) > half + 1e-9):
                    continue
                fine.append(p)
    j, df = best(fine, shallow_oracle, shallow_ref)
    return c0, dc, fine[j], df, len(coarse), len(fine)


def fd_gradients(batches: list[PairBatch], heads: list[EmbeddingHead], margin, weight_decay, h=1e-6):
    """Central finite differences of the regularized objective w.r.t. every head parameter."""
    out = []
    for li, head in enumerate(heads):
        grads = []
        for name in ("weights", "bias"):
            arr = getattr(head, name)
            g = np.zeros_like(arr)
            for idx in np.ndindex(arr.shape):
                orig = arr[idx]
                arr[idx] = orig + h
                fp = regularized_objective(batches, heads, margin, weight_decay)
                arr[idx] = orig - h
                fm = regularized_objective(batches, heads, margin, weight_decay)
                arr[idx] = orig
                g[idx] = (fp - fm) / (2 * h)
            grads.append(g)
        out.append(tuple(grads))
    return out
