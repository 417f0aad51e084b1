"""Counting errors, peak extraction and one-to-one point matching."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from steerer.density import DensityMap, PointSet


@dataclass
class MatchResult:
    tp: int
    fp: int
    fn: int
    pairs: list[tuple[int, int, float]] = field(default_factory=list)


def count_from_density(d) -> float:
    grid = d.grid if isinstance(d, DensityMap) else np.asarray(d)
    return float(grid.sum())


def extract_maxima(d, threshold: float = 0.1, window: int = 3, stride: int = 4) -> PointSet:
    """Cells that are the unique window maximum and exceed ``threshold``.

    Equal values are ordered by row-major index, so a plateau yields only its
    first cell. Detections are returned in image pixels at cell centers.
    """
    if window < 3 or window % 2 == 0:
        raise ValueError(f"window must be odd and >= 3, got {window}")
    if isinstance(d, DensityMap):
        stride = d.stride
        grid = d.grid
    else:
        grid = np.asarray(d, dtype=np.float64)
    h, w = grid.shape
    r = window // 2
    padded = np.full((h + 2 * r, w + 2 * r), -np.inf)
    padded[r:r + h, r:r + w] = grid
    keep = grid > threshold
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            if dy == 0 and dx == 0:
                continue
            other = padded[r + dy:r + dy + h, r + dx:r + dx + w]
            # neighbour precedes this cell in row-major order -> must be strictly smaller
            earlier = dy < 0 or (dy == 0 and dx < 0)
            keep &= (grid > other) if earlier else (grid >= other)
    rows, cols = np.nonzero(keep)
    off = (stride - 1) / 2.0
    return PointSet(np.stack([cols * stride + off, rows * stride + off], axis=1).astype(np.float64))


def match_points(pred: PointSet, gt: PointSet, sigma) -> MatchResult:
    """Greedy one-to-one matching by ascending distance within each GT point's radius.

    ``sigma`` is a scalar or one threshold per GT point. Ties in distance are
    broken by prediction index, then GT index.
    """
    p = pred.points if isinstance(pred, PointSet) else np.asarray(pred, dtype=np.float64).reshape(-1, 2)
    g = gt.points if isinstance(gt, PointSet) else np.asarray(gt, dtype=np.float64).reshape(-1, 2)
    sig = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (len(g),))
    if np.any(sig <= 0):
        raise ValueError("matching thresholds must be positive")
    if len(p) == 0 or len(g) == 0:
        return MatchResult(0, len(p), len(g))
    dist = np.sqrt(((p[:, None, :] - g[None, :, :]) ** 2).sum(-1))
    pi, gi = np.nonzero(dist <= sig[None, :])
    order = np.lexsort((gi, pi, dist[pi, gi]))
    used_p = np.zeros(len(p), bool)
    used_g = np.zeros(len(g), bool)
    pairs = []
    for k in order:
        a, b = pi[k], gi[k]
        if used_p[a] or used_g[b]:
            continue
        used_p[a] = used_g[b] = True
        pairs.append((int(a), int(b), float(dist[a, b])))
    tp = len(pairs)
    return MatchResult(tp, len(p) - tp, len(g) - tp, pairs)


def prf(m: MatchResult) -> tuple[float, float, float]:
    precision = m.tp / (m.tp + m.fp) if m.tp + m.fp else 0.0
    recall = m.tp / (m.tp + m.fn) if m.tp + m.fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def counting_metrics(pairs: Sequence[tuple[float, float]]) -> tuple[float, float, float]:
    """(MAE, root-mean-square error, NAE) over ``(predicted, true)`` counts."""
    if len(pairs) == 0:
        raise ValueError("counting_metrics needs at least one (pred, gt) pair")
    arr = np.asarray(pairs, dtype=np.float64).reshape(-1, 2)
    err = arr[:, 0] - arr[:, 1]
    mae = float(np.mean(np.abs(err)))
    mse = math.sqrt(float(np.mean(err * err)))
    nae = float(np.mean(np.abs(err) / np.maximum(arr[:, 1], 1.0)))
    return mae, mse, nae
