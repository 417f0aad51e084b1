"""Patch-winner level selection, mask inheritance and the masked multi-level loss.

Everything here except :func:`msil_loss` and its two-path twin works on plain
detached numpy arrays, so selecting masks never touches the autodiff graph.
Per-level arrays are indexed by level ``j`` (0 finest .. N coarsest) and may
carry leading batch dimensions.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from steerer import ops
from steerer.density import DensityMap, level_stride
from steerer.tensor import Tensor

PWSP_EPS = 1e-8


@dataclass
class SelectionGrid:
    labels: np.ndarray  # (..., P, Q) integer winning level per patch
    patch_px: int

    def shares(self, levels: int) -> np.ndarray:
        """Fraction of patches won by each level."""
        counts = np.bincount(self.labels.ravel(), minlength=levels + 1)
        return counts / max(self.labels.size, 1)


@dataclass
class MaskPyramid:
    onehot: list[np.ndarray]     # selection masks, patch grid
    inherited: list[np.ndarray]  # cumulative masks, patch grid
    upsampled: list[np.ndarray]  # inherited masks at each level's density resolution


def _as_array(x) -> np.ndarray:
    if isinstance(x, DensityMap):
        return x.grid
    if isinstance(x, Tensor):
        x = x.data
        # drop the singleton channel axis of (N, 1, h, w) predictions
        return x[:, 0] if x.ndim == 4 and x.shape[1] == 1 else x
    return np.asarray(x, dtype=np.float64)


def patch_cells(patch_px: int, level: int) -> int:
    s = level_stride(level)
    if patch_px % s:
        raise ValueError(f"patch size {patch_px}px is not divisible by the level-{level} stride {s}")
    return patch_px // s


def _patch_sums(a: np.ndarray, cells: int) -> np.ndarray:
    """Sum non-overlapping ``cells x cells`` blocks over the last two axes."""
    *lead, h, w = a.shape
    if h % cells or w % cells:
        raise ValueError(f"map {h}x{w} does not tile into {cells}x{cells} patches")
    return a.reshape(*lead, h // cells, cells, w // cells, cells).sum(axis=(-3, -1))


def pwsp_costs(gt_pyr: Sequence, pred_pyr: Sequence, patch_px: int, eps: float = PWSP_EPS) -> np.ndarray:
    """Per-level, per-patch cost: AMSE + IMSE. Shape ``(levels+1, ..., P, Q)``."""
    if len(gt_pyr) != len(pred_pyr):
        raise ValueError(f"{len(gt_pyr)} GT levels vs {len(pred_pyr)} prediction levels")
    costs = []
    for j, (gt, pred) in enumerate(zip(gt_pyr, pred_pyr)):
        y, yhat = _as_array(gt), _as_array(pred)
        if y.shape != yhat.shape:
            raise ValueError(f"level {j}: GT shape {y.shape} != prediction shape {yhat.shape}")
        cells = patch_cells(patch_px, j)
        d = y - yhat
        sq = _patch_sums(d * d, cells)
        mass = _patch_sums(np.abs(y), cells)
        costs.append(sq / (cells * cells) + sq / (mass + eps))
    shapes = {c.shape for c in costs}
    if len(shapes) != 1:
        raise ValueError(f"levels disagree on the patch grid: {sorted(shapes)}")
    return np.stack(costs)


def pwsp_select(gt_pyr: Sequence, pred_pyr: Sequence, patch_px: int, eps: float = PWSP_EPS) -> SelectionGrid:
    """Label every patch with the level of minimum cost; ties go to the finest level."""
    costs = pwsp_costs(gt_pyr, pred_pyr, patch_px, eps)
    # np.argmin returns the first minimum, i.e. the smallest level index
    return SelectionGrid(np.argmin(costs, axis=0), patch_px)


def scatter_onehot(grid: SelectionGrid | np.ndarray, levels: int) -> list[np.ndarray]:
    labels = grid.labels if isinstance(grid, SelectionGrid) else np.asarray(grid)
    if labels.size and (labels.min() < 0 or labels.max() > levels):
        raise ValueError(f"selection labels must lie in [0, {levels}], got range "
                         f"[{labels.min()}, {labels.max()}]")
    return [(labels == j).astype(np.float64) for j in range(levels + 1)]


def inherit_masks(onehot: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Level j keeps its own patches plus every patch won by a coarser level."""
    total = np.sum(onehot, axis=0)
    if not np.array_equal(total, np.ones_like(total)):
        raise ValueError("selection masks do not partition the patch grid")
    out = [None] * len(onehot)
    acc = np.zeros_like(onehot[0])
    for j in range(len(onehot) - 1, -1, -1):
        acc = acc + onehot[j]
        out[j] = acc
    return out


def upsample_mask(m: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour block expansion of a patch mask to ``target`` cells."""
    p, q = m.shape[-2:]
    h, w = target
    if h % p or w % q:
        raise ValueError(f"mask {p}x{q} does not divide target {h}x{w}")
    return np.repeat(np.repeat(m, h // p, axis=-2), w // q, axis=-1)


def build_masks(grid: SelectionGrid, level_shapes: Sequence[tuple[int, int]]) -> MaskPyramid:
    levels = len(level_shapes) - 1
    onehot = scatter_onehot(grid, levels)
    inherited = inherit_masks(onehot)
    upsampled = [upsample_mask(m, s) for m, s in zip(inherited, level_shapes)]
    return MaskPyramid(onehot, inherited, upsampled)


def default_alphas(levels: int, base: float = 2.0) -> list[float]:
    return [1.0 / base ** j for j in range(levels + 1)]


def _pred_and_target(pred: Tensor, gt) -> tuple[Tensor, np.ndarray]:
    y = _as_array(gt)
    if y.shape != pred.shape:
        y = y.reshape(pred.shape)
    return pred, y


def _expand_mask(mask: np.ndarray, pred: Tensor) -> np.ndarray:
    return mask.reshape(pred.shape) if mask.shape != pred.shape else mask


def msil_loss(gt_pyr: Sequence, pred_pyr: Sequence[Tensor], masks: MaskPyramid,
              alphas: Optional[Sequence[float]] = None) -> Tensor:
    """Sum over levels of alpha_j * masked_mse(pred_j, gt_j, M_j)."""
    n = len(pred_pyr)
    if len(gt_pyr) != n or len(masks.upsampled) != n:
        raise ValueError(f"pyramid length mismatch: {len(gt_pyr)} GT, {n} predictions, "
                         f"{len(masks.upsampled)} masks")
    alphas = default_alphas(n - 1) if alphas is None else alphas
    loss = None
    for j in range(n):
        pred, y = _pred_and_target(pred_pyr[j], gt_pyr[j])
        term = ops.scale(ops.masked_mse(pred, y, _expand_mask(masks.upsampled[j], pred)), alphas[j])
        loss = term if loss is None else ops.add(loss, term)
    return loss


def selection_inheritance_losses(gt_pyr: Sequence, pred_pyr: Sequence[Tensor], masks: MaskPyramid,
                                 alphas: Optional[Sequence[float]] = None) -> tuple[list[Tensor], list[Tensor]]:
    """Per-level selection and inheritance terms, kept separate.

    Selection uses the level's own winning patches; inheritance uses the
    patches won by coarser levels. Their alpha-weighted sum equals
    :func:`msil_loss` because the two masks are disjoint.
    """
    n = len(pred_pyr)
    alphas = default_alphas(n - 1) if alphas is None else alphas
    sel, inh = [], []
    for j in range(n):
        pred, y = _pred_and_target(pred_pyr[j], gt_pyr[j])
        shape = pred.shape[-2:]
        m_sel = upsample_mask(masks.onehot[j], shape)
        m_inh = upsample_mask(masks.inherited[j] - masks.onehot[j], shape)
        sel.append(ops.scale(ops.masked_mse(pred, y, _expand_mask(m_sel, pred)), alphas[j]))
        inh.append(ops.scale(ops.masked_mse(pred, y, _expand_mask(m_inh, pred)), alphas[j]))
    return sel, inh
