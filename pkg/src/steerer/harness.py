"""Training, evaluation, prediction and mask diagnostics."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from steerer import ops
from steerer.checkpoint import Checkpoint, build_model, save_checkpoint
from steerer.config import RunConfig
from steerer.density import PointSet, gt_pyramid, level_stride
from steerer.metrics import (MatchResult, count_from_density, counting_metrics, extract_maxima, match_points,
                             prf)
from steerer.model import SteererModel
from steerer.optim import adam_step, warmup_cosine_lr, zero_grad
from steerer.steering import build_masks, default_alphas, msil_loss, pwsp_select
from steerer.synth import (CorpusManifest, SceneSpec, blob_classes_in_patch, load_split, read_corpus,
                           two_scale_spec, write_corpus)
from steerer.tensor import Tensor, backward, no_grad

log = logging.getLogger("steerer")

CHECKPOINT_NAME = "checkpoint.bin"

PRESETS: dict[str, Callable[[int, int], SceneSpec]] = {
    "two_scale": two_scale_spec,
}


class NumericError(RuntimeError):
    """Training produced a non-finite loss."""


Scene = tuple[np.ndarray, PointSet]


def scene_spec(cfg: RunConfig) -> SceneSpec:
    try:
        factory = PRESETS[cfg.data.preset]
    except KeyError:
        raise ValueError(f"unknown data preset {cfg.data.preset!r}; known: {sorted(PRESETS)}") from None
    return factory(cfg.data.height, cfg.data.width)


def generate_data(cfg: RunConfig) -> CorpusManifest:
    d = cfg.data
    return write_corpus(d.root, scene_spec(cfg), d.seed, {"train": d.train, "val": d.val, "test": d.test},
                        sigma0=cfg.density.sigma0)


# --------------------------------------------------------------------------- padding


def pad_multiple(cfg: RunConfig) -> int:
    return max(level_stride(cfg.model.levels), cfg.loss.patch_px)


def pad_image(img: np.ndarray, multiple: int) -> np.ndarray:
    h, w = img.shape
    ph, pw = -h % multiple, -w % multiple
    return np.pad(img, ((0, ph), (0, pw))) if ph or pw else img


def crop_level0(d: np.ndarray, image_shape: tuple[int, int]) -> np.ndarray:
    """Crop a level-0 map of a padded image back to the unpadded image's cells."""
    h, w = image_shape
    s = level_stride(0)
    return d[: -(-h // s), : -(-w // s)]


# --------------------------------------------------------------------------- training


@dataclass
class StepRecord:
    epoch: int
    step: int
    lr: float
    loss: float
    level_losses: list[float]
    shares: Optional[list[float]]


@dataclass
class Trainer:
    cfg: RunConfig
    model: SteererModel = None
    trace: list[str] = field(default_factory=list)
    history: list[dict] = field(default_factory=list)
    step: int = 0

    def __post_init__(self):
        self.cfg.validate()
        if self.model is None:
            self.model = build_model(self.cfg)
        self.dtype = np.dtype(self.cfg.model.dtype)
        self.rng = np.random.default_rng([self.cfg.seed, 1])
        levels = self.cfg.model.levels
        self.alphas = default_alphas(levels, self.cfg.loss.alpha_base)

    def _trace(self, event: str) -> None:
        if self.cfg.verbose:
            self.trace.append(event)

    def _batch(self, scenes: Sequence[Scene], idx: Sequence[int]):
        crop = self.cfg.optim.crop_px
        levels, sigma0 = self.cfg.model.levels, self.cfg.density.sigma0
        imgs, pyrs = [], []
        for i in idx:
            img, pts = scenes[i]
            h, w = img.shape
            fresh = False
            if crop and (h > crop or w > crop):
                ch, cw = min(crop, h), min(crop, w)
                y0 = int(self.rng.integers(0, h - ch + 1))
                x0 = int(self.rng.integers(0, w - cw + 1))
                img = img[y0:y0 + ch, x0:x0 + cw]
                p = pts.points - [x0, y0]
                keep = (p[:, 0] >= 0) & (p[:, 0] < cw) & (p[:, 1] >= 0) & (p[:, 1] < ch)
                pts = PointSet(p[keep], None if pts.radii is None else pts.radii[keep])
                fresh = True
            if fresh:
                pyr = gt_pyramid(pts, img.shape, levels, sigma0)
            else:
                pyr = self._gt_cache.get(i)
                if pyr is None:
                    pyr = gt_pyramid(pts, img.shape, levels, sigma0)
                    self._gt_cache[i] = pyr
            imgs.append(img)
            pyrs.append(pyr)
        x = Tensor(np.stack(imgs)[:, None], dtype=self.dtype)
        gts = [np.stack([p[j].grid for p in pyrs]) for j in range(levels + 1)]
        return x, gts

    def train_step(self, x: Tensor, gts: list[np.ndarray], lr: float) -> StepRecord:
        params = self.model.parameters()
        self.model.train()
        self._trace("forward")
        out = self.model(x)
        shares = None
        if self.cfg.model.fusion_mode == "steerer":
            self._trace("pwsp")
            detached = [p.data[:, 0] for p in out.preds]
            grid = pwsp_select(gts, detached, self.cfg.loss.patch_px, self.cfg.loss.eps)
            masks = build_masks(grid, [g.shape[-2:] for g in gts])
            shares = grid.shares(self.cfg.model.levels).tolist()
            self._trace("loss")
            loss = msil_loss(gts, out.preds, masks, self.alphas)
            level_losses = [0.5 * float(np.sum((m[:, None] * (p.data - g[:, None])) ** 2))
                            for p, g, m in zip(out.preds, gts, masks.upsampled)]
        else:
            self._trace("loss")
            g0 = gts[0][:, None]
            loss = ops.masked_mse(out.preds[0], g0, np.ones_like(g0))
            level_losses = [loss.item()]
        value = loss.item()
        if not math.isfinite(value):
            raise NumericError(f"non-finite loss at step {self.step}: per-level losses {level_losses}")
        self._trace("backward")
        backward(loss)
        if lr > 0:
            self._trace("adam")
            adam_step(params, lr, self.cfg.optim.beta1, self.cfg.optim.beta2, self.cfg.optim.adam_eps)
        else:
            zero_grad(params)
        return StepRecord(0, self.step, lr, value, level_losses, shares)

    def fit(self, train: Sequence[Scene], val: Sequence[Scene] = (),
            on_epoch: Optional[Callable[[dict], None]] = None) -> Checkpoint:
        o = self.cfg.optim
        self._gt_cache: dict[int, list] = {}
        n = len(train)
        if n == 0:
            raise ValueError("training split is empty")
        steps_per_epoch = math.ceil(n / o.batch_size)
        for epoch in range(o.epochs):
            perm = self.rng.permutation(n)
            losses, share_acc = [], []
            for b in range(steps_per_epoch):
                idx = perm[b * o.batch_size:(b + 1) * o.batch_size]
                lr = warmup_cosine_lr(self.step, steps_per_epoch, o.peak_lr, o.warmup_epochs, o.epochs)
                x, gts = self._batch(train, idx)
                try:
                    rec = self.train_step(x, gts, lr)
                except NumericError as exc:
                    raise NumericError(f"epoch {epoch}, batch {b} (scenes {list(map(int, idx))}): {exc}") from None
                losses.append(rec.loss)
                if rec.shares is not None:
                    share_acc.append(rec.shares)
                self.step += 1
            entry = {"epoch": epoch, "loss": float(np.mean(losses)), "lr": lr}
            if share_acc:
                entry["train_shares"] = np.mean(share_acc, axis=0).tolist()
            if val:
                rep = evaluate_model(self.model, val, self.cfg, with_shares=False)
                entry.update({k: rep[k] for k in ("mae", "mse", "nae", "f1")})
            self.history.append(entry)
            log.info("epoch %d loss %.6g %s", epoch, entry["loss"],
                     " ".join(f"{k}={v:.4g}" for k, v in entry.items() if k in ("mae", "mse", "nae", "f1")))
            if "train_shares" in entry:
                log.info("  level shares %s", " ".join(f"{s:.3f}" for s in entry["train_shares"]))
            if on_epoch is not None:
                on_epoch(entry)
        return Checkpoint(self.cfg, self.model, o.epochs, self.history)


def train(cfg: RunConfig, save: bool = True) -> Checkpoint:
    """Train on ``cfg.data.root`` and write ``<out>/checkpoint.bin``."""
    manifest = read_corpus(cfg.data.root)
    train_scenes = load_split(cfg.data.root, manifest, "train")
    val_scenes = load_split(cfg.data.root, manifest, "val")
    ckpt = Trainer(cfg).fit(train_scenes, val_scenes)
    if save:
        save_checkpoint(Path(cfg.out) / CHECKPOINT_NAME, ckpt)
    return ckpt


# --------------------------------------------------------------------------- inference


def forward_levels(model: SteererModel, img: np.ndarray, cfg: RunConfig) -> list[Optional[np.ndarray]]:
    """Eval-mode prediction maps for one (already padded) image, by level."""
    model.eval()
    with no_grad():
        out = model(Tensor(img[None, None], dtype=np.dtype(cfg.model.dtype)))
    return [None if p is None else p.data[0, 0].astype(np.float64) for p in out.preds]


def predict_density(model: SteererModel, img: np.ndarray, cfg: RunConfig) -> np.ndarray:
    """Level-0 density for an image of any size: zero-pad, predict, crop back."""
    padded = pad_image(img, pad_multiple(cfg))
    return crop_level0(forward_levels(model, padded, cfg)[0], img.shape)


def localize(density: np.ndarray, cfg: RunConfig) -> PointSet:
    return extract_maxima(density, cfg.localize.threshold, cfg.localize.window, stride=level_stride(0))


def match_sigma(pts: PointSet, cfg: RunConfig):
    if pts.radii is None:
        return cfg.localize.min_radius
    return np.maximum(pts.radii, cfg.localize.min_radius)


def evaluate_predictions(scenes: Sequence[Scene], density_fn: Callable[[np.ndarray, PointSet], np.ndarray],
                         cfg: RunConfig) -> dict:
    """Counting and localization report for level-0 maps produced by ``density_fn``."""
    pairs = []
    tp = fp = fn = 0
    for img, pts in scenes:
        d = density_fn(img, pts)
        pairs.append((count_from_density(d), float(len(pts))))
        m = match_points(localize(d, cfg), pts, match_sigma(pts, cfg))
        tp, fp, fn = tp + m.tp, fp + m.fp, fn + m.fn
    mae, mse, nae = counting_metrics(pairs)
    p, r, f1 = prf(MatchResult(tp, fp, fn))
    return {"n_images": len(scenes), "mae": mae, "mse": mse, "nae": nae,
            "precision": p, "recall": r, "f1": f1, "tp": tp, "fp": fp, "fn": fn,
            "counts": pairs}


def level_shares(model: SteererModel, scenes: Sequence[Scene], cfg: RunConfig) -> list[float]:
    """Fraction of patches PWSP assigns to each level over ``scenes``."""
    levels = cfg.model.levels
    acc = np.zeros(levels + 1)
    for img, pts in scenes:
        grid = scene_selection(model, img, pts, cfg)
        acc += np.bincount(grid.ravel(), minlength=levels + 1)
    return (acc / max(acc.sum(), 1)).tolist()


def scene_selection(model: SteererModel, img: np.ndarray, pts: PointSet, cfg: RunConfig) -> np.ndarray:
    padded = pad_image(img, pad_multiple(cfg))
    preds = forward_levels(model, padded, cfg)
    gts = gt_pyramid(pts, padded.shape, cfg.model.levels, cfg.density.sigma0)
    return pwsp_select(gts, preds, cfg.loss.patch_px, cfg.loss.eps).labels


def evaluate_model(model: SteererModel, scenes: Sequence[Scene], cfg: RunConfig, with_shares: bool = True) -> dict:
    rep = evaluate_predictions(scenes, lambda img, pts: predict_density(model, img, cfg), cfg)
    if with_shares and cfg.model.fusion_mode == "steerer" and scenes:
        rep["level_shares"] = level_shares(model, scenes, cfg)
    return rep


def evaluate(cfg: RunConfig, ckpt: Checkpoint, split: str = "val") -> dict:
    manifest = read_corpus(cfg.data.root)
    scenes = load_split(cfg.data.root, manifest, split)
    if not scenes:
        raise ValueError(f"split {split!r} is empty")
    rep = evaluate_model(ckpt.model, scenes, ckpt.config)
    rep["split"] = split
    return rep


def gt_density_fn(cfg: RunConfig):
    """``density_fn`` that returns the ground-truth level-0 map (oracle predictions)."""
    def fn(img, pts):
        padded = pad_image(img, pad_multiple(cfg))
        d = gt_pyramid(pts, padded.shape, cfg.model.levels, cfg.density.sigma0)[0].grid
        return crop_level0(d, img.shape)
    return fn


# --------------------------------------------------------------------------- routing


def routing_report(model: SteererModel, scenes: Sequence[Scene], cfg: RunConfig) -> dict:
    """How PWSP routes patches whose blobs are all of the smallest or all of the largest class."""
    patch = cfg.loss.patch_px
    small = {"n": 0, "level0": 0}
    large = {"n": 0, "coarse": 0}
    hist = np.zeros(cfg.model.levels + 1, dtype=int)
    radii = np.concatenate([p.radii for _, p in scenes if p.radii is not None and len(p)] or [np.zeros(0)])
    if radii.size == 0:
        raise ValueError("routing report needs annotations with radii")
    r_min, r_max = radii.min(), radii.max()
    for img, pts in scenes:
        if pts.radii is None or len(pts) == 0:
            continue
        labels = scene_selection(model, img, pts, cfg)
        hist += np.bincount(labels.ravel(), minlength=len(hist))
        for p in range(labels.shape[0]):
            for q in range(labels.shape[1]):
                classes = blob_classes_in_patch(pts, q * patch, p * patch, patch)
                if not classes:
                    continue
                if classes == {r_max} and r_max > r_min:
                    large["n"] += 1
                    large["coarse"] += int(labels[p, q] >= 1)
                elif classes == {r_min} and r_max > r_min:
                    small["n"] += 1
                    small["level0"] += int(labels[p, q] == 0)
    return {
        "small_only_patches": small["n"],
        "small_to_level0": small["level0"] / small["n"] if small["n"] else float("nan"),
        "large_only_patches": large["n"],
        "large_to_coarse": large["coarse"] / large["n"] if large["n"] else float("nan"),
        "histogram": hist.tolist(),
    }
