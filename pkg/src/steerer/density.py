"""Point annotations and multi-resolution ground-truth density maps.

Level ``j`` of the pyramid sits at stride ``2**(j+2)`` image pixels, so a
128x128 image with three coarser levels gives 32x32, 16x16, 8x8 and 4x4 maps.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np


class AnnotationError(ValueError):
    """Malformed annotation file; the message names the file and line."""


@dataclass
class PointSet:
    """Object centers ``(x, y)`` in pixels, with optional per-point radii."""

    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    radii: Optional[np.ndarray] = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        if self.radii is not None:
            self.radii = np.asarray(self.radii, dtype=np.float64).reshape(-1)
            if len(self.radii) != len(self.points):
                raise ValueError(f"{len(self.radii)} radii for {len(self.points)} points")
            if np.any(self.radii <= 0):
                raise ValueError("point radii must be positive")

    def __len__(self) -> int:
        return len(self.points)

    def clip(self, height: int, width: int) -> "PointSet":
        pts = self.points.copy()
        pts[:, 0] = np.clip(pts[:, 0], 0, np.nextafter(width, 0))
        pts[:, 1] = np.clip(pts[:, 1], 0, np.nextafter(height, 0))
        return PointSet(pts, self.radii)


@dataclass
class DensityMap:
    grid: np.ndarray
    level: int = 0

    @property
    def stride(self) -> int:
        return 2 ** (self.level + 2)

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape

    def count(self) -> float:
        return float(self.grid.sum())


def level_stride(level: int) -> int:
    return 2 ** (level + 2)


def level_sigma(sigma0: float, level: int) -> float:
    """Kernel width in level cells; halves per level, floored at one cell."""
    return max(sigma0 / 2 ** level, 1.0)


def downscale_points(pts: PointSet, level: int) -> PointSet:
    if level < 0:
        raise ValueError(f"level must be non-negative, got {level}")
    return PointSet(pts.points / level_stride(level), pts.radii)


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Square kernel of half-width ceil(3*sigma), normalized to unit sum."""
    r = int(math.ceil(3.0 * sigma))
    ax = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def rasterize_density(pts: PointSet, shape: tuple[int, int], sigma: float) -> DensityMap:
    """Sum of unit-mass truncated Gaussians, one per point, clipped at the border.

    Points are in the map's own cell coordinates; each kernel is centered on
    the cell containing the point.
    """
    h, w = shape
    if h <= 0 or w <= 0:
        raise ValueError(f"density shape must be positive, got {shape}")
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    grid = np.zeros((h, w))
    k = gaussian_kernel(sigma)
    r = k.shape[0] // 2
    for x, y in pts.points:
        cx = min(max(int(math.floor(x)), 0), w - 1)
        cy = min(max(int(math.floor(y)), 0), h - 1)
        y0, y1 = max(cy - r, 0), min(cy + r + 1, h)
        x0, x1 = max(cx - r, 0), min(cx + r + 1, w)
        grid[y0:y1, x0:x1] += k[y0 - cy + r:y1 - cy + r, x0 - cx + r:x1 - cx + r]
    return DensityMap(grid)


def gt_pyramid(pts: PointSet, image_shape: tuple[int, int], levels: int, sigma0: float = 2.0) -> list[DensityMap]:
    """Ground-truth maps for levels ``0..levels`` (finest first)."""
    H, W = image_shape
    div = level_stride(levels)
    if H % div or W % div:
        raise ValueError(f"image {H}x{W} not divisible by {div} (needed for {levels} levels)")
    out = []
    for j in range(levels + 1):
        s = level_stride(j)
        d = rasterize_density(downscale_points(pts, j), (H // s, W // s), level_sigma(sigma0, j))
        d.level = j
        out.append(d)
    return out


def is_interior(x: float, y: float, image_shape: tuple[int, int], sigma0: float, level: int = 0) -> bool:
    """Whether the point's full truncated kernel fits inside the level-``level`` map."""
    H, W = image_shape
    s = level_stride(level)
    r = int(math.ceil(3.0 * level_sigma(sigma0, level)))
    cx, cy = int(math.floor(x / s)), int(math.floor(y / s))
    return cx - r >= 0 and cy - r >= 0 and cx + r < W // s and cy + r < H // s


# --------------------------------------------------------------------------- files


def parse_annotations(text: str, source: str = "<string>") -> PointSet:
    """Parse ``x y [radius]`` lines; blank lines and ``#`` comments are skipped."""
    pts, radii = [], []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) not in (2, 3):
            raise AnnotationError(f"{source}:{lineno}: expected 'x y [radius]', got {raw!r}")
        try:
            vals = [float(p) for p in parts]
        except ValueError:
            raise AnnotationError(f"{source}:{lineno}: non-numeric field in {raw!r}") from None
        if not all(math.isfinite(v) for v in vals):
            raise AnnotationError(f"{source}:{lineno}: non-finite value in {raw!r}")
        pts.append(vals[:2])
        radii.append(vals[2] if len(vals) == 3 else None)
    has_r = [r is not None for r in radii]
    if any(has_r) and not all(has_r):
        raise AnnotationError(f"{source}: radius given on some lines but not others")
    if any(has_r) and any(r <= 0 for r in radii):
        bad = next(i for i, r in enumerate(radii) if r <= 0)
        raise AnnotationError(f"{source}: non-positive radius for point {bad}")
    return PointSet(np.array(pts).reshape(-1, 2), np.array(radii) if pts and all(has_r) else None)


def format_annotations(pts: PointSet) -> str:
    lines = []
    for i, (x, y) in enumerate(pts.points):
        if pts.radii is not None:
            lines.append(f"{float(x)!r} {float(y)!r} {float(pts.radii[i])!r}")
        else:
            lines.append(f"{float(x)!r} {float(y)!r}")
    return "\n".join(lines) + ("\n" if lines else "")


def read_annotations(path) -> PointSet:
    path = Path(path)
    return parse_annotations(path.read_text(encoding="utf-8"), str(path))


def write_annotations(path, pts: PointSet) -> None:
    Path(path).write_text(format_annotations(pts), encoding="utf-8")

