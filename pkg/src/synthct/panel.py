"""Four-column comparison grids: MRI | synthetic CT | real CT | difference."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .volume import Volume

__all__ = ["GUTTER", "diff_colormap", "render_panel"]

GUTTER = 4
CT_WINDOW = (-1000.0, 2000.0)
BACKGROUND = (0, 0, 0)


def _gray(img: np.ndarray, lo: float, hi: float) -> np.ndarray:
    g = np.clip((img - lo) / (hi - lo), 0.0, 1.0)
    g = np.round(g * 255).astype(np.uint8)
    return np.repeat(g[..., None], 3, axis=-1)


def diff_colormap(diff_hu: np.ndarray, bound_hu: float = 300.0) -> np.ndarray:
    """Blue-white-red map symmetric about zero; 0 HU is pure white."""
    d = np.clip(np.asarray(diff_hu, dtype=np.float64) / bound_hu, -1.0, 1.0)
    neg, pos = np.minimum(d, 0.0), np.maximum(d, 0.0)
    r = 1.0 + neg
    g = 1.0 - np.abs(d)
    b = 1.0 - pos
    rgb = np.stack([r, g, b], axis=-1)
    return np.round(rgb * 255).astype(np.uint8)


def render_panel(mri: Volume, syn_ct: Volume, real_ct: Volume, mask: Volume,
                 path: str | Path, slices: Sequence[int] | None = None,
                 bound_hu: float = 300.0, gutter: int = GUTTER) -> Path:
    """Write a PNG with one row per slice index.

    The difference column shows ``syn - real`` in HU inside the mask; outside
    the mask it is drawn as zero difference.
    """
    shapes = {v.shape for v in (mri, syn_ct, real_ct, mask)}
    if len(shapes) != 1:
        raise ValueError(f"volumes are not aligned: shapes {sorted(shapes)}")
    Z, H, W = mri.shape
    if slices is None:
        slices = [Z // 2]
    slices = list(slices)
    if not slices or any(not 0 <= k < Z for k in slices):
        raise ValueError(f"slice indices {slices} out of range for {Z} slices")

    lo, hi = np.percentile(mri.voxels, [1, 99])
    hi = hi if hi > lo else lo + 1.0
    n = len(slices)
    grid = np.zeros((n * H + (n - 1) * gutter, 4 * W + 3 * gutter, 3), dtype=np.uint8)
    grid[:] = BACKGROUND
    for row, k in enumerate(slices):
        m = mask.voxels[k] > 0
        diff = np.where(m, syn_ct.voxels[k].astype(np.float64) - real_ct.voxels[k], 0.0)
        tiles = (
            _gray(mri.voxels[k], lo, hi),
            _gray(syn_ct.voxels[k], *CT_WINDOW),
            _gray(real_ct.voxels[k], *CT_WINDOW),
            diff_colormap(diff, bound_hu),
        )
        y = row * (H + gutter)
        for col, tile in enumerate(tiles):
            x = col * (W + gutter)
            grid[y:y + H, x:x + W] = tile
    path = Path(path)
    Image.fromarray(grid, mode="RGB").save(path, format="PNG")
    return path
