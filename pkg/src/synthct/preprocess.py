"""Intensity normalization, slice extraction, channel handling and resampling.

Network traffic is a ``TensorImage``: a float32 ``(C, H, W)`` numpy array
with image values in [-1, 1]. CT slices use a fixed HU window, MRI slices a
per-volume percentile window.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volume import Volume

__all__ = [
    "NormalizationSpec",
    "denormalize_ct",
    "denormalize_ct_volume",
    "normalize_ct",
    "normalize_mri",
    "resample_slice",
    "stack_slices",
    "to_one_channel",
    "to_three_channel",
]


@dataclass(frozen=True)
class NormalizationSpec:
    ct_clip: tuple[float, float] = (-1000.0, 2000.0)
    mri_percentiles: tuple[float, float] = (1.0, 99.0)

    def __post_init__(self):
        lo, hi = self.ct_clip
        if not lo < hi:
            raise ValueError(f"ct_clip must satisfy lo < hi, got {self.ct_clip}")
        p_lo, p_hi = self.mri_percentiles
        if not 0 <= p_lo < p_hi <= 100:
            raise ValueError(f"mri_percentiles must satisfy 0 <= lo < hi <= 100, got {self.mri_percentiles}")

    @property
    def ct_window(self) -> float:
        return self.ct_clip[1] - self.ct_clip[0]


def _require(v: Volume, modality: str) -> None:
    if v.modality != modality:
        raise ValueError(f"expected a {modality} volume, got {v.modality}")


def _affine_to_unit(x: np.ndarray, lo: float, hi: float) -> np.ndarray:
    x = np.clip(x.astype(np.float64), lo, hi)
    return np.clip(2.0 * (x - lo) / (hi - lo) - 1.0, -1.0, 1.0)


def normalize_ct(v: Volume, spec: NormalizationSpec = NormalizationSpec()) -> list[np.ndarray]:
    """Clamp HU to the window and map it affinely onto [-1, 1], one image per slice."""
    _require(v, "CT")
    out = _affine_to_unit(v.voxels, *spec.ct_clip).astype(np.float32)
    return [s[None].copy() for s in out]


def denormalize_ct(t: np.ndarray, spec: NormalizationSpec = NormalizationSpec()) -> np.ndarray:
    """Inverse of :func:`normalize_ct` for a 1-channel image; returns an (H, W) HU slice."""
    t = np.asarray(t)
    if t.ndim != 3 or t.shape[0] != 1:
        raise ValueError(f"expected a 1-channel (1, H, W) image, got shape {t.shape}")
    lo, hi = spec.ct_clip
    return lo + (t[0].astype(np.float64) + 1.0) / 2.0 * (hi - lo)


def denormalize_ct_volume(slices: list[np.ndarray], like: Volume,
                          spec: NormalizationSpec = NormalizationSpec()) -> Volume:
    hu = np.stack([denormalize_ct(t, spec) for t in slices])
    return Volume(hu, "CT", like.spacing_mm, like.patient_id)


def normalize_mri(v: Volume, spec: NormalizationSpec = NormalizationSpec()) -> list[np.ndarray]:
    """Per-volume percentile window mapped onto [-1, 1].

    A volume whose window collapses (e.g. constant intensity) maps to -1.
    """
    _require(v, "MRI")
    vox = v.voxels.astype(np.float64)
    lo, hi = np.percentile(vox, spec.mri_percentiles)
    if not hi > lo:
        out = np.full(vox.shape, -1.0, dtype=np.float32)
    else:
        out = _affine_to_unit(vox, lo, hi).astype(np.float32)
    return [s[None].copy() for s in out]


def to_three_channel(t: np.ndarray) -> np.ndarray:
    t = np.asarray(t)
    if t.ndim != 3 or t.shape[0] != 1:
        raise ValueError(f"expected a 1-channel image, got shape {t.shape}")
    return np.repeat(t, 3, axis=0)


def to_one_channel(t: np.ndarray) -> np.ndarray:
    t = np.asarray(t)
    if t.ndim != 3 or t.shape[0] != 3:
        raise ValueError(f"expected a 3-channel image, got shape {t.shape}")
    # sum/3 rather than mean keeps replicated channels exact in float32
    return (t.sum(axis=0, keepdims=True, dtype=np.float64) / 3.0).astype(t.dtype)


def resample_slice(t: np.ndarray, target_hw: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of every channel with corner-aligned sampling.

    Corner pixels map onto corner pixels, so values stay inside the input
    range and same-size resampling returns the input unchanged.
    """
    t = np.asarray(t)
    if t.ndim != 3:
        raise ValueError(f"expected a (C, H, W) image, got shape {t.shape}")
    H2, W2 = (int(s) for s in target_hw)
    if H2 < 1 or W2 < 1:
        raise ValueError(f"degenerate resample target {target_hw}")
    _, H, W = t.shape
    if (H, W) == (H2, W2):
        return t.copy()

    def axis_weights(n_in, n_out):
        pos = np.linspace(0.0, n_in - 1, n_out) if n_out > 1 else np.zeros(1)
        i0 = np.clip(np.floor(pos).astype(int), 0, n_in - 1)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, pos - i0

    y0, y1, fy = axis_weights(H, H2)
    x0, x1, fx = axis_weights(W, W2)
    src = t.astype(np.float64)
    rows = src[:, y0, :] * (1 - fy)[None, :, None] + src[:, y1, :] * fy[None, :, None]
    out = rows[:, :, x0] * (1 - fx)[None, None, :] + rows[:, :, x1] * fx[None, None, :]
    return out.astype(t.dtype)


def stack_slices(slices: list[np.ndarray], three_channel: bool = True,
                 target_hw: tuple[int, int] | None = None) -> np.ndarray:
    """Batch a list of 1-channel images into an (N, C, H, W) float32 array."""
    out = []
    for s in slices:
        if target_hw is not None:
            s = resample_slice(s, target_hw)
        out.append(to_three_channel(s) if three_channel else s)
    return np.stack(out).astype(np.float32)
