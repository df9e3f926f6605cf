"""Evaluation protocol: body mask, masked MAE in HU, PSNR, SSIM and mean ± std aggregation."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage

from .volume import Volume

__all__ = [
    "AggregateReport",
    "DATA_RANGE",
    "MetricsRecord",
    "REPORT_COLUMNS",
    "aggregate",
    "body_mask",
    "evaluate_volume",
    "format_row",
    "mae_hu",
    "masked_mse",
    "psnr_db",
    "render_csv",
    "render_table",
    "ssim",
]

log = logging.getLogger(__name__)

DATA_RANGE = 3000.0
BODY_THRESHOLD_HU = -500.0
SSIM_SIGMA = 1.5
SSIM_RADIUS = 5  # 11x11 window
SSIM_K1, SSIM_K2 = 0.01, 0.03

REPORT_COLUMNS = ("config", "mae_mean", "mae_std", "psnr_mean", "psnr_std",
                  "ssim_mean", "ssim_std", "n", "psnr_excluded")


def _voxels(v) -> np.ndarray:
    return v.voxels if isinstance(v, Volume) else np.asarray(v)


def body_mask(ct: Volume) -> Volume:
    """Per slice: threshold above -500 HU, fill holes, keep the largest 8-connected component."""
    if ct.modality != "CT":
        raise ValueError(f"body_mask needs a CT volume, got {ct.modality}")
    eight = np.ones((3, 3), dtype=bool)
    out = np.zeros(ct.shape, dtype=np.float32)
    for k, sl in enumerate(ct.voxels):
        m = ndimage.binary_fill_holes(sl > BODY_THRESHOLD_HU)
        labels, n = ndimage.label(m, structure=eight)
        if n == 0:
            continue
        sizes = np.bincount(labels.ravel())[1:]
        # ties resolve to the lowest label for determinism
        out[k] = labels == (int(np.argmax(sizes)) + 1)
    return Volume(out, "MASK", ct.spacing_mm, ct.patient_id)


def _check_pair(syn, real, mask=None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    a = _voxels(syn).astype(np.float64)
    b = _voxels(real).astype(np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if mask is None:
        m = np.ones(a.shape, dtype=bool)
    else:
        m = _voxels(mask) > 0
        if m.shape != a.shape:
            raise ValueError(f"mask shape {m.shape} does not match images {a.shape}")
    if not m.any():
        raise ValueError("mask is empty")
    return a, b, m


def mae_hu(syn, real, mask=None) -> float:
    """Mean absolute difference over mask voxels (whole image when ``mask`` is None)."""
    a, b, m = _check_pair(syn, real, mask)
    return float(np.abs(a[m] - b[m]).mean())


def masked_mse(syn, real, mask=None) -> float:
    a, b, m = _check_pair(syn, real, mask)
    return float(np.square(a[m] - b[m]).mean())


def psnr_db(syn, real, mask=None, data_range: float = DATA_RANGE) -> float:
    """10 log10(range^2 / MSE) over mask voxels; ``math.inf`` when MSE is zero."""
    if not data_range > 0:
        raise ValueError("data_range must be > 0")
    mse = masked_mse(syn, real, mask)
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(data_range**2 / mse)


def _gaussian_window() -> np.ndarray:
    x = np.arange(-SSIM_RADIUS, SSIM_RADIUS + 1, dtype=np.float64)
    g = np.exp(-0.5 * (x / SSIM_SIGMA) ** 2)
    return g / g.sum()


def _ssim_slice(x: np.ndarray, y: np.ndarray, data_range: float) -> float:
    g = _gaussian_window()

    def blur(img):
        # reflect padding only touches the border band that is cropped below
        out = ndimage.convolve1d(img, g, axis=0, mode="reflect")
        return ndimage.convolve1d(out, g, axis=1, mode="reflect")

    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mx, my = blur(x), blur(y)
    vx = blur(x * x) - mx * mx
    vy = blur(y * y) - my * my
    cxy = blur(x * y) - mx * my
    s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    r = SSIM_RADIUS
    return float(s[r:-r, r:-r].mean())


def ssim(syn, real, data_range: float = DATA_RANGE) -> float:
    """Gaussian-window (11x11, sigma 1.5) SSIM; 3D inputs are averaged over slices."""
    a = _voxels(syn).astype(np.float64)
    b = _voxels(real).astype(np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.ndim != 3:
        raise ValueError(f"expected 2D slices or a 3D volume, got {a.ndim}D")
    if min(a.shape[1:]) < 2 * SSIM_RADIUS + 1:
        raise ValueError(f"slices {a.shape[1:]} are smaller than the 11x11 SSIM window")
    return float(np.mean([_ssim_slice(x, y, data_range) for x, y in zip(a, b)]))


@dataclass(frozen=True)
class MetricsRecord:
    patient_id: str
    mae_hu: float
    psnr_db: float
    ssim: float


def evaluate_volume(syn: Volume, real: Volume, mask: Volume | None = None,
                    data_range: float = DATA_RANGE, mask_ssim: bool = False) -> MetricsRecord:
    """Metrics for one synthetic/real CT pair; the mask defaults to :func:`body_mask` of ``real``."""
    mask = body_mask(real) if mask is None else mask
    s_syn, s_real = syn.voxels, real.voxels
    if mask_ssim:
        # outside the body both images are set to air so only the body contributes structure
        m = mask.voxels > 0
        s_syn = np.where(m, s_syn, -1000.0)
        s_real = np.where(m, s_real, -1000.0)
    return MetricsRecord(
        patient_id=real.patient_id,
        mae_hu=mae_hu(syn, real, mask),
        psnr_db=psnr_db(syn, real, mask, data_range),
        ssim=ssim(s_syn, s_real, data_range),
    )


@dataclass(frozen=True)
class AggregateReport:
    config: str
    n: int
    mae_mean: float
    mae_std: float
    psnr_mean: float
    psnr_std: float
    ssim_mean: float
    ssim_std: float
    psnr_excluded: int = 0

    def as_row(self) -> dict:
        return {c: getattr(self, c) for c in REPORT_COLUMNS}


def _mean_std(values: Sequence[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        return math.inf, 0.0
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return float(arr.mean()), std


def aggregate(records: Sequence[MetricsRecord], config: str = "") -> AggregateReport:
    """Mean and sample standard deviation (n - 1) of each metric over patients.

    Infinite PSNR values (exact reconstructions) are left out of the PSNR
    statistics and counted in ``psnr_excluded``.
    """
    if not records:
        raise ValueError("cannot aggregate an empty record list")
    finite_psnr = [r.psnr_db for r in records if math.isfinite(r.psnr_db)]
    excluded = len(records) - len(finite_psnr)
    if excluded:
        log.warning("%s: %d record(s) with infinite PSNR excluded from aggregation", config, excluded)
    mae = _mean_std([r.mae_hu for r in records])
    psnr = _mean_std(finite_psnr)
    ss = _mean_std([r.ssim for r in records])
    return AggregateReport(config, len(records), *mae, *psnr, *ss, psnr_excluded=excluded)


def format_row(r: AggregateReport) -> str:
    return (f"{r.config} & {r.mae_mean:.2f} ± {r.mae_std:.2f} & "
            f"{r.psnr_mean:.2f} ± {r.psnr_std:.2f} & {r.ssim_mean:.2f} ± {r.ssim_std:.2f}")


def render_table(reports: Sequence[AggregateReport]) -> str:
    """Aligned plain-text table, one configuration per row."""
    header = ("Configuration", "MAE, HU", "PSNR, dB", "SSIM", "n")
    rows = [header] + [
        (r.config, f"{r.mae_mean:.2f} ± {r.mae_std:.2f}", f"{r.psnr_mean:.2f} ± {r.psnr_std:.2f}",
         f"{r.ssim_mean:.2f} ± {r.ssim_std:.2f}", str(r.n))
        for r in reports
    ]
    widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
    lines = [" | ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in rows]
    lines.insert(1, "-+-".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def render_csv(reports: Sequence[AggregateReport]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for r in reports:
        writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.as_row().items()})
    return buf.getvalue()
