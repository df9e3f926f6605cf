"""Paired, perfectly aligned MRI/CT head phantoms.

Each phantom is an elliptic head (constant cross-section across slices) with
a skull ring, soft tissue, a pair of ventricles in the upper slices and air
pockets in the lower half of the head. Skull and air are both dark in the
MRI but 2000 HU apart in the CT, so a purely pixelwise MRI->CT map cannot get
both right.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from .volume import Volume

__all__ = [
    "AIR",
    "SKULL",
    "SOFT_TISSUE",
    "TISSUE_TABLE",
    "VENTRICLE",
    "Phantom",
    "PhantomSpec",
    "generate_phantom",
    "phantom_cohort",
    "phantom_labels",
    "tissue_lookup",
]

AIR, SKULL, SOFT_TISSUE, VENTRICLE = 0, 1, 2, 3

# label -> (name, CT in HU, MRI intensity on [0, 1])
TISSUE_TABLE = {
    AIR: ("air", -1000.0, 0.02),
    SKULL: ("skull", 1000.0, 0.05),
    SOFT_TISSUE: ("soft_tissue", 40.0, 0.70),
    VENTRICLE: ("ventricle", 15.0, 0.90),
}
_BY_NAME = {name: (hu, mri) for name, hu, mri in TISSUE_TABLE.values()}

CT_VALID_RANGE = (-1000.0, 3000.0)
MRI_VALID_RANGE = (0.0, 1.0)
# noise_sigma is in MRI units; CT noise is scaled by this window width
CT_NOISE_SCALE_HU = 3000.0


def tissue_lookup(label: str | int) -> tuple[float, float]:
    """``(ct_hu, mri_intensity)`` for a tissue name or integer label."""
    if isinstance(label, (int, np.integer)) and int(label) in TISSUE_TABLE:
        _, hu, mri = TISSUE_TABLE[int(label)]
        return hu, mri
    if isinstance(label, str) and label in _BY_NAME:
        return _BY_NAME[label]
    raise KeyError(f"unknown tissue label {label!r}")


class PhantomSpecError(ValueError):
    pass


@dataclass(frozen=True)
class PhantomSpec:
    n_slices: int = 16
    height: int = 64
    width: int = 64
    seed: int = 0
    head_axes_frac: tuple[float, float] = (0.4, 0.35)
    skull_thickness_frac: float = 0.15
    n_air_pockets: int = 2
    noise_sigma: float = 0.0
    patient_id: str | None = None

    def validate(self) -> None:
        if self.n_slices < 1:
            raise PhantomSpecError("n_slices must be >= 1")
        if self.height < 16 or self.width < 16:
            raise PhantomSpecError(f"height and width must be >= 16, got {self.height}x{self.width}")
        a, b = self.head_axes_frac
        if not (0 < a < 1 and 0 < b < 1):
            raise PhantomSpecError(f"head ellipse does not fit the image: axes {self.head_axes_frac}")
        if not 0 < self.skull_thickness_frac < 0.2:
            raise PhantomSpecError("skull_thickness_frac must lie in (0, 0.2)")
        if self.n_air_pockets < 0:
            raise PhantomSpecError("n_air_pockets must be >= 0")
        if not (self.noise_sigma >= 0 and math.isfinite(self.noise_sigma)):
            raise PhantomSpecError("noise_sigma must be a finite non-negative real")

    @property
    def name(self) -> str:
        return self.patient_id or f"phantom{self.seed:04d}"


class Phantom(NamedTuple):
    mri: Volume
    ct: Volume
    body_mask: Volume


def _ellipse(yy, xx, cy, cx, ry, rx):
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def _head_geometry(spec: PhantomSpec):
    """Pixel grids, head centre/semi-axes and the geometry rng (after centring draws)."""
    geo = np.random.default_rng(np.random.SeedSequence([spec.seed, 0]))
    H, W = spec.height, spec.width
    ry, rx = spec.head_axes_frac[0] * H / 2, spec.head_axes_frac[1] * W / 2
    # small seeded shift of the head centre, kept inside the frame
    margin_y, margin_x = (H - 1) / 2 - ry, (W - 1) / 2 - rx
    cy = (H - 1) / 2 + geo.uniform(-1, 1) * min(max(margin_y, 0.0), 0.05 * H)
    cx = (W - 1) / 2 + geo.uniform(-1, 1) * min(max(margin_x, 0.0), 0.05 * W)
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    return yy, xx, cy, cx, ry, rx, geo


def phantom_labels(spec: PhantomSpec) -> np.ndarray:
    """Integer tissue map (Z, H, W) shared by the MRI, CT and mask volumes."""
    spec.validate()
    yy, xx, cy, cx, ry, rx, geo = _head_geometry(spec)
    Z = spec.n_slices
    head = _ellipse(yy, xx, cy, cx, ry, rx)
    keep = 1.0 - spec.skull_thickness_frac
    brain = _ellipse(yy, xx, cy, cx, ry * keep, rx * keep)

    labels = np.full((Z, spec.height, spec.width), AIR, dtype=np.int8)
    labels[:, head] = SKULL
    labels[:, brain] = SOFT_TISSUE

    # ventricles: two mirrored ellipses above the centre, present in upper slices
    vent_dy = geo.uniform(0.15, 0.3) * ry
    vent_dx = geo.uniform(0.15, 0.25) * rx
    vent_r = geo.uniform(0.12, 0.2)
    for k in range(Z):
        zf = (k + 0.5) / Z
        scale = math.sin(math.pi * (zf - 0.35) / 0.65) if zf > 0.35 else 0.0
        if scale <= 0.15:
            continue
        for side in (-1, 1):
            v = _ellipse(yy, xx, cy - vent_dy, cx + side * vent_dx,
                         vent_r * scale * ry * 1.4, vent_r * scale * rx)
            labels[k][v & brain] = VENTRICLE

    # air pockets: seeded ellipsoids centred in the lower in-plane half of the brain
    zz = np.arange(Z, dtype=np.float64)[:, None, None]
    for _ in range(spec.n_air_pockets):
        py = cy + geo.uniform(0.3, 0.7) * ry * keep
        px = cx + geo.uniform(-0.45, 0.45) * rx * keep
        pz = geo.uniform(0, Z - 1)
        pr_y = geo.uniform(0.08, 0.16) * ry
        pr_x = geo.uniform(0.08, 0.16) * rx
        pr_z = geo.uniform(0.3, 0.6) * Z
        pocket = (((zz - pz) / pr_z) ** 2 + ((yy - py) / pr_y) ** 2
                  + ((xx - px) / pr_x) ** 2) <= 1.0
        labels[pocket & brain[None]] = AIR
    return labels


def generate_phantom(spec: PhantomSpec) -> Phantom:
    """Build the aligned (mri, ct, body_mask) triple for ``spec``."""
    labels = phantom_labels(spec)
    ct_lut = np.array([TISSUE_TABLE[i][1] for i in range(4)])
    mri_lut = np.array([TISSUE_TABLE[i][2] for i in range(4)])
    ct = ct_lut[labels]
    mri = mri_lut[labels]

    yy, xx, cy, cx, ry, rx, _ = _head_geometry(spec)
    mask = _ellipse(yy, xx, cy, cx, ry, rx)

    if spec.noise_sigma > 0:
        noise = np.random.default_rng(np.random.SeedSequence([spec.seed, 1]))
        inside = np.broadcast_to(mask, labels.shape)
        n_in = int(inside.sum())
        mri[inside] += noise.normal(0.0, spec.noise_sigma, n_in)
        ct[inside] += noise.normal(0.0, spec.noise_sigma * CT_NOISE_SCALE_HU, n_in)
        np.clip(mri, *MRI_VALID_RANGE, out=mri)
        np.clip(ct, *CT_VALID_RANGE, out=ct)

    spacing = (3.0, 240.0 / spec.height, 240.0 / spec.width)
    pid = spec.name
    mask_vol = np.broadcast_to(mask, labels.shape).astype(np.float32)
    return Phantom(
        mri=Volume(mri, "MRI", spacing, pid),
        ct=Volume(ct, "CT", spacing, pid),
        body_mask=Volume(mask_vol, "MASK", spacing, pid),
    )


def phantom_cohort(n: int, seed: int = 0, **overrides) -> list[PhantomSpec]:
    """``n`` specs with seeded variation in head size, skull and pocket count.

    Heads fill most of the field of view, as in clinical head scans, so the
    skull ring stays several pixels thick at 64x64.

    Keyword overrides are applied to every spec (e.g. ``noise_sigma=0.01``).
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    specs = []
    for i in range(n):
        spec = PhantomSpec(
            seed=int(rng.integers(2**31)),
            head_axes_frac=(float(rng.uniform(0.76, 0.84)), float(rng.uniform(0.66, 0.74))),
            skull_thickness_frac=float(rng.uniform(0.14, 0.19)),
            n_air_pockets=int(rng.integers(1, 4)),
            patient_id=f"phantom{seed:03d}_{i:03d}",
        )
        specs.append(replace(spec, **overrides))
    return specs
