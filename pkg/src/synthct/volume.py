"""In-memory volume model, the ``.vhdr``/``.vraw`` container and patient splits.

A volume on disk is a pair of files sharing a stem::

    head01.vhdr   UTF-8 ``key=value`` header
    head01.vraw   row-major little-endian float32 payload (col fastest)
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = [
    "MODALITIES",
    "UNITS",
    "DatasetSplit",
    "Volume",
    "VolumeFormatError",
    "read_volume",
    "split_train_test",
    "volume_paths",
    "write_volume",
]

MODALITIES = ("MRI", "CT", "MASK")
UNITS = ("HU", "arbitrary", "binary")
_REQUIRED_UNIT = {"CT": "HU", "MASK": "binary"}
_HEADER_KEYS = ("shape", "modality", "spacing", "unit", "patient", "byteorder", "dtype")


class VolumeFormatError(ValueError):
    """A volume violates its invariants or a container file is malformed."""


@dataclass(eq=False)
class Volume:
    """A 3D scalar grid indexed (slice, row, col) = (z, y, x).

    Voxels are always held as C-contiguous float32 so that the container
    round trip is bit-exact.
    """

    voxels: np.ndarray
    modality: str
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    patient_id: str = "anon"
    intensity_unit: str | None = None

    def __post_init__(self) -> None:
        if self.modality not in MODALITIES:
            raise VolumeFormatError(f"unknown modality {self.modality!r}")
        if self.intensity_unit is None:
            self.intensity_unit = _REQUIRED_UNIT.get(self.modality, "arbitrary")
        if self.intensity_unit not in UNITS:
            raise VolumeFormatError(f"unknown intensity unit {self.intensity_unit!r}")
        required = _REQUIRED_UNIT.get(self.modality)
        if required is not None and self.intensity_unit != required:
            raise VolumeFormatError(
                f"{self.modality} volumes must use unit {required}, got {self.intensity_unit}"
            )

        vox = np.ascontiguousarray(self.voxels, dtype=np.float32)
        if vox.ndim != 3 or min(vox.shape) < 1:
            raise VolumeFormatError(f"voxels must be a non-empty 3D array, got shape {vox.shape}")
        if not np.all(np.isfinite(vox)):
            raise VolumeFormatError(f"volume {self.patient_id!r} contains non-finite voxels")
        if self.modality == "MASK" and not np.all((vox == 0) | (vox == 1)):
            raise VolumeFormatError("MASK voxels must be exactly 0 or 1")
        self.voxels = vox

        spacing = tuple(float(s) for s in self.spacing_mm)
        if len(spacing) != 3 or not all(math.isfinite(s) and s > 0 for s in spacing):
            raise VolumeFormatError(f"spacing must be three positive reals, got {self.spacing_mm}")
        self.spacing_mm = spacing  # type: ignore[assignment]
        if any(c in self.patient_id for c in "\n\r"):
            raise VolumeFormatError("patient_id may not contain line breaks")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.voxels.shape  # type: ignore[return-value]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Volume):
            return NotImplemented
        return (
            self.modality == other.modality
            and self.intensity_unit == other.intensity_unit
            and self.patient_id == other.patient_id
            and self.spacing_mm == other.spacing_mm
            and self.voxels.shape == other.voxels.shape
            and self.voxels.tobytes() == other.voxels.tobytes()
        )

    def with_voxels(self, voxels: np.ndarray, modality: str | None = None) -> "Volume":
        """Copy metadata onto new voxel data, optionally changing modality."""
        modality = modality or self.modality
        unit = self.intensity_unit if modality == self.modality else None
        return Volume(voxels, modality, self.spacing_mm, self.patient_id, unit)


def volume_paths(path: str | Path) -> tuple[Path, Path]:
    """Return ``(header, payload)`` paths for a stem or either file name."""
    path = Path(path)
    if path.suffix in (".vhdr", ".vraw"):
        path = path.with_suffix("")
    return path.with_name(path.name + ".vhdr"), path.with_name(path.name + ".vraw")


def write_volume(v: Volume, path: str | Path) -> None:
    hdr, raw = volume_paths(path)
    z, y, x = v.shape
    lines = [
        f"shape={z},{y},{x}",
        f"modality={v.modality}",
        "spacing=" + ",".join(repr(s) for s in v.spacing_mm),
        f"unit={v.intensity_unit}",
        f"patient={v.patient_id}",
        "byteorder=little",
        "dtype=float32",
    ]
    hdr.write_text("\n".join(lines) + "\n", encoding="utf-8")
    raw.write_bytes(v.voxels.astype("<f4", copy=False).tobytes(order="C"))


def _parse_header(text: str, source: Path) -> dict[str, str]:
    fields = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise VolumeFormatError(f"{source}:{lineno}: expected key=value, got {line!r}")
        fields[key.strip()] = value.strip()
    missing = [k for k in _HEADER_KEYS if k not in fields]
    if missing:
        raise VolumeFormatError(f"{source}: missing header keys {missing}")
    if fields["byteorder"] != "little" or fields["dtype"] != "float32":
        raise VolumeFormatError(
            f"{source}: only little-endian float32 payloads are supported "
            f"(got byteorder={fields['byteorder']}, dtype={fields['dtype']})"
        )
    return fields


def read_volume(path: str | Path) -> Volume:
    hdr, raw = volume_paths(path)
    if not hdr.exists():
        raise FileNotFoundError(f"volume header not found: {hdr}")
    if not raw.exists():
        raise FileNotFoundError(f"volume payload not found: {raw}")
    fields = _parse_header(hdr.read_text(encoding="utf-8"), hdr)
    try:
        shape = tuple(int(s) for s in fields["shape"].split(","))
        spacing = tuple(float(s) for s in fields["spacing"].split(","))
    except ValueError as exc:
        raise VolumeFormatError(f"{hdr}: unparseable shape or spacing ({exc})") from None
    if len(shape) != 3 or min(shape) < 1:
        raise VolumeFormatError(f"{hdr}: invalid shape {fields['shape']!r}")

    payload = raw.read_bytes()
    expected = 4 * shape[0] * shape[1] * shape[2]
    if len(payload) != expected:
        raise VolumeFormatError(
            f"{raw}: header declares shape {shape} ({expected} bytes) "
            f"but payload holds {len(payload)} bytes"
        )
    voxels = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
    try:
        return Volume(voxels, fields["modality"], spacing, fields["patient"], fields["unit"])
    except VolumeFormatError as exc:
        raise VolumeFormatError(f"{hdr}: {exc}") from None


@dataclass(frozen=True)
class DatasetSplit:
    train_ids: list[str]
    test_ids: list[str]


def split_train_test(ids: Sequence[str], ratio_train: float | Fraction = Fraction(7, 10),
                     seed: int = 0) -> DatasetSplit:
    """Shuffle ``ids`` with a seeded permutation and cut at ``round(ratio * N)``.

    Ties round up, so one id at ratio 0.7 goes to train. Floats are read as
    their shortest decimal repr (0.7 means 7/10 exactly).
    """
    ids = list(ids)
    if not ids:
        raise ValueError("cannot split an empty id list")
    if len(set(ids)) != len(ids):
        raise ValueError("patient ids must be unique")
    ratio = ratio_train if isinstance(ratio_train, Fraction) else Fraction(str(ratio_train))
    if not 0 < ratio < 1:
        raise ValueError(f"ratio_train must lie in (0, 1), got {ratio_train}")

    n_train = math.floor(ratio * len(ids) + Fraction(1, 2))
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    return DatasetSplit(train_ids=shuffled[:n_train], test_ids=shuffled[n_train:])
