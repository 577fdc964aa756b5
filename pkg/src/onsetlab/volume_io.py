"""In-memory volume model and NIfTI reading/writing.

Volumes live on a grid whose centre voxel sits at the world origin; the
orientation tag is a three-letter axis code ("RAS", "LPS", ...) describing
where each array axis points.  Intensities are always float32.
"""

from __future__ import annotations

import itertools
import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import nibabel as nib
import numpy as np

__all__ = [
    "ORIENTATIONS",
    "Volume",
    "VolumeFormatError",
    "affine_from",
    "check_mask",
    "read_mask",
    "read_volume",
    "write_mask",
    "write_volume",
]

_PAIRS = (("L", "R"), ("P", "A"), ("I", "S"))

# every axis code with one letter from each anatomical pair
ORIENTATIONS = frozenset(
    "".join(letters)
    for perm in itertools.permutations(range(3))
    for letters in itertools.product(*(_PAIRS[p] for p in perm))
)

_META_CODE = 6  # NIfTI "comment" extension


class VolumeFormatError(ValueError):
    """Raised for files or arrays that cannot form a valid Volume."""


@dataclass
class Volume:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    orientation: str = "RAS"
    meta: dict = field(default_factory=dict)
    mask: np.ndarray | None = None

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise VolumeFormatError(f"expected a 3D array, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise VolumeFormatError("non-finite intensities")
        self.data = data.astype(np.float32, copy=False)
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise VolumeFormatError(f"spacing must be three positive values, got {self.spacing}")
        self.spacing = spacing
        if self.orientation not in ORIENTATIONS:
            raise VolumeFormatError(f"unknown orientation tag {self.orientation!r}")
        if self.mask is not None:
            self.mask = check_mask(self.mask, self.data.shape)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def affine(self) -> np.ndarray:
        return affine_from(self.shape, self.spacing, self.orientation)

    def with_data(self, data: np.ndarray, **meta) -> "Volume":
        """Copy of this volume carrying new intensities on the same grid."""
        return Volume(data, self.spacing, self.orientation, {**self.meta, **meta}, self.mask)

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return (
            self.spacing == other.spacing
            and self.orientation == other.orientation
            and self.meta == other.meta
            and np.array_equal(self.data, other.data)
        )


def check_mask(mask, shape) -> np.ndarray:
    """Validate a binary mask against ``shape`` and return it as uint8."""
    mask = np.asarray(mask)
    if mask.shape != tuple(shape):
        raise VolumeFormatError(f"mask shape {mask.shape} does not match volume shape {tuple(shape)}")
    if mask.dtype != bool and not np.isin(mask, (0, 1)).all():
        raise VolumeFormatError("mask values must be 0 or 1")
    return mask.astype(np.uint8)


def affine_from(shape, spacing, orientation: str) -> np.ndarray:
    """Voxel-to-world affine for a centred grid."""
    aff = np.zeros((4, 4))
    aff[3, 3] = 1.0
    for axis, letter in enumerate(orientation):
        world = next(i for i, pair in enumerate(_PAIRS) if letter in pair)
        sign = 1.0 if letter == _PAIRS[world][1] else -1.0
        aff[world, axis] = sign * spacing[axis]
    centre = (np.asarray(shape, dtype=float) - 1.0) / 2.0
    aff[:3, 3] = -aff[:3, :3] @ centre
    return aff


def _load(path) -> nib.Nifti1Image:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such volume: {path}")
    try:
        img = nib.load(str(path))
        img.header.get_data_shape()
    except FileNotFoundError:
        raise
    except Exception as exc:  # nibabel raises a zoo of types for bad headers
        raise VolumeFormatError(f"malformed header in {path}: {exc}") from exc
    shape = img.shape
    if len(shape) == 4 and shape[3] == 1:
        return img
    if len(shape) == 4:
        raise VolumeFormatError(f"{path} is a 4D series with {shape[3]} volumes; only single 3D volumes are supported")
    if len(shape) != 3:
        raise VolumeFormatError(f"{path} has {len(shape)} dimensions; expected 3")
    return img


def _array(img, path) -> np.ndarray:
    try:
        data = np.asarray(img.dataobj, dtype=np.float32)
    except Exception as exc:
        raise VolumeFormatError(f"unreadable data block in {path}: {exc}") from exc
    return data.reshape(data.shape[:3])


def read_volume(path) -> Volume:
    img = _load(path)
    data = _array(img, path)
    if not np.all(np.isfinite(data)):
        raise VolumeFormatError(f"non-finite intensities in {path}")
    affine = img.affine
    spacing = tuple(float(s) for s in np.sqrt((affine[:3, :3] ** 2).sum(axis=0)))
    orientation = "".join(nib.aff2axcodes(affine))
    meta = {}
    for ext in img.header.extensions:
        if ext.get_code() == _META_CODE:
            try:
                meta = json.loads(ext.get_content().decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError):
                pass
    if isinstance(meta, dict) and "meta" in meta and "spacing" in meta:
        # our own extension: exact spacing plus user meta
        exact = tuple(float(s) for s in meta["spacing"])
        if np.allclose(exact, spacing, rtol=1e-5):
            spacing = exact
        meta = meta["meta"]
    return Volume(data, spacing, orientation, meta)


def _atomic_save(img, path: Path):
    path = Path(path)
    suffix = "".join(path.suffixes[-2:]) if path.name.endswith(".nii.gz") else path.suffix
    fd, tmp = tempfile.mkstemp(suffix=suffix, prefix=".tmp-", dir=path.parent)
    os.close(fd)
    try:
        nib.save(img, tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_volume(v: Volume, path) -> None:
    img = nib.Nifti1Image(v.data.astype(np.float32), v.affine)
    img.header.set_xyzt_units("mm")
    # the header stores float32 spacing; the extension keeps the exact values
    blob = json.dumps({"meta": v.meta, "spacing": list(v.spacing)}, sort_keys=True).encode("utf-8")
    img.header.extensions.append(nib.nifti1.Nifti1Extension(_META_CODE, blob))
    _atomic_save(img, path)


def read_mask(path) -> np.ndarray:
    img = _load(path)
    return check_mask(np.rint(_array(img, path)), img.shape[:3])


def write_mask(mask: np.ndarray, spacing, orientation: str, path) -> None:
    mask = check_mask(mask, np.shape(mask))
    img = nib.Nifti1Image(mask, affine_from(mask.shape, spacing, orientation))
    img.header.set_data_dtype(np.uint8)
    _atomic_save(img, path)
