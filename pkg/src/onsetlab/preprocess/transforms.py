"""World-space affine transforms and grid resampling."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from ..volume_io import Volume, affine_from


@dataclass(frozen=True)
class Grid:
    shape: tuple[int, int, int]
    spacing: tuple[float, float, float]
    orientation: str = "RAS"

    @classmethod
    def of(cls, v: Volume) -> "Grid":
        return cls(tuple(v.shape), tuple(v.spacing), v.orientation)

    @property
    def affine(self) -> np.ndarray:
        return affine_from(self.shape, self.spacing, self.orientation)


@dataclass
class AffineTransform:
    """Maps points of the fixed (reference) space into the moving space, in mm.

    ``p_moving = linear @ p_fixed + translation``.  This is the pull-back
    convention used for resampling: the moving image is sampled at the
    transformed location of every fixed voxel.
    """

    linear: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    fixed: Grid | None = None
    moving: Grid | None = None
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.linear = np.asarray(self.linear, dtype=float).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=float).reshape(3)
        if abs(np.linalg.det(self.linear)) <= 1e-8:
            raise ValueError("affine linear part is singular")

    @classmethod
    def identity(cls, **kw) -> "AffineTransform":
        return cls(np.eye(3), np.zeros(3), **kw)

    @classmethod
    def from_matrix(cls, m: np.ndarray, **kw) -> "AffineTransform":
        m = np.asarray(m, dtype=float)
        return cls(m[:3, :3], m[:3, 3], **kw)

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.linear
        m[:3, 3] = self.translation
        return m

    def apply(self, points) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.linear.T + self.translation

    def compose(self, other: "AffineTransform") -> "AffineTransform":
        """``self ∘ other``: apply ``other`` first, then ``self``."""
        return AffineTransform.from_matrix(self.matrix @ other.matrix, fixed=other.fixed, moving=self.moving)

    def inverse(self) -> "AffineTransform":
        return AffineTransform.from_matrix(np.linalg.inv(self.matrix), fixed=self.moving, moving=self.fixed)

    def to_dict(self) -> dict:
        return {"matrix": self.matrix.tolist(), **({"info": self.info} if self.info else {})}


def resample(v: Volume, transform: AffineTransform, grid: Grid, order: int = 1, cval: float = 0.0) -> Volume:
    """Sample ``v`` on ``grid`` through ``transform`` (fixed -> moving)."""
    data = resample_array(v.data, Grid.of(v), transform, grid, order=order, cval=cval)
    return Volume(data, grid.spacing, grid.orientation, dict(v.meta))


def resample_array(data, src: Grid, transform: AffineTransform, grid: Grid, order: int = 1, cval: float = 0.0):
    vox = np.linalg.inv(src.affine) @ transform.matrix @ grid.affine
    out = ndimage.affine_transform(
        np.asarray(data, dtype=np.float64 if order > 0 else data.dtype),
        vox[:3, :3],
        offset=vox[:3, 3],
        output_shape=tuple(grid.shape),
        order=order,
        mode="constant",
        cval=cval,
        prefilter=False,
    )
    return out.astype(np.float32) if order > 0 else out


def resample_mask(mask: np.ndarray, src: Grid, transform: AffineTransform, grid: Grid) -> np.ndarray:
    """Nearest-neighbour resampling of a binary mask."""
    return resample_array(np.asarray(mask, dtype=np.uint8), src, transform, grid, order=0).astype(np.uint8)
