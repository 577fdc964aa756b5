"""Rigid/affine registration by normalized cross-correlation.

Three-level coarse-to-fine pyramid, Powell search at each level, initialised
by aligning intensity centroids.  Parameters are expressed about the grid
centre (the world origin for our centred grids).
"""

from __future__ import annotations

import logging
import warnings

import numpy as np
from scipy import ndimage, optimize

from ..volume_io import Volume
from .transforms import AffineTransform, Grid, resample, resample_array

log = logging.getLogger(__name__)

PYRAMID = (4, 2, 1)
MIN_LEVEL_SIZE = 4


# optimum worse than identity by less than this is round-off, not divergence
DIVERGENCE_TOL = 1e-2


class RegistrationError(RuntimeError):
    pass


def ncc(a: np.ndarray, b: np.ndarray) -> float:
    """Pearson correlation of two equally shaped arrays (0 for flat input)."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    a = a - a.mean()
    b = b - b.mean()
    den = np.sqrt((a * a).sum() * (b * b).sum())
    return float((a * b).sum() / den) if den > 0 else 0.0


def _rot(deg):
    ax, ay, az = np.deg2rad(deg)
    cx, sx, cy, sy, cz, sz = np.cos(ax), np.sin(ax), np.cos(ay), np.sin(ay), np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


def params_to_transform(p, mode: str) -> AffineTransform:
    p = np.asarray(p, dtype=float)
    linear = _rot(p[:3])
    if mode == "affine":
        shear = np.eye(3)
        shear[0, 1], shear[0, 2], shear[1, 2] = p[9:12]
        linear = linear @ np.diag(np.exp(p[6:9])) @ shear
    return AffineTransform(linear, p[3:6])


def _downsample(v: Volume, factor: int) -> tuple[np.ndarray, Grid]:
    """Block-average by the largest per-axis factor <= ``factor`` that divides the axis."""
    facs = []
    for n in v.shape:
        f = factor
        while f > 1 and (n % f or n // f < MIN_LEVEL_SIZE):
            f //= 2
        facs.append(max(f, 1))
    shape = tuple(n // f for n, f in zip(v.shape, facs))
    data = v.data.reshape(shape[0], facs[0], shape[1], facs[1], shape[2], facs[2]).mean(axis=(1, 3, 5))
    spacing = tuple(s * f for s, f in zip(v.spacing, facs))
    return data, Grid(shape, spacing, v.orientation)


def _centroid(v: Volume) -> np.ndarray:
    w = np.clip(v.data, 0, None).astype(np.float64)
    if w.sum() == 0:
        return np.zeros(3)
    idx = np.indices(v.shape).reshape(3, -1)
    c = (idx * w.ravel()).sum(axis=1) / w.sum()
    return (v.affine @ np.append(c, 1.0))[:3]


class _Objective:
    """NCC between fixed and warped moving, over a sample of fixed voxels.

    The sample is the fixed foreground dilated by two voxels (all voxels if
    the foreground is tiny), which is where the similarity carries signal.
    """

    def __init__(self, fixed: np.ndarray, fgrid: Grid, moving: np.ndarray, mgrid: Grid):
        fg = fixed > 0.05 * max(float(np.abs(fixed).max()), 1e-12)
        fg = ndimage.binary_dilation(fg, iterations=2)
        if fg.mean() < 0.05:
            fg[:] = True
        idx = np.argwhere(fg).astype(np.float64)
        self.points = idx @ fgrid.affine[:3, :3].T + fgrid.affine[:3, 3]
        self.values = fixed[fg].astype(np.float64)
        self.n_total = fg.size
        self.moving = np.asarray(moving, dtype=np.float64)
        self.world_to_moving = np.linalg.inv(mgrid.affine)

    def __call__(self, p, mode, min_overlap=0.0) -> float:
        t = params_to_transform(p, mode)
        m = self.world_to_moving @ t.matrix
        coords = self.points @ m[:3, :3].T + m[:3, 3]
        warped = ndimage.map_coordinates(self.moving, coords.T, order=1, mode="constant", cval=np.nan, prefilter=False)
        ok = np.isfinite(warped)
        if ok.sum() < 2 or ok.sum() < min_overlap * len(ok):
            return 0.0
        return ncc(warped[ok], self.values[ok])


def _pyramid(p, mode, moving, fixed, factors, max_iter, n_free=None):
    # only the first n_free parameters are searched; the rest stay fixed
    n_free = len(p) if n_free is None else n_free
    p = np.asarray(p, dtype=float)
    for factor in factors:
        fdata, fg = _downsample(fixed, factor)
        mdata, mg = _downsample(moving, factor)
        objective = _Objective(fdata, fg, mdata, mg)
        # one unit of search = one degree, one voxel, 1% scale, 0.01 shear
        scale = np.concatenate([np.ones(3), np.asarray(fg.spacing)])
        if mode == "affine":
            scale = np.concatenate([scale, np.full(6, 0.01)])

        fixed_tail = p[n_free:]

        def cost(u):
            return -objective(np.concatenate([u * scale[:n_free], fixed_tail]), mode, 0.1)

        # the finest level only polishes
        xtol = 5e-2 if factor == 1 else 1e-2
        res = optimize.minimize(cost, p[:n_free] / scale[:n_free], method="Powell",
                                options={"xtol": xtol, "ftol": 1e-6, "maxfev": max_iter})
        p = np.concatenate([res.x * scale[:n_free], fixed_tail])
    return p


def _similarity(p, mode, moving: Volume, fixed: Volume, min_overlap=0.0) -> float:
    """NCC over every fixed voxel that the warped moving image covers."""
    t = params_to_transform(p, mode)
    warped = resample_array(moving.data, Grid.of(moving), t, Grid.of(fixed), order=1, cval=np.nan)
    ok = np.isfinite(warped)
    if ok.sum() < 2 or ok.mean() < min_overlap:
        return 0.0
    return ncc(warped[ok], fixed.data[ok])


def register_affine(moving: Volume, fixed: Volume, mode: str = "rigid", max_iter: int = 3000, shear: bool = True):
    """Align ``moving`` onto ``fixed``; returns (transform, moving resampled on fixed's grid).

    ``shear=False`` restricts the affine search to rotation, translation and
    per-axis scale; with thick slices the shear terms are poorly constrained.

    The returned transform maps fixed-space points to moving space.  If the
    optimum found is worse than identity the identity is returned and
    ``transform.info["warning"]`` is set.
    """
    if mode not in ("rigid", "affine"):
        raise ValueError(f"mode must be 'rigid' or 'affine', got {mode!r}")
    if moving.orientation != fixed.orientation:
        raise RegistrationError("reorient volumes to a common orientation before registration")
    fgrid, mgrid = Grid.of(fixed), Grid.of(moving)

    ident = np.zeros(6)
    id_score = _similarity(ident, "rigid", moving, fixed)
    init = ident.copy()
    init[3:6] = _centroid(moving) - _centroid(fixed)
    if _similarity(init, "rigid", moving, fixed, 0.1) == 0.0:
        init[3:6] = 0.0
        if _similarity(init, "rigid", moving, fixed, 0.1) == 0.0:
            raise RegistrationError("fields of view do not overlap")

    p = _pyramid(init[:6], "rigid", moving, fixed, PYRAMID, max_iter)
    if mode == "affine":
        # refine from the rigid optimum; a cold affine search trades rotation for shear
        p = _pyramid(np.concatenate([p, np.zeros(6)]), "affine", moving, fixed, PYRAMID[1:], max_iter, 12 if shear else 9)

    final = params_to_transform(p, mode)
    score = _similarity(p, mode, moving, fixed)
    info = {"mode": mode, "shear": bool(shear) if mode == "affine" else False, "ncc": score, "ncc_identity": id_score, "params": p.tolist()}
    if not np.isfinite(score) or score < id_score:
        if not np.isfinite(score) or id_score - score > DIVERGENCE_TOL:
            warnings.warn("registration diverged; returning identity", RuntimeWarning, stacklevel=2)
            log.warning("registration diverged (ncc %.4f < identity %.4f)", score, id_score)
            info["warning"] = "diverged"
        final = AffineTransform.identity()
        info["ncc"] = id_score
    final = AffineTransform(final.linear, final.translation, fgrid, mgrid, info)
    return final, resample(moving, final, fgrid)
