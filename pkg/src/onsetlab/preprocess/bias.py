"""Smooth multiplicative bias-field estimation.

A simplified N4-style correction done as a log-domain polynomial fit.  In the
log domain the image is a piecewise-constant tissue term plus a smooth field.

1. An initial field comes from robustly fitting the polynomial's gradient to
   neighbour log-differences; tissue edges are outliers there and get
   rejected.
2. The corrected, smoothed image is then clustered into intensity classes and
   cut into connected regions.  Each region gets a free offset and the
   polynomial is refit against region-demeaned log intensities.  Keep the
   class count small: with many classes the bins start following the field.

Log-noise variance scales as 1/intensity**2, so every fit is weighted by the
squared local intensity; dark voxels would otherwise dominate.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from ..volume_io import Volume
from .brain import otsu_threshold

SMOOTH_SIGMA = (1.0, 1.0, 0.0)
IN_PLANE = np.ones((3, 3, 1), dtype=bool)


def _design(shape, degree, coords=None):
    axes = [np.linspace(-1.0, 1.0, n) for n in shape]
    if coords is None:
        u = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    else:
        u = np.stack([axes[i][coords[:, i]] for i in range(3)], axis=-1)
    cols = []
    for i in range(degree + 1):
        for j in range(degree + 1 - i):
            for k in range(degree + 1 - i - j):
                cols.append(u[:, 0] ** i * u[:, 1] ** j * u[:, 2] ** k)
    return np.stack(cols, axis=1)


def _kmeans_1d(x, k, iters=20):
    centres = np.quantile(x, (np.arange(k) + 0.5) / k)
    for _ in range(iters):
        lab = np.abs(x[:, None] - centres[None, :]).argmin(axis=1)
        new = np.array([x[lab == j].mean() if np.any(lab == j) else centres[j] for j in range(k)])
        if np.allclose(new, centres):
            break
        centres = new
    return lab, centres


def _masked_smooth(x, mask, sigma=SMOOTH_SIGMA):
    num = ndimage.gaussian_filter(np.where(mask, x, 0.0), sigma)
    den = ndimage.gaussian_filter(mask.astype(np.float64), sigma)
    return num / np.maximum(den, 1e-3)


def _lstsq(A, y, w):
    sw = np.sqrt(w)
    coef, *_ = np.linalg.lstsq(A * sw[:, None], y * sw, rcond=None)
    return coef


def _tukey_fit(A, y, prior, n_iter=6):
    """Weighted least squares with Tukey biweight on prior-standardised residuals."""
    w = prior.copy()
    coef = np.zeros(A.shape[1])
    for _ in range(n_iter):
        if w.sum() <= 0:
            break
        coef = _lstsq(A, y, w)
        r = (y - A @ coef) * np.sqrt(prior)
        scale = 1.4826 * np.median(np.abs(r)) + 1e-9
        u = r / (4.685 * scale)
        w = prior * np.where(np.abs(u) < 1, (1 - u**2) ** 2, 0.0)
    return coef


def _gradient_fit(logv, fg, F, prior):
    # L1 first (convex, so edges cannot pull it into a bad basin), then biweight
    inner = ndimage.binary_erosion(fg)
    rows, ys, ws = [], [], []
    for ax in range(3):
        a = [slice(None)] * 3
        b = [slice(None)] * 3
        a[ax], b[ax] = slice(0, -1), slice(1, None)
        a, b = tuple(a), tuple(b)
        ok = inner[a] & inner[b]
        rows.append((F[b] - F[a])[ok])
        ys.append((logv[b] - logv[a])[ok])
        ws.append((1.0 / (1.0 / prior[a] + 1.0 / prior[b]))[ok])
    D, y, pw = np.concatenate(rows), np.concatenate(ys), np.concatenate(ws)
    if len(y) < 2 * D.shape[1]:
        return np.zeros(D.shape[1])
    w = pw.copy()
    for _ in range(20):
        coef = _lstsq(D, y, w)
        w = pw / np.maximum(np.abs(y - D @ coef) * np.sqrt(pw), 1e-4)
    return _tukey_fit(D, y, pw)


def _region_fit(logv, fg, F, prior, logf, n_classes, min_region):
    sm = _masked_smooth(logv - logf, fg)
    lab, _ = _kmeans_1d(sm[fg], n_classes)
    classes = np.zeros(fg.shape, dtype=int)
    classes[fg] = lab + 1
    regions = np.zeros(fg.shape, dtype=int)
    n = 0
    for j in range(1, n_classes + 1):
        # drop class borders, where smoothing mixes tissues
        m = ndimage.binary_erosion(classes == j, structure=IN_PLANE)
        r, nr = ndimage.label(m)
        regions[m] = r[m] + n
        n += nr
    idx = regions[regions > 0]
    if idx.size == 0:
        return None
    keep = np.bincount(idx)[idx] >= min_region
    sel = tuple(np.argwhere(regions > 0)[keep].T)
    idx = idx[keep]
    if idx.size < 2 * F.shape[-1]:
        return None
    y, A, p = logv[sel], F[sel], prior[sel]
    tot = np.maximum(np.bincount(idx, p), 1e-12)
    y = y - (np.bincount(idx, y * p) / tot)[idx]
    means = np.stack([np.bincount(idx, A[:, c] * p) for c in range(A.shape[1])], axis=1) / tot[:, None]
    return _tukey_fit(A - means[idx], y, p)


def correct_bias(v: Volume, degree: int = 2, n_classes: int = 4, n_iter: int = 5, min_region: int = 20):
    """Return (corrected volume, bias field); the field averages 1 over the foreground."""
    data = v.data.astype(np.float64)
    if not np.any(data):
        raise ValueError("cannot correct bias of an all-zero volume")
    meta = {}
    shift = 0.0
    if data.min() < 0:
        shift = float(-data.min())
        meta["bias_shift"] = shift
    work = data + shift

    fg = work > otsu_threshold(work)
    if fg.sum() < 10:
        fg = work > 0
    full = _design(v.shape, degree)[:, 1:]
    F = full.reshape(*v.shape, -1)
    floor = 1e-3 * work.max()
    logv = np.log(np.maximum(work, floor))
    prior = np.maximum(_masked_smooth(work, fg), floor) ** 2
    prior /= prior[fg].mean()

    coef = _gradient_fit(logv, fg, F, prior)
    if np.ptp(work[fg]) > 0:
        for _ in range(n_iter):
            new = _region_fit(logv, fg, F, prior, (full @ coef).reshape(v.shape), n_classes, min_region)
            if new is None:
                break
            coef = new

    field = np.exp(full @ coef).reshape(v.shape)
    field /= field[fg].mean()
    out = data / field
    return v.with_data(out.astype(np.float32), **meta), Volume(field.astype(np.float32), v.spacing, v.orientation)
