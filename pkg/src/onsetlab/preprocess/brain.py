"""Brain extraction: Otsu threshold, closing, largest component, hole filling."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from ..volume_io import Volume


def otsu_threshold(x, bins: int = 256) -> float:
    x = np.asarray(x, dtype=np.float64).ravel()
    lo, hi = x.min(), x.max()
    if hi <= lo:
        return lo - 1.0
    hist, edges = np.histogram(x, bins=bins, range=(lo, hi))
    mids = (edges[:-1] + edges[1:]) / 2
    w0 = np.cumsum(hist)
    w1 = w0[-1] - w0
    m0 = np.cumsum(hist * mids)
    mu0 = m0 / np.maximum(w0, 1)
    mu1 = (m0[-1] - m0) / np.maximum(w1, 1)
    between = w0 * w1 * (mu0 - mu1) ** 2
    return float(mids[np.argmax(between[:-1])])


def extract_brain(v: Volume, closing_iterations: int = 1) -> np.ndarray:
    """Binary brain mask (uint8): the largest connected foreground component."""
    data = v.data
    if not np.any(data > 0):
        raise ValueError("no foreground")
    fg = data > otsu_threshold(data)
    if not fg.any():
        raise ValueError("no foreground")
    struct = ndimage.generate_binary_structure(3, 1)
    if closing_iterations:
        padded = np.pad(fg, closing_iterations)
        padded = ndimage.binary_closing(padded, struct, iterations=closing_iterations)
        fg = padded[(slice(closing_iterations, -closing_iterations),) * 3]
    lab, n = ndimage.label(fg, struct)
    if n == 0:
        raise ValueError("no foreground")
    sizes = ndimage.sum_labels(fg, lab, index=np.arange(1, n + 1))
    mask = lab == (1 + int(np.argmax(sizes)))
    mask = ndimage.binary_fill_holes(mask)
    # close off holes that only open through the top or bottom slice
    for z in range(mask.shape[2]):
        mask[:, :, z] = ndimage.binary_fill_holes(mask[:, :, z])
    return mask.astype(np.uint8)
