"""Intensity normalization and histogram matching inside a brain mask."""

from __future__ import annotations

import logging
import warnings

import numpy as np
from scipy.stats import rankdata

from ..volume_io import Volume

log = logging.getLogger(__name__)


def normalize_intensity(v: Volume, mask, percentiles=(1.0, 99.0)):
    """Map the masked ``percentiles`` onto [0, 1], clip, and zero the outside.

    Returns (volume, record) where record holds the scale and shift used.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("empty mask")
    lo, hi = np.percentile(v.data[mask], percentiles)
    span = hi - lo if hi > lo else 1.0
    out = np.where(mask, np.clip((v.data - lo) / span, 0.0, 1.0), 0.0)
    record = {"shift": float(lo), "scale": float(1.0 / span), "percentiles": list(percentiles)}
    return v.with_data(out.astype(np.float32)), record


def match_histogram(v: Volume, reference: Volume, mask, reference_mask=None) -> Volume:
    """Classic CDF matching of the masked voxels of ``v`` onto ``reference``.

    Voxels are ranked (ties share their mean rank) and sent to the reference
    quantile of the same cumulative probability.  Outside the mask ``v`` is
    left as it is.
    """
    mask = np.asarray(mask, dtype=bool)
    ref_mask = mask if reference_mask is None else np.asarray(reference_mask, dtype=bool)
    if mask.shape != v.shape:
        raise ValueError("mask shape does not match volume")
    src = v.data[mask].astype(np.float64)
    ref = np.sort(reference.data[ref_mask].astype(np.float64))
    if src.size == 0 or ref.size == 0:
        raise ValueError("empty mask")
    if np.ptp(src) == 0:
        warnings.warn("constant input: histogram mapping undefined, returning input", RuntimeWarning, stacklevel=2)
        return v
    # cumulative probability at each voxel, mid-rank convention
    prob = (rankdata(src, method="average") - 0.5) / src.size
    ref_prob = (np.arange(ref.size) + 0.5) / ref.size
    matched = np.interp(prob, ref_prob, ref)
    out = v.data.copy()
    out[mask] = matched
    return v.with_data(out)
