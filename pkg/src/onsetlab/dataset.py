"""Hemisphere samples, task labels and frozen train/val/test splits."""

from __future__ import annotations

import hashlib
import itertools
import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
TSS_THRESHOLDS = {"tss_lt_180": 180.0, "tss_lt_270": 270.0}
MIDLINE_TOLERANCE = 0.05


@dataclass
class HemisphereSample:
    stack: np.ndarray  # (3, x, y, z): DWI, T2, FLAIR
    side: str
    flipped: bool
    labels: dict
    case_id: str
    lesion: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.side not in ("left", "right"):
            raise ValueError(f"side must be left or right, got {self.side!r}")
        if self.flipped != (self.side == "right"):
            raise ValueError("right halves are mirrored, left halves are not")
        has = self.labels.get("has_lesion")
        if has not in (0, 1):
            raise ValueError("has_lesion must be 0 or 1")
        tss_keys = [k for k in TSS_THRESHOLDS if k in self.labels]
        if has == 1 and len(tss_keys) not in (0, len(TSS_THRESHOLDS)):
            raise ValueError("lesion samples carry all TSS labels or none")
        if has == 0 and tss_keys:
            raise ValueError("TSS labels are only defined for lesion samples")
        if tss_keys and self.labels["tss_lt_180"] > self.labels["tss_lt_270"]:
            raise ValueError("tss_lt_180 implies tss_lt_270")

    @property
    def key(self) -> str:
        return f"{self.case_id}:{self.side}"


def tss_labels(tss_minutes) -> dict:
    if tss_minutes is None:
        return {}
    return {k: int(tss_minutes < t) for k, t in TSS_THRESHOLDS.items()}


def flip(stack: np.ndarray) -> np.ndarray:
    """Mirror about the sagittal plane (the x axis is the last-but-two)."""
    return np.ascontiguousarray(np.flip(stack, axis=-3))


def halves(a: np.ndarray):
    """(left, right-mirrored) halves along x; an odd middle plane is dropped."""
    nx = a.shape[-3]
    h = nx // 2
    left = a[..., :h, :, :]
    right = a[..., nx - h :, :, :]
    return np.ascontiguousarray(left), flip(right)


def split_hemispheres(pc) -> tuple[HemisphereSample, HemisphereSample]:
    """Split a PreprocessedCase into (left, right) samples.

    Grid axis 0 runs towards the subject's right (RAS), so the left hemisphere
    is the low-index half.
    """
    if pc.sequences["T2"].orientation[0] != "R":
        raise ValueError("expected RAS-like data with x towards the right")
    stack = pc.stack()
    ls, rs = halves(stack)
    ll, rl = halves(pc.lesion_mask.astype(np.uint8))
    nl, nr = int(ll.sum()), int(rl.sum())
    total = nl + nr
    lesion_side = None
    if total:
        lesion_side = "left" if nl >= nr else "right"
        minority = min(nl, nr) / total
        if minority > MIDLINE_TOLERANCE:
            warnings.warn(f"{pc.case_id}: lesion straddles the midline ({minority:.0%} on the minority side)",
                          RuntimeWarning, stacklevel=2)
        if pc.lesion_side != "none" and lesion_side != pc.lesion_side:
            log.warning("%s: mask places the lesion %s but the case says %s", pc.case_id, lesion_side, pc.lesion_side)
    source = "control" if pc.lesion_side == "none" else "contralateral"
    out = []
    for side, st, les in (("left", ls, ll), ("right", rs, rl)):
        if side == lesion_side:
            labels = {"has_lesion": 1, **tss_labels(pc.tss_minutes)}
            meta = {"source": "lesion"}
        else:
            labels = {"has_lesion": 0}
            meta = {"source": source}
        out.append(HemisphereSample(st, side, side == "right", labels, pc.case_id, les, meta))
    return out[0], out[1]


# ---------------------------------------------------------------- splits


def apportion(n: int, ratios) -> list[int]:
    """Largest-remainder rounding of ``n * ratios`` (ties go to the earlier split)."""
    r = np.asarray(ratios, dtype=float)
    if np.any(r < 0) or not np.isclose(r.sum(), 1.0):
        raise ValueError(f"ratios must be nonnegative and sum to 1, got {ratios}")
    exact = n * r
    sizes = np.floor(exact).astype(int)
    order = np.argsort(-(exact - sizes), kind="stable")
    for i in order[: n - sizes.sum()]:
        sizes[i] += 1
    return sizes.tolist()


def manifest_checksum(manifest) -> str:
    rows = sorted((e["case_id"], e["lesion_side"], e["tss_minutes"]) for e in manifest["cases"])
    return hashlib.sha256(json.dumps(rows).encode()).hexdigest()[:16]


def _stratum(entry) -> str:
    if entry["lesion_side"] == "none" or entry["tss_minutes"] is None:
        return "control"
    return "lt270" if entry["tss_minutes"] < 270.0 else "ge270"


def make_splits(manifest, ratios=(0.64, 0.16, 0.20), seed: int = 0, path=None, force: bool = False) -> dict:
    """Case-level split, stratified by the 4.5 h label (controls are their own stratum).

    Totals follow ``apportion(n, ratios)``; each stratum is spread over the
    splits in proportion, with the leftover seats handed out so the totals
    stay exact.  With ``path`` the result is written there and an existing
    file is never overwritten unless ``force``.
    """
    if path is not None and Path(path).exists() and not force:
        raise FileExistsError(f"{path} already exists; splits are frozen (pass force to regenerate)")
    entries = manifest["cases"]
    if not entries:
        raise ValueError("empty manifest")
    ids = [e["case_id"] for e in entries]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate case ids in manifest")
    totals = apportion(len(entries), ratios)
    rng = np.random.default_rng(seed)

    strata: dict[str, list[str]] = {}
    for e in sorted(entries, key=lambda e: e["case_id"]):
        strata.setdefault(_stratum(e), []).append(e["case_id"])
    names = sorted(strata)
    # controlled rounding: every cell is the floor or ceiling of its share and
    # row and column sums are exact; at most 9 cells, so search the increments
    exact = np.array([[len(strata[s]) * totals[j] / len(entries) for j in range(3)] for s in names])
    alloc = np.floor(exact + 1e-9).astype(int)
    rem = np.where(exact - alloc > 1e-9, exact - alloc, 0.0)
    need_row = np.array([len(strata[s]) for s in names]) - alloc.sum(axis=1)
    need_col = np.array(totals) - alloc.sum(axis=0)
    free = [(i, j) for i in range(len(names)) for j in range(3) if rem[i, j] > 0]
    best, best_score = None, -1.0
    for pick in itertools.product((0, 1), repeat=len(free)):
        inc = np.zeros_like(alloc)
        for (i, j), b in zip(free, pick):
            inc[i, j] = b
        if np.array_equal(inc.sum(axis=1), need_row) and np.array_equal(inc.sum(axis=0), need_col):
            score = float((inc * rem).sum())
            if score > best_score + 1e-12:
                best, best_score = inc, score
    if best is None:
        raise RuntimeError("no controlled rounding found for the split table")
    alloc = alloc + best

    assignment = {}
    for i, s in enumerate(names):
        members = list(strata[s])
        rng.shuffle(members)
        start = 0
        for j, split in enumerate(SPLITS):
            for cid in members[start : start + alloc[i, j]]:
                assignment[cid] = split
            start += alloc[i, j]
    assignment = dict(sorted(assignment.items()))
    result = {
        "assignment": assignment,
        "seed": int(seed),
        "ratios": [float(r) for r in ratios],
        "sizes": {s: sum(v == s for v in assignment.values()) for s in SPLITS},
        "manifest_checksum": manifest_checksum(manifest),
    }
    if path is not None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            json.dump(result, fh, indent=2, sort_keys=True)
    return result


def load_splits(path, manifest=None) -> dict:
    with open(path) as fh:
        splits = json.load(fh)
    if manifest is not None:
        check_splits(splits, manifest)
    return splits


def check_splits(splits, manifest):
    """Leakage guard: the frozen assignment must belong to this cohort."""
    if splits["manifest_checksum"] != manifest_checksum(manifest):
        raise ValueError("splits were made for a different cohort (manifest checksum mismatch)")
    ids = {e["case_id"] for e in manifest["cases"]}
    if set(splits["assignment"]) != ids:
        raise ValueError("splits do not cover exactly the cohort's cases")


def split_ids(splits, which: str) -> list[str]:
    return sorted(k for k, v in splits["assignment"].items() if v == which)


# ---------------------------------------------------------------- pools


def build_samples(cases) -> list[HemisphereSample]:
    out = []
    for pc in cases:
        out.extend(split_hemispheres(pc))
    return out


def phase_pool(samples, splits, which: str, label_key: str) -> list[HemisphereSample]:
    """Samples of one split carrying ``label_key``.

    Detection uses every hemisphere; the TSS tasks only see lesion halves.
    """
    members = set(split_ids(splits, which))
    pool = [s for s in samples if s.case_id in members]
    if label_key != "has_lesion":
        pool = [s for s in pool if s.labels["has_lesion"] == 1]
    missing = [s.key for s in pool if label_key not in s.labels]
    if missing:
        raise KeyError(f"label {label_key!r} missing for {missing[:3]}")
    return sorted(pool, key=lambda s: s.key)


def as_arrays(samples, label_key: str):
    x = np.stack([s.stack for s in samples]).astype(np.float32)
    y = np.array([s.labels[label_key] for s in samples], dtype=np.float32)
    return x, y
