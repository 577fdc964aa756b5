import json
from pathlib import Path

import numpy as np
import pytest
from scipy import ndimage

from onsetlab.dataset import flip
from onsetlab.synthgen import (
    TISSUE,
    CohortSpec,
    generate_case,
    generate_cohort,
    load_case,
    load_manifest,
    make_atlas,
)


def _find(spec, want, start=0):
    for i in range(start, spec.n_cases):
        c = generate_case(spec, i)
        if want(c):
            return c
    raise LookupError("no matching case")


def test_control_case_has_no_lesion():
    spec = CohortSpec(n_cases=40, seed=3)
    c = _find(spec, lambda c: c.lesion_side == "none")
    assert c.lesion_mask.sum() == 0
    assert c.tss_minutes is None
    # FLAIR and DWI share geometry and differ only in tissue levels: same support
    for seq in ("DWI", "FLAIR"):
        lesion = c.truth["clean"][seq]
        assert set(np.unique(lesion)) <= set(TISSUE[seq].values()) | {0.0}


def test_contrast_at_30_minutes():
    spec = CohortSpec(n_cases=40, seed=5, tss_kind="fixed", tss_value=30.0)
    # the generator's own contrast formula, in noise SDs
    assert spec.flair_lesion_contrast(30.0) / spec.noise_sd < 0.1
    assert spec.dwi_contrast / spec.noise_sd >= 3.0
    c = _find(spec, lambda c: c.lesion_side != "none")
    # pure white matter in T2 (the lesion is invisible there): no partial volume with other tissue
    pure = c.truth["clean"]["T2"] == TISSUE["T2"]["wm"]
    les = c.lesion_mask.astype(bool) & pure
    tissue = ndimage.binary_dilation(les, iterations=2) & ~c.lesion_mask.astype(bool) & pure
    sd = spec.noise_sd
    for seq, lo, hi in (("FLAIR", -0.1, 0.1), ("DWI", 3.0, np.inf)):
        clean = c.truth["clean"][seq]
        diff = (clean[les].mean() - clean[tissue].mean()) / sd
        assert lo <= diff <= hi, (seq, diff)
    # the same check on the noisy, bias-divided data, allowing for sampling error
    flair = c.sequences["FLAIR"].data / c.truth["bias"]["FLAIR"]
    se = sd * np.sqrt(1 / les.sum() + 1 / tissue.sum())
    assert abs(flair[les].mean() - flair[tissue].mean()) <= 0.1 * sd + 4 * se
    dwi = c.sequences["DWI"].data / c.truth["bias"]["DWI"]
    assert dwi[les].mean() - dwi[tissue].mean() >= 3 * sd


def test_determinism():
    spec = CohortSpec(n_cases=3, seed=9)
    a, b = generate_case(spec, 2), generate_case(spec, 2)
    for s in a.sequences:
        assert np.array_equal(a.sequences[s].data, b.sequences[s].data)
    assert np.array_equal(a.lesion_mask, b.lesion_mask)
    assert (a.lesion_side, a.tss_minutes) == (b.lesion_side, b.tss_minutes)


def test_index_out_of_range():
    with pytest.raises(IndexError):
        generate_case(CohortSpec(n_cases=2), 2)


def test_degenerate_lesion_spec():
    with pytest.raises(ValueError, match="degenerate"):
        generate_case(CohortSpec(n_cases=1, lesion_voxels=(20000, 30000)), 0)


def test_flair_contrast_monotone_in_tss():
    spec = CohortSpec()
    ts = np.linspace(0, 1440, 200)
    c = [spec.flair_lesion_contrast(t) for t in ts]
    assert np.all(np.diff(c) >= 0)
    assert c[0] == 0.0
    # mostly saturated beyond 6 h
    assert spec.flair_lesion_contrast(360.0) > 0.85 * spec.flair_contrast * spec.noise_sd


def test_same_case_larger_tss_brighter_flair():
    lo = generate_case(CohortSpec(n_cases=30, seed=2, tss_kind="fixed", tss_value=60.0), 4)
    hi = generate_case(CohortSpec(n_cases=30, seed=2, tss_kind="fixed", tss_value=600.0), 4)
    if lo.lesion_side == "none":
        pytest.skip("control draw")
    les = lo.lesion_mask.astype(bool)
    assert np.array_equal(les, hi.lesion_mask.astype(bool))
    assert hi.truth["clean"]["FLAIR"][les].mean() > lo.truth["clean"]["FLAIR"][les].mean()


def test_lesion_side_and_mirror():
    spec = CohortSpec(n_cases=30, seed=4)
    seen = set()
    for i in range(spec.n_cases):
        c = generate_case(spec, i)
        if c.lesion_side == "none":
            continue
        seen.add(c.lesion_side)
        xs = np.nonzero(c.lesion_mask)[0]
        mid = (c.lesion_mask.shape[0] - 1) / 2
        # lesion lies within the brain; RAS puts the subject's right at high x
        assert np.all(c.truth["brain_mask"][c.lesion_mask.astype(bool)])
        if c.lesion_side == "right":
            assert xs.min() > mid
            assert np.nonzero(flip(c.lesion_mask))[0].max() < mid
        else:
            assert xs.max() < mid
    assert seen == {"left", "right"}


def test_cohort_manifest(tmp_path):
    spec = CohortSpec(n_cases=10, seed=7)
    man = generate_cohort(spec, tmp_path / "a")
    assert len(man["cases"]) == 10
    loaded = load_manifest(tmp_path / "a" / "cohort.json")
    for e in loaded["cases"]:
        assert set(e["files"]) == {"dwi", "t2", "flair", "lesion"}
        for p in e["files"].values():
            assert Path(p).exists()
    m = man["marginals"]
    assert m["n_cases"] == 10 and m["n_control"] + m["n_left"] + m["n_right"] == 10
    c = load_case(loaded["cases"][0])
    assert np.array_equal(c.sequences["T2"].data, generate_case(spec, 0).sequences["T2"].data)
    generate_cohort(spec, tmp_path / "b")
    assert (tmp_path / "a" / "cohort.json").read_text() == (tmp_path / "b" / "cohort.json").read_text()


def test_fixed_tss(tmp_path):
    spec = CohortSpec(n_cases=10, seed=1, tss_kind="fixed", tss_value=120.0)
    man = generate_cohort(spec, tmp_path)
    assert all(e["tss_minutes"] == 120.0 for e in man["cases"] if e["lesion_side"] != "none")


def test_bias_within_amplitude(small_cases):
    for c in small_cases:
        b = c.truth["bias"]["T2"][c.truth["brain_mask"].astype(bool)]
        assert 0.79 <= b.min() and b.max() <= 1.21


def test_atlas_grid(small_spec, atlas):
    assert atlas.shape == small_spec.shape
    assert atlas.spacing == small_spec.spacing
    assert atlas.data.min() >= 0
