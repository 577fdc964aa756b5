import json
import shutil

import numpy as np
import pytest
from scipy import ndimage, stats

from onsetlab.preprocess import (
    AffineTransform,
    Grid,
    PipelineError,
    STAGES,
    correct_bias,
    extract_brain,
    match_histogram,
    ncc,
    normalize_intensity,
    preprocess_cases,
    preprocess_cohort,
    register_affine,
    reorient,
    resample,
    run_pipeline,
)
from onsetlab.synthgen import SEQUENCES, CohortSpec, generate_case, generate_cohort, make_atlas
from onsetlab.volume_io import Volume


def _dice(a, b):
    a, b = a.astype(bool), b.astype(bool)
    return 2 * (a & b).sum() / (a.sum() + b.sum())


# ---------------------------------------------------------------- bias


def test_bias_recovers_known_field(small_cases):
    for c in small_cases[:4]:
        brain = c.truth["brain_mask"].astype(bool)
        for s in SEQUENCES:
            _, field = correct_bias(c.sequences[s])
            r = np.corrcoef(field.data[brain], c.truth["bias"][s][brain])[0, 1]
            assert r >= 0.95, (c.case_id, s, r)


def test_bias_field_positive_and_gauged(small_cases):
    corrected, field = correct_bias(small_cases[0].sequences["T2"])
    assert field.data.min() > 0
    assert corrected.shape == field.shape
    fg = small_cases[0].truth["brain_mask"].astype(bool)
    assert abs(field.data[fg].mean() - 1.0) < 0.05


def test_bias_identity_on_constant():
    v = Volume(np.full((16, 16, 8), 2.0))
    out, field = correct_bias(v)
    rms = np.sqrt(np.mean((out.data - v.data) ** 2)) / 2.0
    assert rms < 0.01


def test_bias_shift_recorded():
    data = np.full((12, 12, 6), 1.0)
    data[0, 0, 0] = -0.5
    out, _ = correct_bias(Volume(data))
    assert out.meta["bias_shift"] == pytest.approx(0.5)


def test_bias_all_zero():
    with pytest.raises(ValueError):
        correct_bias(Volume(np.zeros((4, 4, 4))))


# ---------------------------------------------------------------- brain


def test_extract_brain_dice(small_cases):
    for c in small_cases[:4]:
        v, _ = correct_bias(c.sequences["T2"])
        m = extract_brain(v)
        assert _dice(m, c.truth["brain_mask"]) >= 0.95
        assert ndimage.label(m)[1] == 1


def test_extract_brain_empty():
    with pytest.raises(ValueError, match="no foreground"):
        extract_brain(Volume(np.zeros((8, 8, 8))))


def test_extract_brain_idempotent(small_cases):
    v, _ = correct_bias(small_cases[1].sequences["T2"])
    m = extract_brain(v)
    again = extract_brain(v.with_data(v.data * m))
    assert np.array_equal(m, again)


# ---------------------------------------------------------------- registration


def test_register_translation(atlas):
    moving = atlas.with_data(ndimage.shift(atlas.data, (4, -3, 2), order=1))
    t, out = register_affine(moving, atlas, mode="rigid")
    vox = t.translation / np.array(atlas.spacing)
    assert np.all(np.abs(vox - np.array([4, -3, 2])) <= 1.0), vox
    assert t.info["ncc"] >= t.info["ncc_identity"]
    assert out.shape == atlas.shape


def test_register_identity(atlas):
    t, _ = register_affine(atlas, atlas, mode="rigid")
    assert np.abs(t.linear - np.eye(3)).max() < 0.01
    assert np.linalg.norm(t.translation / np.array(atlas.spacing)) < 0.5


def test_register_rotation(atlas):
    from onsetlab.synthgen import rotation_matrix

    rot = AffineTransform(rotation_matrix((0, 0, 10)), np.zeros(3))
    moving = resample(atlas, rot.inverse(), Grid.of(atlas))
    t, _ = register_affine(moving, atlas, mode="rigid")
    angle = np.degrees(np.arctan2(t.linear[1, 0], t.linear[0, 0]))
    assert abs(angle - 10.0) <= 2.0, angle


def test_register_disjoint_fov():
    a = np.zeros((20, 20, 10))
    a[2:6, 2:6, 2:6] = 1
    fixed = Volume(a)
    moving = Volume(a, orientation="RAS")
    moving = Volume(np.zeros((20, 20, 10)) + 0.0)
    from onsetlab.preprocess import RegistrationError

    with pytest.raises(RegistrationError):
        register_affine(moving, fixed)


def test_register_orientation_mismatch(atlas):
    from onsetlab.preprocess import RegistrationError

    with pytest.raises(RegistrationError):
        register_affine(reorient(atlas, "LPS"), atlas)


def test_transform_algebra():
    a = AffineTransform(np.diag([1.1, 0.9, 1.0]), [1, 2, 3])
    b = AffineTransform(np.eye(3), [-2, 0, 5])
    p = np.random.default_rng(0).normal(size=(5, 3))
    np.testing.assert_allclose(a.compose(b).apply(p), a.apply(b.apply(p)))
    np.testing.assert_allclose(a.inverse().apply(a.apply(p)), p, atol=1e-12)
    with pytest.raises(ValueError):
        AffineTransform(np.zeros((3, 3)))


def test_resample_composition(atlas):
    from onsetlab.synthgen import rotation_matrix

    a = AffineTransform(rotation_matrix((0, 0, 4)), [3.0, -2.0, 1.0])
    b = AffineTransform(rotation_matrix((1, 0, -3)), [-1.0, 2.5, 0.0])
    g = Grid.of(atlas)
    twice = resample(resample(atlas, a, g), b, g)
    once = resample(atlas, a.compose(b), g)
    inside = ndimage.binary_erosion(atlas.data > 0, iterations=2)
    rms = np.sqrt(np.mean((twice.data - once.data)[inside] ** 2)) / np.ptp(atlas.data)
    assert rms < 0.03


# ---------------------------------------------------------------- intensity


def test_normalize_maps_to_unit_interval(small_cases):
    v = small_cases[0].sequences["T2"]
    mask = small_cases[0].truth["brain_mask"]
    out, rec = normalize_intensity(v, mask)
    inside = out.data[mask.astype(bool)]
    assert inside.min() == 0.0 and inside.max() == 1.0
    assert np.all(out.data[~mask.astype(bool)] == 0)
    assert set(rec) >= {"shift", "scale"}


def test_match_identity(rng):
    v = Volume(rng.random((10, 10, 10)))
    mask = np.ones(v.shape, bool)
    out = match_histogram(v, v, mask)
    assert np.abs(out.data - v.data).max() <= 1.0 / 256


def test_match_uniform_scaling(rng):
    # exact uniform quantiles on both sides make the CDF map analytic
    n = 8000
    v = Volume(rng.permutation(np.linspace(0, 1, n)).reshape(20, 20, 20))
    ref = Volume(rng.permutation(np.linspace(0, 2, n)).reshape(20, 20, 20))
    out = match_histogram(v, ref, np.ones(v.shape, bool))
    np.testing.assert_allclose(out.data, 2.0 * v.data, atol=1e-3)


def test_match_outside_untouched(rng):
    v = Volume(rng.random((10, 10, 10)))
    mask = np.zeros(v.shape, bool)
    mask[2:8, 2:8, 2:8] = True
    out = match_histogram(v, Volume(rng.random((10, 10, 10)) ** 3), mask)
    assert np.array_equal(out.data[~mask], v.data[~mask])


def test_match_constant_input_warns():
    v = Volume(np.ones((5, 5, 5)))
    with pytest.warns(RuntimeWarning):
        out = match_histogram(v, Volume(np.random.default_rng(1).random((5, 5, 5))), np.ones((5, 5, 5), bool))
    assert out is v


def test_match_gamma_pair_ks(small_cases):
    c = small_cases[2]
    mask = c.truth["brain_mask"].astype(bool)
    base, _ = normalize_intensity(c.sequences["T2"], mask)
    src = base.with_data(base.data**0.6)
    ref = base.with_data(base.data**1.8)
    out = match_histogram(src, ref, mask)
    ks = stats.ks_2samp(out.data[mask], ref.data[mask]).statistic
    assert ks <= 0.02


# ---------------------------------------------------------------- pipeline


def test_reorient_round_trip(atlas):
    lps = reorient(atlas, "LPS")
    assert lps.orientation == "LPS"
    back = reorient(lps, "RAS")
    assert np.array_equal(back.data, atlas.data) and back.spacing == atlas.spacing


def test_pipeline_near_identity():
    spec = CohortSpec(n_cases=20, seed=8, bias_amplitude=0.0, scale_jitter=0.0, max_rotation_deg=0.0,
                      max_shift_mm=(0.0, 0.0, 0.0), coreg_rotation_deg=0.0, coreg_shift_mm=0.0)
    atlas = make_atlas(spec)
    case = generate_case(spec, 0)
    pc = run_pipeline(case, atlas)
    brain = pc.brain_mask.astype(bool)
    for s in SEQUENCES:
        ref, _ = normalize_intensity(case.sequences[s], brain)
        rms = np.sqrt(np.mean((pc.sequences[s].data - ref.data)[brain] ** 2))
        assert rms < 0.02, (s, rms)


def test_pipeline_outputs(preprocessed, small_cases, atlas):
    for pc, c in zip(preprocessed, small_cases):
        shapes = {pc.sequences[s].shape for s in SEQUENCES}
        assert shapes == {atlas.shape}
        brain = pc.brain_mask.astype(bool)
        for s in SEQUENCES:
            d = pc.sequences[s].data
            assert d.min() >= 0 and d.max() <= 1
            assert np.all(d[~brain] == 0)
        assert [st["stage"] for st in pc.provenance["stages"]][:3] == ["bias", "reorient", "extract"]
        if c.lesion_side == "none":
            assert pc.lesion_mask.sum() == 0
            continue
        # nearest-neighbour resampling can leave pieces joined only at edges or corners
        lab, n = ndimage.label(pc.lesion_mask, structure=np.ones((3, 3, 3)))
        assert n == 1
        xs = np.nonzero(pc.lesion_mask)[0]
        mid = (atlas.shape[0] - 1) / 2
        assert (xs > mid).all() if c.lesion_side == "right" else (xs < mid).all()
        # nearest-neighbour resampling of a one- or two-slice lesion across 10 mm slices
        assert 0.6 < pc.lesion_mask.sum() / c.lesion_mask.sum() < 1.4


def test_stage_codes():
    e = PipelineError("coreg", "boom")
    assert e.code == "E_COREG" and "coreg" in STAGES


def test_corrupt_file_isolated(tmp_path):
    spec = CohortSpec(n_cases=3, seed=21)
    generate_cohort(spec, tmp_path / "c")
    man = json.loads((tmp_path / "c" / "cohort.json").read_text())
    bad = man["cases"][1]
    (tmp_path / "c" / bad["files"]["flair"]).write_bytes(b"garbage")
    res = preprocess_cohort(tmp_path / "c" / "cohort.json", make_atlas(spec), tmp_path / "p")
    assert res["n_ok"] == 2 and res["n_failed"] == 1
    f = res["failures"][0]
    assert f["case_id"] == bad["case_id"] and f["code"] == "E_LOAD"
    assert (tmp_path / "p" / "preprocessed.json").exists()


def test_cache_round_trip(tmp_path, monkeypatch, small_cases, atlas):
    monkeypatch.setenv("ONSETLAB_CACHE", str(tmp_path / "cache"))
    a, _, _ = preprocess_cases(small_cases[:2], atlas)
    assert len(list((tmp_path / "cache").glob("*.npz"))) == 2
    b, _, _ = preprocess_cases(small_cases[:2], atlas)
    for x, y in zip(a, b):
        for s in SEQUENCES:
            assert np.array_equal(x.sequences[s].data, y.sequences[s].data)
        assert np.array_equal(x.lesion_mask, y.lesion_mask)
