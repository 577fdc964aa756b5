import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from onsetlab.volume_io import ORIENTATIONS, Volume, VolumeFormatError, read_mask, read_volume, write_mask, write_volume


def test_constant_round_trip(tmp_path):
    v = Volume(np.full((8, 8, 8), 3.5), (1.0, 1.0, 1.0), "RAS")
    write_volume(v, tmp_path / "c.nii.gz")
    assert read_volume(tmp_path / "c.nii.gz") == v


def test_spacing_passthrough(tmp_path):
    v = Volume(np.zeros((4, 5, 6)), (1.0, 1.0, 6.5), "LPS")
    write_volume(v, tmp_path / "s.nii.gz")
    back = read_volume(tmp_path / "s.nii.gz")
    assert back.spacing == (1.0, 1.0, 6.5)
    assert back.orientation == "LPS"


def test_nan_rejected():
    data = np.zeros((4, 4, 4))
    data[1, 2, 3] = np.nan
    with pytest.raises(VolumeFormatError, match="non-finite intensities"):
        Volume(data)


def test_meta_preserved(tmp_path):
    v = Volume(np.ones((3, 3, 3)), meta={"sequence": "DWI", "note": [1, 2]})
    write_volume(v, tmp_path / "m.nii.gz")
    assert read_volume(tmp_path / "m.nii.gz").meta == v.meta


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_volume(tmp_path / "absent.nii.gz")


def test_4d_rejected(tmp_path):
    import nibabel as nib

    nib.save(nib.Nifti1Image(np.zeros((3, 3, 3, 2), np.float32), np.eye(4)), tmp_path / "f.nii.gz")
    with pytest.raises(VolumeFormatError, match="4D"):
        read_volume(tmp_path / "f.nii.gz")


def test_malformed_header(tmp_path):
    (tmp_path / "bad.nii.gz").write_bytes(b"not a nifti file at all")
    with pytest.raises(VolumeFormatError):
        read_volume(tmp_path / "bad.nii.gz")


@pytest.mark.skipif(os.geteuid() == 0, reason="root ignores directory permissions")
def test_read_only_destination(tmp_path):
    d = tmp_path / "ro"
    d.mkdir()
    d.chmod(0o500)
    try:
        with pytest.raises(OSError):
            write_volume(Volume(np.ones((2, 2, 2))), d / "x.nii.gz")
        assert list(d.iterdir()) == []
    finally:
        d.chmod(0o700)


def test_missing_parent_is_an_error(tmp_path):
    with pytest.raises(OSError):
        write_volume(Volume(np.ones((2, 2, 2))), tmp_path / "nope" / "x.nii.gz")
    assert not (tmp_path / "nope").exists()


def test_corner_voxel_stays_put(tmp_path):
    data = np.zeros((5, 6, 7), np.float32)
    data[0, 0, 6] = 9.0
    for orient in ("RAS", "LPI", "ASR"):
        write_volume(Volume(data, (1, 2, 3), orient), tmp_path / f"{orient}.nii.gz")
        back = read_volume(tmp_path / f"{orient}.nii.gz")
        assert back.data[0, 0, 6] == 9.0 and back.data.sum() == 9.0


def test_mask_round_trip(tmp_path):
    m = np.zeros((4, 4, 4), np.uint8)
    m[1:3, 1:3, 1:3] = 1
    write_mask(m, (1, 1, 2), "RAS", tmp_path / "m.nii.gz")
    np.testing.assert_array_equal(read_mask(tmp_path / "m.nii.gz"), m)


def test_mask_values_checked():
    with pytest.raises(VolumeFormatError):
        Volume(np.zeros((2, 2, 2)), mask=np.full((2, 2, 2), 2))


@settings(max_examples=100, deadline=None)
@given(
    shape=st.tuples(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6)),
    spacing=st.tuples(*[st.floats(0.1, 10.0, allow_nan=False)] * 3),
    orient=st.sampled_from(sorted(ORIENTATIONS)),
    seed=st.integers(0, 2**32 - 1),
)
def test_round_trip_property(tmp_path_factory, shape, spacing, orient, seed):
    data = np.random.default_rng(seed).normal(size=shape).astype(np.float32)
    v = Volume(data, spacing, orient)
    path = tmp_path_factory.mktemp("rt") / "v.nii.gz"
    write_volume(v, path)
    back = read_volume(path)
    assert back.data.dtype == np.float32
    np.testing.assert_array_equal(back.data, v.data)
    assert back.spacing == v.spacing
    assert back.orientation == orient
