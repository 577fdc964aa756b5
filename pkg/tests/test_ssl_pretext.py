import numpy as np
import pytest
from scipy import ndimage, stats

from onsetlab.models import ModelConfig
from onsetlab.ssl_pretext import (
    CorruptionConfig,
    CorruptionRecord,
    PretextConfig,
    apply_record,
    corrupt_array,
    corrupt_volume,
    train_restoration,
)
from onsetlab.volume_io import Volume


def _vol(seed=0, shape=(16, 20, 12)):
    rng = np.random.default_rng(seed)
    return Volume(rng.random(shape).astype(np.float32), (4.0, 4.0, 10.0), "RAS")


def test_corruption_deterministic_and_replayable():
    v = _vol()
    a, ra = corrupt_volume(v, 5)
    b, _ = corrupt_volume(v, 5)
    assert np.array_equal(a.data, b.data)
    assert np.array_equal(apply_record(v.data, ra), a.data)
    assert a.shape == v.shape and a.spacing == v.spacing
    assert 0 <= a.data.min() and a.data.max() <= 1


def test_at_least_one_transform_always():
    v = _vol()
    for seed in range(60):
        _, rec = corrupt_volume(v, seed)
        assert len(rec.steps) >= 1


def test_inpaint_is_local():
    v = _vol()
    _, rec = corrupt_volume(v, 1, CorruptionConfig(enabled=("inpaint",)))
    (step,) = rec.steps
    out = apply_record(v.data, rec)
    box = np.zeros(v.shape, bool)
    box[tuple(slice(a, a + s) for a, s in zip(step["start"], step["size"]))] = True
    assert np.array_equal(out[~box], v.data[~box]) and np.all(out[box] == 0)


def test_remap_is_monotone():
    v = _vol()
    out, rec = corrupt_volume(v, 2, CorruptionConfig(enabled=("remap",)))
    assert [s["op"] for s in rec.steps] == ["remap"]
    rho = stats.spearmanr(v.data.ravel(), out.data.ravel()).statistic
    assert rho > 0.9999


def test_flat_volume_only_remaps():
    flat = Volume(np.full((8, 8, 4), 0.3, np.float32), (1.0, 1.0, 1.0), "RAS")
    out, rec = corrupt_volume(flat, 0)
    assert all(s["op"] == "remap" for s in rec.steps)
    assert out.shape == flat.shape


def test_rejects_unnormalised():
    with pytest.raises(ValueError):
        corrupt_volume(Volume(np.full((4, 4, 4), 2.0, np.float32), (1, 1, 1), "RAS"), 0)


def test_channels_share_corruption():
    data = np.stack([_vol(0).data, _vol(1).data])
    out, rec = corrupt_array(data, 7)
    for c in range(2):
        assert np.array_equal(out[c], apply_record(data[c], rec))
    assert isinstance(rec, CorruptionRecord)


def _hemis(n=20, seed=0):
    rng = np.random.default_rng(seed)
    x = np.zeros((n, 3, 12, 16, 12), np.float32)
    yy, xx = np.meshgrid(np.arange(16), np.arange(12))
    blob = np.exp(-((xx - 6) ** 2 + (yy - 8) ** 2) / 20.0)[..., None]
    for i in range(n):
        for c in range(3):
            x[i, c] = np.clip(blob * rng.uniform(0.5, 1.0) + rng.normal(0, 0.02, (12, 16, 12)), 0, 1)
    return x, np.ones((n, 12, 16, 12), bool)


def test_restoration_improves_validation_mse():
    x, m = _hemis()
    cfg = PretextConfig(epochs=10, batch_size=4, lr=1e-2, seed=0)
    full, enc, hist = train_restoration(x, m, ModelConfig.desk("3d", widths=(4, 4, 8, 8, 8)), cfg)
    h = hist["history"]
    assert h[hist["best_epoch"]]["val_mse"] < h[0]["val_mse"]
    assert set(enc) < set(full) and all(k.startswith("encoder.") for k in enc)


@pytest.mark.slow
def test_identity_corruption_learns_identity():
    # smooth volumes, no corruption: the network only has to pass its input through
    rng = np.random.default_rng(0)
    v = ndimage.gaussian_filter(rng.random((5, 3, 8, 8, 4)), (0, 0, 1.5, 1.5, 1))
    v = (0.2 + 0.6 * (v - v.min()) / np.ptp(v)).astype(np.float32)
    cfg = PretextConfig(epochs=800, batch_size=4, lr=3e-3, final_lr=1.0, seed=0, corruption=CorruptionConfig(identity=True))
    _, _, hist = train_restoration(v, np.ones((5, 8, 8, 4), bool), ModelConfig.desk("3d", widths=(16,) * 5), cfg)
    assert min(r.get("train_mse", np.inf) for r in hist["history"]) < 1e-4
