import csv

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from onsetlab.explain import (
    Saliency,
    argmax_in_mask,
    explain_samples,
    grad_cam,
    overlap_score,
    render_overlays,
    write_overlap_csv,
)
from onsetlab.models import Model2D, Model3D, ModelConfig


class OneChannel(torch.nn.Module):
    """Score = scale * mean of one channel of a same-size conv map."""

    def __init__(self, channel=1, scale=1.0):
        super().__init__()
        torch.manual_seed(0)
        self.conv = torch.nn.Conv3d(3, 4, 3, padding=1)
        self.channel, self.scale = channel, scale

    def forward(self, x):
        f = self.conv(x)
        return {"logit": self.scale * f[:, self.channel].mean(dim=(1, 2, 3))}


def _x(shape=(6, 8, 4), seed=0):
    return np.random.default_rng(seed).standard_normal((3, *shape)).astype(np.float32)


# ---------------------------------------------------------------- grad_cam


def test_single_channel_score_gives_that_channel():
    m = OneChannel(channel=1)
    x = _x()
    sal = grad_cam(m, x, "conv")
    with torch.no_grad():
        act = m.conv(torch.from_numpy(x)[None])[0, 1].clamp_min(0).numpy()
    assert sal.heatmap.shape == x.shape[1:]
    np.testing.assert_allclose(sal.heatmap, act / act.max(), atol=1e-5)
    assert sal.heatmap.min() >= 0 and sal.heatmap.max() == pytest.approx(1.0)


@pytest.mark.parametrize("scale", [1e-3, 1.0, 250.0])
def test_positive_rescale_invariance(scale):
    x = _x(seed=3)
    a = grad_cam(OneChannel(0), x, "conv").heatmap
    b = grad_cam(OneChannel(0, scale), x, "conv").heatmap
    np.testing.assert_allclose(a, b, atol=1e-5)


def test_negative_target_flips_sign():
    # for the opposite class the channel weight is negative, so the positive part vanishes
    # wherever the channel is positive
    m = OneChannel(2)
    x = _x(seed=1)
    sal = grad_cam(m, x, "conv", target=0)
    with torch.no_grad():
        act = m.conv(torch.from_numpy(x)[None])[0, 2].numpy()
    assert np.all(sal.heatmap[act > 1e-6] == 0)


def test_zero_head_gives_zero_map_without_nan():
    m = Model2D(ModelConfig.desk("2d")).eval()
    torch.nn.init.zeros_(m.head.weight)
    torch.nn.init.zeros_(m.head.bias)
    x = np.random.default_rng(0).random((3, 24, 56, 12)).astype(np.float32)
    sal = grad_cam(m, x, "layer3")
    assert np.all(sal.heatmap == 0) and np.all(np.isfinite(sal.heatmap))
    assert sal.normalization["max"] == 0.0


@pytest.mark.parametrize("kind,layer", [("2d", "layer3"), ("2d", "layer4"), ("3d", "encoder.stages.3")])
def test_model_maps_cover_input_grid(kind, layer):
    torch.manual_seed(0)
    m = (Model2D if kind == "2d" else Model3D)(ModelConfig.desk(kind))
    names = dict(m.named_modules())
    if layer not in names:
        pytest.skip(f"{layer} not present in this model")
    x = np.random.default_rng(0).random((3, 24, 56, 12)).astype(np.float32)
    sal = grad_cam(m, x, layer)
    assert sal.heatmap.shape == (24, 56, 12)
    assert 0 <= sal.heatmap.min() and sal.heatmap.max() <= 1
    assert m.training  # mode restored


def test_layer_errors():
    m = Model2D(ModelConfig.desk("2d"))
    x = np.zeros((3, 24, 56, 12), np.float32)
    with pytest.raises(KeyError):
        grad_cam(m, x, "no_such_layer")
    with pytest.raises(ValueError, match="spatial"):
        grad_cam(m, x, "head")
    with pytest.raises(ValueError, match="one sample"):
        grad_cam(m, np.zeros((2, 3, 24, 56, 12), np.float32), "layer3")


# ---------------------------------------------------------------- overlap


def _mask(shape=(6, 6, 4)):
    m = np.zeros(shape, bool)
    m[1:5, 1:3, 1:3] = True
    return m


def test_overlap_identical_is_full():
    les = _mask()
    assert overlap_score(Saliency(les.astype(np.float32), "l"), les) == (1.0, "substantial")


def test_overlap_disjoint_is_zero():
    les = _mask()
    assert overlap_score(Saliency((~les).astype(np.float32), "l"), les) == (0.0, "poor")


def test_overlap_half_is_moderate():
    les = _mask()
    heat = np.zeros(les.shape, np.float32)
    heat[1:3, 1:3, 1:3] = 1.0  # covers exactly half of the lesion
    frac, cat = overlap_score(Saliency(heat, "l"), les)
    assert frac == 0.5 and cat == "moderate"


def test_overlap_zero_map_is_poor():
    assert overlap_score(Saliency(np.zeros((6, 6, 4), np.float32), "l"), _mask()) == (0.0, "poor")


def test_overlap_errors():
    with pytest.raises(ValueError, match="empty"):
        overlap_score(Saliency(np.ones((4, 4, 4), np.float32), "l"), np.zeros((4, 4, 4)))
    with pytest.raises(ValueError, match="shape"):
        overlap_score(Saliency(np.ones((4, 4, 4), np.float32), "l"), np.ones((4, 4, 3)))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 15))
def test_overlap_monotone_in_coverage(seed, k):
    rng = np.random.default_rng(seed)
    les = _mask()
    heat = rng.random(les.shape).astype(np.float32)
    heat[~les] = np.maximum(heat[~les], 0.9)  # pin the max outside the lesion
    heat.flat[0] = 1.0
    before, _ = overlap_score(Saliency(heat, "l"), les)
    idx = rng.choice(np.flatnonzero(les), size=min(k, les.sum()), replace=False)
    more = heat.copy()
    more.flat[idx] = 1.0
    after, _ = overlap_score(Saliency(more, "l"), les)
    assert after >= before


def test_argmax_in_dilated_mask():
    les = np.zeros((10, 10, 6), bool)
    les[4:6, 4:6, 2:4] = True
    heat = np.zeros(les.shape, np.float32)
    heat[7, 5, 3] = 1.0  # two voxels from the lesion edge
    assert argmax_in_mask(Saliency(heat, "l"), les, dilate=2)
    assert not argmax_in_mask(Saliency(heat, "l"), les, dilate=0)


# ---------------------------------------------------------------- batch helpers


def test_explain_rows_csv_and_overlays(tmp_path, preprocessed):
    from onsetlab.dataset import build_samples

    samples = [s for s in build_samples(preprocessed) if s.labels["has_lesion"] == 1][:2]
    torch.manual_seed(0)
    m = Model2D(ModelConfig.desk("2d"))
    rows = explain_samples(m, samples, "layer3")
    assert len(rows) == len(samples)
    write_overlap_csv(rows, tmp_path / "overlap.csv")
    with open(tmp_path / "overlap.csv") as fh:
        got = list(csv.DictReader(fh))
    assert [r["case_id"] for r in got] == [s.case_id for s in samples]
    assert all(r["category"] in {"substantial", "moderate", "poor"} for r in got)
    paths = render_overlays(samples[0], rows[0][1], tmp_path / "png")
    assert paths and all(p.exists() for p in paths)
