"""Grad-CAM saliency and lesion overlap."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .models import Model2D


@dataclass
class Saliency:
    heatmap: np.ndarray  # (x, y, z), values in [0, 1]
    layer: str
    target: int = 1
    normalization: dict = field(default_factory=dict)


def _module(model, name):
    modules = dict(model.named_modules())
    if name not in modules:
        raise KeyError(f"no layer named {name!r}")
    return modules[name]


def _score(out, target):
    logit = out["logit"] if isinstance(out, dict) else out
    logit = logit.reshape(-1).sum()
    return logit if target == 1 else -logit


def grad_cam(model, x, layer: str, target: int = 1, per_slice: bool = True) -> Saliency:
    """Grad-CAM of ``layer`` for one input (C, x, y, z).

    Channel weights are gradients averaged over every position (and, for the
    slice model, every slice); the map is the rectified weighted sum,
    upsampled to the input grid and scaled to max 1.
    """
    x = torch.as_tensor(np.asarray(x), dtype=torch.float32)
    if x.dim() == 4:
        x = x.unsqueeze(0)
    if x.shape[0] != 1:
        raise ValueError("grad_cam works on one sample at a time")
    store = {}

    def hook(_, __, out):
        out.retain_grad()
        store["act"] = out

    handle = _module(model, layer).register_forward_hook(hook)
    was_training = model.training
    model.eval()
    try:
        with torch.enable_grad():
            model.zero_grad(set_to_none=True)
            score = _score(model(x), target)
            act = store.get("act")
            if act is None or act.dim() < 3:
                raise ValueError(f"layer {layer!r} does not produce a spatial map")
            if act.grad is not None:
                act.grad = None
            score.backward()
            grad = act.grad if act.grad is not None else torch.zeros_like(act)
    finally:
        handle.remove()
        model.train(was_training)

    with torch.no_grad():
        if isinstance(model, Model2D) and per_slice:
            # each slice is its own 2D image: channel weights per slice
            alpha = grad.mean(dim=tuple(range(2, act.dim())), keepdim=True)
        else:
            alpha = grad.mean(dim=[d for d in range(act.dim()) if d != 1], keepdim=True)
        cam = F.relu((alpha * act).sum(dim=1, keepdim=True))
        nx, ny, nz = x.shape[2:]
        if isinstance(model, Model2D):
            # (slices, 1, h, w) -> (x, y, z)
            cam = F.interpolate(cam, size=(ny, nx), mode="bilinear", align_corners=False)
            cam = cam[:, 0].permute(2, 1, 0)
        elif cam.dim() == 5:
            cam = F.interpolate(cam, size=(nx, ny, nz), mode="trilinear", align_corners=False)[0, 0]
        elif cam.dim() == 4:
            cam = F.interpolate(cam, size=tuple(x.shape[-2:]), mode="bilinear", align_corners=False)[0, 0]
        else:
            raise ValueError(f"cannot upsample a map of shape {tuple(cam.shape)}")
        heat = cam.clamp_min(0).double().numpy()
    peak = float(heat.max()) if heat.size else 0.0
    if peak > 0:
        heat = heat / peak
    else:
        heat = np.zeros_like(heat)
    return Saliency(heat.astype(np.float32), layer, target, {"max": peak, "method": "max"})


def overlap_score(s: Saliency, lesion, threshold: float = 0.5):
    """(fraction of lesion voxels with saliency >= threshold * max, category)."""
    lesion = np.asarray(lesion).astype(bool)
    heat = s.heatmap if isinstance(s, Saliency) else np.asarray(s, dtype=float)
    if heat.shape != lesion.shape:
        raise ValueError(f"saliency {heat.shape} and lesion {lesion.shape} differ in shape")
    if not lesion.any():
        raise ValueError("empty lesion mask")
    peak = float(heat.max())
    if peak <= 0:
        frac = 0.0
    else:
        frac = float((heat[lesion] >= threshold * peak).sum() / lesion.sum())
    if frac > 0.5:
        cat = "substantial"
    elif frac > 0.1:
        cat = "moderate"
    else:
        cat = "poor"
    return frac, cat


def argmax_in_mask(s: Saliency, lesion, dilate: int = 2) -> bool:
    mask = np.asarray(lesion).astype(bool)
    if dilate:
        mask = ndimage.binary_dilation(mask, iterations=dilate)
    idx = np.unravel_index(int(np.argmax(s.heatmap)), s.heatmap.shape)
    return bool(mask[idx])


def explain_samples(model, samples, layer: str, target: int = 1, per_slice: bool = True):
    """Grad-CAM rows for lesion samples: (sample, saliency, fraction, category, argmax hit)."""
    rows = []
    for smp in samples:
        sal = grad_cam(model, smp.stack, layer, target, per_slice)
        frac, cat = overlap_score(sal, smp.lesion)
        rows.append((smp, sal, frac, cat, argmax_in_mask(sal, smp.lesion)))
    return rows


def write_overlap_csv(rows, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["case_id", "side", "layer", "fraction", "category", "argmax_in_lesion"])
        for smp, sal, frac, cat, hit in rows:
            w.writerow([smp.case_id, smp.side, sal.layer, f"{frac:.6f}", cat, int(hit)])


def render_overlays(sample, sal: Saliency, out_dir, channel: int = 0):
    """Per-slice overlays plus a max projection; returns the written paths."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    img = sample.stack[channel]
    les = sample.lesion if sample.lesion is not None else np.zeros(img.shape, bool)
    paths = []

    def draw(bg, heat, mask, path, title):
        fig, ax = plt.subplots(figsize=(3, 5))
        ax.imshow(bg.T, cmap="gray", origin="lower")
        ax.imshow(heat.T, cmap="jet", alpha=0.4, vmin=0, vmax=1, origin="lower")
        if mask.any():
            ax.contour(mask.T.astype(float), levels=[0.5], colors="w", linewidths=0.8, origin="lower")
        ax.set_title(title, fontsize=8)
        ax.axis("off")
        fig.tight_layout()
        fig.savefig(path, dpi=100)
        plt.close(fig)
        paths.append(path)

    stem = f"{sample.case_id}_{sample.side}"
    for z in range(img.shape[2]):
        if not les[:, :, z].any() and sal.heatmap[:, :, z].max() < 0.5:
            continue
        draw(img[:, :, z], sal.heatmap[:, :, z], les[:, :, z], out / f"{stem}_z{z:02d}.png", f"{stem} z={z}")
    draw(img.max(axis=2), sal.heatmap.max(axis=2), les.any(axis=2), out / f"{stem}_mip.png", f"{stem} max projection")
    return paths
