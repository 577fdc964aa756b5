"""Restoration pretext task: corrupt a volume, learn to undo it.

Four corruptions in the Models Genesis style, each drawn with probability
0.5 (at least one always applied): a monotone Bezier intensity remap, local
sub-block shuffling, in-painting and out-painting.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .models import ModelConfig, UNet3D
from .volume_io import Volume

log = logging.getLogger(__name__)

TRANSFORMS = ("remap", "shuffle", "inpaint", "outpaint")
VAL_EPOCH = 10**6


@dataclass
class CorruptionConfig:
    p: float = 0.5
    enabled: tuple[str, ...] = TRANSFORMS
    n_shuffle_blocks: int = 20
    max_block_frac: float = 0.25
    identity: bool = False  # test hook: corrupt nothing


@dataclass
class CorruptionRecord:
    seed: int | list[int]
    steps: list[dict] = field(default_factory=list)
    invertible: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _bezier_remap(x, points):
    # cubic Bezier through (0,0), p1, p2, (1,1); x components increasing keeps it monotone
    t = np.linspace(0.0, 1.0, 1001)
    p = np.array([[0.0, 0.0], points[0], points[1], [1.0, 1.0]])
    curve = (
        ((1 - t) ** 3)[:, None] * p[0]
        + (3 * (1 - t) ** 2 * t)[:, None] * p[1]
        + (3 * (1 - t) * t**2)[:, None] * p[2]
        + (t**3)[:, None] * p[3]
    )
    return np.interp(x, curve[:, 0], curve[:, 1])


def _random_box(rng, shape, lo_frac, hi_frac):
    size = [max(1, int(round(n * rng.uniform(lo_frac, hi_frac)))) for n in shape]
    start = [int(rng.integers(0, n - s + 1)) for n, s in zip(shape, size)]
    return start, size


def _box_slices(start, size):
    return tuple(slice(a, a + s) for a, s in zip(start, size))


def _draw(rng, shape, cfg: CorruptionConfig) -> list[dict]:
    if cfg.identity:
        return []
    chosen = [t for t in TRANSFORMS if t in cfg.enabled and rng.random() < cfg.p]
    if not chosen:
        options = [t for t in TRANSFORMS if t in cfg.enabled] or ["remap"]
        chosen = [options[int(rng.integers(len(options)))]]
    steps = []
    for name in TRANSFORMS:
        if name not in chosen:
            continue
        if name == "remap":
            xs = np.sort(rng.random(2))
            steps.append({"op": "remap", "points": [[float(xs[0]), float(rng.random())], [float(xs[1]), float(rng.random())]]})
        elif name == "shuffle":
            blocks = []
            for _ in range(cfg.n_shuffle_blocks):
                start, size = _random_box(rng, shape, 0.05, cfg.max_block_frac)
                blocks.append({"start": start, "size": size, "perm_seed": int(rng.integers(2**31))})
            steps.append({"op": "shuffle", "blocks": blocks})
        elif name == "inpaint":
            start, size = _random_box(rng, shape, 0.15, 0.4)
            steps.append({"op": "inpaint", "start": start, "size": size})
        else:
            start, size = _random_box(rng, shape, 0.5, 0.85)
            steps.append({"op": "outpaint", "start": start, "size": size, "noise_seed": int(rng.integers(2**31))})
    return steps


def apply_record(data: np.ndarray, record: CorruptionRecord) -> np.ndarray:
    """Replay ``record`` on clean data; bit-identical to the original corruption."""
    x = np.array(data, dtype=np.float32, copy=True)
    for step in record.steps:
        op = step["op"]
        if op == "remap":
            x = _bezier_remap(x, step["points"]).astype(np.float32)
        elif op == "shuffle":
            for b in step["blocks"]:
                sl = _box_slices(b["start"], b["size"])
                block = x[sl]
                perm = np.random.default_rng(b["perm_seed"]).permutation(block.size)
                x[sl] = block.reshape(-1)[perm].reshape(block.shape)
        elif op == "inpaint":
            x[_box_slices(step["start"], step["size"])] = 0.0
        elif op == "outpaint":
            keep = x[_box_slices(step["start"], step["size"])].copy()
            x = np.random.default_rng(step["noise_seed"]).random(x.shape).astype(np.float32)
            x[_box_slices(step["start"], step["size"])] = keep
        else:
            raise ValueError(f"unknown corruption {op!r}")
    return np.clip(x, 0.0, 1.0)


def corrupt_array(data: np.ndarray, seed, cfg: CorruptionConfig | None = None):
    cfg = cfg or CorruptionConfig()
    rng = np.random.default_rng(seed)
    shape = data.shape[-3:]
    steps = _draw(rng, shape, cfg)
    if np.ptp(data) == 0:
        # nothing to shuffle or paint meaningfully on a flat volume
        steps = [s for s in steps if s["op"] == "remap"] or [{"op": "remap", "points": [[0.3, 0.3], [0.7, 0.7]]}]
    seed = [int(k) for k in seed] if isinstance(seed, (list, tuple)) else int(seed)
    record = CorruptionRecord(seed, steps, {"remap": True, "shuffle": False, "inpaint": False, "outpaint": False})
    if data.ndim == 4:
        # channels share the spatial corruption
        return np.stack([apply_record(c, record) for c in data]), record
    return apply_record(data, record), record


def corrupt_volume(v: Volume, seed, cfg: CorruptionConfig | None = None):
    """Returns (corrupted Volume, CorruptionRecord); shape and spacing unchanged."""
    if v.data.min() < 0 or v.data.max() > 1:
        raise ValueError("corrupt_volume expects intensities normalised to [0, 1]")
    out, record = corrupt_array(v.data, seed, cfg)
    return v.with_data(out.astype(np.float32), corruption=record.to_dict()), record


# ---------------------------------------------------------------- training


@dataclass
class PretextConfig:
    epochs: int = 10
    batch_size: int = 4
    lr: float = 1e-3
    final_lr: float = 0.1
    seed: int = 0
    val_fraction: float = 0.2
    corruption: CorruptionConfig = field(default_factory=CorruptionConfig)


def masked_mse(pred, target, mask):
    m = mask.expand_as(pred).to(pred.dtype)
    return ((pred - target) ** 2 * m).sum() / m.sum().clamp_min(1.0)


def train_restoration(volumes, masks, model_cfg: ModelConfig, cfg: PretextConfig, ids=None):
    """Train a UNet3D to restore corrupted (C, x, y, z) volumes inside ``masks``.

    Returns (full state dict, encoder-only state dict, history).  Corruption is
    seeded per (seed, case index, epoch).
    """
    from .optimizer import AdaBound

    vols = np.asarray(volumes, dtype=np.float32)
    msk = np.asarray(masks, dtype=np.float32)[:, None]
    n = len(vols)
    ids = list(ids) if ids is not None else [str(i) for i in range(n)]
    if n < 2:
        raise ValueError("need at least two volumes (one for validation)")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(n)
    n_val = max(1, int(round(cfg.val_fraction * n)))
    val_idx, train_idx = order[:n_val], order[n_val:]

    model = UNet3D(model_cfg)
    opt = AdaBound(model.parameters(), lr=cfg.lr, final_lr=cfg.final_lr).name_parameters(model.named_parameters())

    def batch(idx, epoch):
        xs, ys = [], []
        for i in idx:
            corrupted, _ = corrupt_array(vols[i], [cfg.seed, int(i), epoch], cfg.corruption)
            xs.append(corrupted)
            ys.append(vols[i])  # the target is always the same case, uncorrupted
        return torch.from_numpy(np.stack(xs)), torch.from_numpy(np.stack(ys)), torch.from_numpy(msk[idx])

    def evaluate():
        model.eval()
        with torch.no_grad():
            x, y, m = batch(val_idx, VAL_EPOCH)  # fixed validation corruptions
            return float(masked_mse(model(x), y, m))

    history = [{"epoch": 0, "val_mse": evaluate()}]
    best = (history[0]["val_mse"], copy.deepcopy(model.state_dict()), 0)
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        perm = np.random.default_rng([cfg.seed, epoch]).permutation(train_idx)
        losses = []
        for k in range(0, len(perm), cfg.batch_size):
            x, y, m = batch(perm[k : k + cfg.batch_size], epoch)
            opt.zero_grad()
            loss = masked_mse(model(x), y, m)
            if not torch.isfinite(loss):
                raise FloatingPointError(f"restoration loss diverged at epoch {epoch}")
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        val = evaluate()
        history.append({"epoch": epoch, "train_mse": float(np.mean(losses)), "val_mse": val})
        log.info("pretext epoch %d train %.5f val %.5f", epoch, history[-1]["train_mse"], val)
        if val < best[0]:
            best = (val, copy.deepcopy(model.state_dict()), epoch)
    full = best[1]
    encoder = {k: v for k, v in full.items() if k.startswith("encoder.")}
    return full, encoder, {"history": history, "best_epoch": best[2], "val_ids": [ids[i] for i in val_idx]}
