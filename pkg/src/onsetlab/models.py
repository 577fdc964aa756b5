"""Slice-wise 2D attention classifier and 3D attention U-Net encoder classifier."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

FULL_WIDTHS_2D = (64, 128, 256, 512)
FULL_WIDTHS_3D = (32, 64, 128, 256, 512)


@dataclass
class ModelConfig:
    kind: str = "2d"
    widths: tuple[int, ...] = FULL_WIDTHS_2D
    in_channels: int = 3
    n_slices: int = 12
    # (h, w) each slice is resized to; None keeps the native hemisphere shape
    slice_shape: tuple[int, int] | None = (224, 128)
    stem_stride: int = 2
    stem_pool: bool = True
    gate_reduction: int = 2
    whole_volume: bool = False

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if self.slice_shape is not None:
            self.slice_shape = tuple(int(s) for s in self.slice_shape)
        if self.kind not in ("2d", "3d"):
            raise ValueError(f"model kind must be 2d or 3d, got {self.kind!r}")
        need = 4 if self.kind == "2d" else 5
        if len(self.widths) != need:
            raise ValueError(f"{self.kind} model needs {need} stage widths")

    @classmethod
    def desk(cls, kind="2d", **kw) -> "ModelConfig":
        """Tiny widths for CPU experiments; stride-1 stem keeps small slices usable."""
        widths = (8, 16, 32, 64) if kind == "2d" else (4, 8, 16, 32, 64)
        base = dict(kind=kind, widths=widths, slice_shape=None, stem_stride=1, stem_pool=False)
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "ModelConfig":
        return cls(**d)


class AttentionGate(nn.Module):
    """Additive attention: w = sigmoid(psi(relu(Wx x + Wg up(g)))), output w * x."""

    def __init__(self, x_channels: int, g_channels: int, inter_channels: int, dim: int = 2):
        super().__init__()
        conv = nn.Conv2d if dim == 2 else nn.Conv3d
        self.dim = dim
        self.wx = conv(x_channels, inter_channels, 1, bias=False)
        self.wg = conv(g_channels, inter_channels, 1, bias=True)
        self.psi = conv(inter_channels, 1, 1, bias=True)

    def forward(self, x, g):
        if x.dim() != self.dim + 2 or g.dim() != self.dim + 2:
            raise ValueError(f"gate expects {self.dim}D feature maps")
        if any(gs > xs for gs, xs in zip(g.shape[2:], x.shape[2:])):
            raise ValueError(f"gating map {tuple(g.shape[2:])} is finer than input {tuple(x.shape[2:])}")
        # the 1x1 projection commutes with interpolation, so project first
        gg = self.wg(g)
        mode = "bilinear" if self.dim == 2 else "trilinear"
        gg = F.interpolate(gg, size=x.shape[2:], mode=mode, align_corners=False)
        w = torch.sigmoid(self.psi(F.relu(self.wx(x) + gg)))
        return w * x, w


class SliceAggregator(nn.Module):
    """Per-slice weights sigmoid(theta) in [0, 1]; image logit = sum_s w_s * logit_s."""

    def __init__(self, n_slices: int):
        super().__init__()
        self.theta = nn.Parameter(torch.zeros(n_slices))

    def weights(self):
        return torch.sigmoid(self.theta)

    def forward(self, slice_logits):
        if slice_logits.shape[-1] != self.theta.shape[0]:
            raise ValueError(f"expected {self.theta.shape[0]} slices, got {slice_logits.shape[-1]}")
        w = self.weights()
        return (slice_logits * w).sum(dim=-1), w


class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.down = None
        if stride != 1 or cin != cout:
            self.down = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        idn = x if self.down is None else self.down(x)
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + idn)


def _layer(cin, cout, stride):
    return nn.Sequential(BasicBlock(cin, cout, stride), BasicBlock(cout, cout, 1))


class Model2D(nn.Module):
    """ResNet-18-style slice encoder with an attention gate at the third stage.

    Input is a hemisphere stack (B, 3, x, y, z); every z slice is classified
    as a (3, y, x) image and the slice logits are combined by the aggregator.
    """

    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        cfg = cfg or ModelConfig()
        if cfg.kind != "2d":
            raise ValueError("Model2D needs a 2d config")
        self.cfg = cfg
        w1, w2, w3, w4 = cfg.widths
        if cfg.stem_stride > 1:
            stem = [nn.Conv2d(cfg.in_channels, w1, 7, cfg.stem_stride, 3, bias=False)]
        else:
            stem = [nn.Conv2d(cfg.in_channels, w1, 3, 1, 1, bias=False)]
        stem += [nn.BatchNorm2d(w1), nn.ReLU()]
        if cfg.stem_pool:
            stem.append(nn.MaxPool2d(3, 2, 1))
        self.stem = nn.Sequential(*stem)
        self.layer1 = _layer(w1, w1, 1)
        self.layer2 = _layer(w1, w2, 2)
        self.layer3 = _layer(w2, w3, 2)
        self.layer4 = _layer(w3, w4, 2)
        self.gate = AttentionGate(w3, w4, max(w3 // cfg.gate_reduction, 1), dim=2)
        self.head = nn.Linear(w4 + w3, 1)
        self.aggregator = SliceAggregator(cfg.n_slices)

    def slices(self, x):
        """(B, C, x, y, z) -> (B*z, C, h, w) with h along y and w along x."""
        b, c, nx, ny, nz = x.shape
        if nz != self.cfg.n_slices:
            raise ValueError(f"expected {self.cfg.n_slices} slices, got {nz}")
        s = x.permute(0, 4, 1, 3, 2).reshape(b * nz, c, ny, nx)
        if self.cfg.slice_shape is not None and tuple(s.shape[-2:]) != self.cfg.slice_shape:
            s = F.interpolate(s, size=self.cfg.slice_shape, mode="bilinear", align_corners=False)
        return s

    def forward(self, x):
        if x.dim() != 5 or x.shape[1] != self.cfg.in_channels:
            raise ValueError(f"expected (B, {self.cfg.in_channels}, x, y, z), got {tuple(x.shape)}")
        b, nz = x.shape[0], x.shape[-1]
        s = self.slices(x)
        f3 = self.layer3(self.layer2(self.layer1(self.stem(s))))
        f4 = self.layer4(f3)
        attended, att = self.gate(f3, f4)
        feats = torch.cat([f4.mean(dim=(2, 3)), attended.mean(dim=(2, 3))], dim=1)
        slice_logits = self.head(feats).reshape(b, nz)
        logit, weights = self.aggregator(slice_logits)
        if not torch.isfinite(logit).all():
            raise FloatingPointError("non-finite activations in Model2D forward")
        return {
            "logit": logit,
            "prob": torch.sigmoid(logit),
            "slice_logits": slice_logits,
            "slice_weights": weights,
            "attention": att.reshape(b, nz, *att.shape[1:]),
            "feature_map": f4,
        }


def _double_conv3d(cin, cout):
    return nn.Sequential(
        nn.Conv3d(cin, cout, 3, 1, 1, bias=False),
        nn.BatchNorm3d(cout),
        nn.ReLU(),
        nn.Conv3d(cout, cout, 3, 1, 1, bias=False),
        nn.BatchNorm3d(cout),
        nn.ReLU(),
    )


def _pool_kernel(shape):
    # thick-slice volumes run out of z long before x/y
    return tuple(2 if n >= 4 else 1 for n in shape)


class Encoder3D(nn.Module):
    def __init__(self, in_channels, widths):
        super().__init__()
        chans = (in_channels,) + tuple(widths)
        self.stages = nn.ModuleList(_double_conv3d(chans[i], chans[i + 1]) for i in range(len(widths)))

    def forward(self, x):
        feats = []
        for i, stage in enumerate(self.stages):
            if i:
                x = F.max_pool3d(x, _pool_kernel(x.shape[2:]))
            x = stage(x)
            feats.append(x)
        return feats


class Model3D(nn.Module):
    """3D U-Net encoder with attention gates on the third and fourth stages."""

    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        cfg = cfg or ModelConfig(kind="3d", widths=FULL_WIDTHS_3D, slice_shape=None)
        if cfg.kind != "3d":
            raise ValueError("Model3D needs a 3d config")
        self.cfg = cfg
        w = cfg.widths
        self.encoder = Encoder3D(cfg.in_channels, w)
        r = cfg.gate_reduction
        self.gate_a = AttentionGate(w[2], w[3], max(w[2] // r, 1), dim=3)
        self.gate_b = AttentionGate(w[3], w[4], max(w[3] // r, 1), dim=3)
        self.head = nn.Linear(w[4] + w[2] + w[3], 1)

    def forward(self, x):
        if x.dim() != 5 or x.shape[1] != self.cfg.in_channels:
            raise ValueError(f"expected (B, {self.cfg.in_channels}, x, y, z), got {tuple(x.shape)}")
        feats = self.encoder(x)
        a, wa = self.gate_a(feats[2], feats[3])
        b, wb = self.gate_b(feats[3], feats[4])
        pooled = torch.cat([feats[4].mean(dim=(2, 3, 4)), a.mean(dim=(2, 3, 4)), b.mean(dim=(2, 3, 4))], dim=1)
        logit = self.head(pooled).squeeze(1)
        if not torch.isfinite(logit).all():
            raise FloatingPointError("non-finite activations in Model3D forward")
        return {"logit": logit, "prob": torch.sigmoid(logit), "attention": (wa, wb), "feature_map": feats[4]}


class UNet3D(nn.Module):
    """Encoder-decoder used for restoration pretraining; shares Encoder3D names."""

    def __init__(self, cfg: ModelConfig | None = None, out_channels: int | None = None):
        super().__init__()
        cfg = cfg or ModelConfig(kind="3d", widths=FULL_WIDTHS_3D, slice_shape=None)
        self.cfg = cfg
        w = cfg.widths
        self.encoder = Encoder3D(cfg.in_channels, w)
        self.decoder = nn.ModuleList(_double_conv3d(w[i + 1] + w[i], w[i]) for i in reversed(range(len(w) - 1)))
        self.out = nn.Conv3d(w[0], out_channels or cfg.in_channels, 1)

    def forward(self, x):
        feats = self.encoder(x)
        y = feats[-1]
        for block, skip in zip(self.decoder, reversed(feats[:-1])):
            y = F.interpolate(y, size=skip.shape[2:], mode="trilinear", align_corners=False)
            y = block(torch.cat([y, skip], dim=1))
        return torch.sigmoid(self.out(y))


def build_model(cfg: ModelConfig) -> nn.Module:
    return Model2D(cfg) if cfg.kind == "2d" else Model3D(cfg)


# parameter-name prefixes used by the training schema
EARLY_BLOCKS = {"2d": ("stem.", "layer1.", "layer2."), "3d": ("encoder.stages.0.", "encoder.stages.1.")}
ATTENTION_AND_HEAD = {"2d": ("gate.", "head.", "aggregator."), "3d": ("gate_a.", "gate_b.", "head.")}
HEAD = {"2d": ("head.", "aggregator."), "3d": ("head.",)}
GRADCAM_LAYER = {"2d": "layer3", "3d": "encoder.stages.3"}
