"""Conditional field generators, DCGAN-style discriminator and a U-Net segmenter."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


def conv_bn_relu(cin, cout, k=3, stride=1, leak=None):
    act = nn.ReLU(inplace=True) if leak is None else nn.LeakyReLU(leak, inplace=True)
    return nn.Sequential(nn.Conv2d(cin, cout, k, stride, padding=k // 2), nn.BatchNorm2d(cout), act)


def init_weights(module: nn.Module, std: float = 0.02):
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.trunc_normal_(m.weight, std=std, a=-2 * std, b=2 * std)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


@dataclass
class GeneratorSpec:
    kind: str = "deform"  # or "intensity"
    image_size: int = 224
    z_dim: int = 100
    image_widths: tuple = (16, 32)
    z_widths: tuple = (16, 16, 16, 32)
    z_base_channels: int = 16
    common_widths: tuple = (32, 32, 32)


@dataclass
class DiscriminatorSpec:
    image_size: int = 224
    widths: tuple = (32, 64, 128, 256, 512)
    fc_widths: tuple = (256, 64)
    leak: float = 0.2


@dataclass
class SegmenterSpec:
    image_size: int = 224
    num_classes: int = 4
    widths: tuple = (16, 32, 64, 128)


class FieldGenerator(nn.Module):
    """G(x, z): an image branch and a noise branch merged by a common conv stack.

    The noise branch maps z through a dense layer onto a (size/16)^2 grid and
    brings it back to full size with four bilinear-upsample + conv stages.
    The head is a 1x1 conv: two channels (dy, dx) for deformations or one
    tanh-squashed channel for additive intensity fields.
    """

    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        if spec.kind not in ("deform", "intensity"):
            raise ValueError(f"unknown generator kind {spec.kind!r}")
        n_up = len(spec.z_widths)
        if spec.image_size % (2 ** n_up):
            raise ValueError(f"image_size {spec.image_size} must be divisible by {2 ** n_up}")
        self.spec = spec
        self.base = spec.image_size // (2 ** n_up)

        layers, c = [], 1
        for w in spec.image_widths:
            layers.append(conv_bn_relu(c, w))
            c = w
        self.image_branch = nn.Sequential(*layers)

        self.z_fc = nn.Linear(spec.z_dim, self.base * self.base * spec.z_base_channels)
        ups, cz = [], spec.z_base_channels
        for w in spec.z_widths:
            ups.append(conv_bn_relu(cz, w))
            cz = w
        self.z_convs = nn.ModuleList(ups)

        common, cc = [], c + cz
        for w in spec.common_widths:
            common.append(conv_bn_relu(cc, w))
            cc = w
        self.common = nn.Sequential(*common)
        self.head = nn.Conv2d(cc, 2 if spec.kind == "deform" else 1, 1)
        init_weights(self)

    def forward(self, x, z):
        n = x.shape[0]
        if x.shape[-1] != self.spec.image_size or x.shape[-2] != self.spec.image_size:
            raise ValueError(f"generator built for {self.spec.image_size}, got {tuple(x.shape)}")
        a = self.image_branch(x)
        b = self.z_fc(z).view(n, self.spec.z_base_channels, self.base, self.base)
        for conv in self.z_convs:
            b = conv(F.interpolate(b, scale_factor=2, mode="bilinear", align_corners=False))
        out = self.head(self.common(torch.cat([a, b], 1)))
        if self.spec.kind == "deform":
            return out
        # float tanh rounds to +-1 for large inputs; keep the range open
        lim = 1 - torch.finfo(out.dtype).eps
        return torch.tanh(out).clamp(-lim, lim)


class Discriminator(nn.Module):
    def __init__(self, spec: DiscriminatorSpec):
        super().__init__()
        if spec.image_size < 32:
            raise ValueError(f"discriminator needs image_size >= 32, got {spec.image_size}")
        self.spec = spec
        layers, c = [], 1
        for w in spec.widths:
            layers.append(conv_bn_relu(c, w, k=5, stride=2, leak=spec.leak))
            c = w
        self.features = nn.Sequential(*layers)
        self.feature_size = self.spatial_size(spec.image_size, len(spec.widths))
        fcs, f = [], c * self.feature_size ** 2
        for w in spec.fc_widths:
            fcs += [nn.Linear(f, w), nn.LeakyReLU(spec.leak, inplace=True)]
            f = w
        fcs.append(nn.Linear(f, 2))
        self.classifier = nn.Sequential(*fcs)
        init_weights(self)

    @staticmethod
    def spatial_size(n, stages=5):
        for _ in range(stages):
            n = (n + 1) // 2  # k=5, s=2, pad=2
        return n

    def forward(self, x):
        return self.classifier(self.features(x).flatten(1))


class UNet(nn.Module):
    def __init__(self, spec: SegmenterSpec):
        super().__init__()
        depth = len(spec.widths)
        if spec.image_size % (2 ** depth):
            raise ValueError(f"image_size {spec.image_size} must be divisible by {2 ** depth}")
        self.spec = spec

        def block(cin, cout):
            return nn.Sequential(conv_bn_relu(cin, cout), conv_bn_relu(cout, cout))

        self.down = nn.ModuleList()
        c = 1
        for w in spec.widths:
            self.down.append(block(c, w))
            c = w
        self.bottom = block(c, c)
        self.up = nn.ModuleList()
        for w in reversed(spec.widths):
            self.up.append(block(c + w, w))
            c = w
        self.out = nn.Conv2d(c, spec.num_classes, 1)
        init_weights(self)

    def forward(self, x):
        skips = []
        for blk in self.down:
            x = blk(x)
            skips.append(x)
            x = F.max_pool2d(x, 2)
        x = self.bottom(x)
        for blk, skip in zip(self.up, reversed(skips)):
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
            x = blk(torch.cat([x, skip], 1))
        return self.out(x)


def build_generator(kind: str, image_size: int, **widths) -> FieldGenerator:
    return FieldGenerator(GeneratorSpec(kind=kind, image_size=image_size, **widths))


def build_discriminator(image_size: int, **widths) -> Discriminator:
    return Discriminator(DiscriminatorSpec(image_size=image_size, **widths))


def build_segmenter(image_size: int, num_classes: int, **widths) -> UNet:
    return UNet(SegmenterSpec(image_size=image_size, num_classes=num_classes, **widths))


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


# ---------------------------------------------------------------------------
# checkpoints

_KINDS = {"FieldGenerator": (FieldGenerator, GeneratorSpec),
          "Discriminator": (Discriminator, DiscriminatorSpec),
          "UNet": (UNet, SegmenterSpec)}


def save_checkpoint(model: nn.Module, path, **meta):
    """Write an npz archive of float32 tensors plus the JSON model spec."""
    arrays = {name: t.detach().cpu().numpy() for name, t in model.state_dict().items()}
    arrays = {k: (v.astype(np.float32) if v.dtype.kind == "f" else v) for k, v in arrays.items()}
    header = {"model": type(model).__name__, "spec": asdict(model.spec), "meta": meta,
              "layers": {k: list(v.shape) for k, v in arrays.items()}}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, __header__=np.frombuffer(json.dumps(header).encode(), dtype=np.uint8), **arrays)
    return path


def load_checkpoint(path, map_location="cpu"):
    """Rebuild the model recorded in ``path``; returns (model, meta)."""
    with np.load(path) as z:
        header = json.loads(bytes(z["__header__"]).decode())
        state = {k: torch.from_numpy(z[k]) for k in z.files if k != "__header__"}
    cls, spec_cls = _KINDS[header["model"]]
    spec = spec_cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in header["spec"].items()})
    model = cls(spec)
    model.load_state_dict(state)
    return model.to(map_location), header.get("meta", {})


def state_digest(model_or_state) -> str:
    import hashlib

    state = model_or_state.state_dict() if isinstance(model_or_state, nn.Module) else model_or_state
    h = hashlib.sha256()
    for k in sorted(state):
        h.update(k.encode())
        h.update(state[k].detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
