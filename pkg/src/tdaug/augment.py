"""Baseline augmentations: random affine, random elastic, contrast/brightness, Mixup."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .data import SliceSample
from .warp import affine_flow, warp, warp_labels

RandomStream = np.random.Generator


@dataclass(frozen=True)
class AffineAugConfig:
    scale_range: tuple = (0.9, 1.1)
    rot_small_deg: tuple = (-15.0, 15.0)
    rot_multiple_base: float = 45.0
    rot_multiple_max: int = 8
    apply_prob: float = 0.8

    def __post_init__(self):
        if not 0 <= self.apply_prob <= 1:
            raise ValueError("apply_prob must be in [0, 1]")
        if min(self.scale_range) <= 0:
            raise ValueError("scale_range must be positive")


@dataclass(frozen=True)
class ElasticAugConfig:
    grid_size: tuple = (3, 3, 2)
    sigma: float = 10.0

    def __post_init__(self):
        if min(self.grid_size[:2]) < 2:
            raise ValueError("control grid needs at least 2 points per axis")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")


@dataclass(frozen=True)
class IntensityAugConfig:
    contrast_range: tuple = (0.8, 1.2)
    brightness_range: tuple = (-0.1, 0.1)

    def __post_init__(self):
        if self.contrast_range[0] > self.contrast_range[1] or \
                self.brightness_range[0] > self.brightness_range[1]:
            raise ValueError("ranges must be (low, high)")


@dataclass(frozen=True)
class MixupConfig:
    alpha: float = 0.2

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be > 0")


AFFINE_OPS = ("scale", "flip", "rotate_small", "rotate_multiple")


def _warp_sample(sample: SliceSample, flow: torch.Tensor) -> SliceSample:
    img = torch.from_numpy(sample.image)[None, None]
    lab = torch.from_numpy(sample.label_onehot).permute(2, 0, 1)[None]
    flow = flow[None].to(img.dtype)
    out_img = warp(img, flow)[0, 0].numpy()
    out_lab = warp_labels(lab, flow)[0].permute(1, 2, 0).numpy()
    return SliceSample(out_img, out_lab, sample.subject_id, sample.slice_index)


def rotation_matrix(deg: float):
    th = np.deg2rad(deg)
    c, s = np.cos(th), np.sin(th)
    return np.array([[c, -s, 0.0], [s, c, 0.0]])


def apply_affine_op(sample: SliceSample, op: str, value: float = 0.0) -> SliceSample:
    """Apply one named affine transform with an explicit parameter."""
    if op == "none":
        return sample
    if op == "flip":
        # mirror along x (columns); exact, no resampling
        return SliceSample(sample.image[:, ::-1].copy(), sample.label_onehot[:, ::-1].copy(),
                           sample.subject_id, sample.slice_index)
    if op == "scale":
        # sampling at p / s magnifies by s
        m = np.array([[1.0 / value, 0.0, 0.0], [0.0, 1.0 / value, 0.0]])
    elif op in ("rotate_small", "rotate_multiple"):
        m = rotation_matrix(value)
    else:
        raise ValueError(f"unknown affine op {op!r}")
    return _warp_sample(sample, affine_flow(m, sample.image.shape))


def draw_affine(cfg: AffineAugConfig, rng: RandomStream):
    if rng.random() >= cfg.apply_prob:
        return "none", 0.0
    op = AFFINE_OPS[rng.integers(len(AFFINE_OPS))]
    if op == "scale":
        return op, float(rng.uniform(*cfg.scale_range))
    if op == "rotate_small":
        return op, float(rng.uniform(*cfg.rot_small_deg))
    if op == "rotate_multiple":
        return op, cfg.rot_multiple_base * int(rng.integers(0, cfg.rot_multiple_max + 1))
    return op, 0.0


def random_affine(sample: SliceSample, cfg: AffineAugConfig, rng: RandomStream) -> SliceSample:
    """With probability ``apply_prob`` apply one randomly chosen affine op.

    The ops are scaling, x-flip, small rotation and rotation by a multiple of 45 degrees.
    """
    op, value = draw_affine(cfg, rng)
    return apply_affine_op(sample, op, value)


def upsample_control_grid(grid: np.ndarray, shape) -> np.ndarray:
    """Bicubically upsample a (gh, gw, 2) control grid to an (H, W, 2) field."""
    g = torch.from_numpy(np.ascontiguousarray(np.asarray(grid, np.float64).transpose(2, 0, 1)))[None]
    up = F.interpolate(g, size=tuple(shape), mode="bicubic", align_corners=True)
    return up[0].permute(1, 2, 0).numpy()


def draw_elastic_controls(cfg: ElasticAugConfig, rng: RandomStream) -> np.ndarray:
    gh, gw, gc = cfg.grid_size
    return rng.normal(0.0, cfg.sigma, size=(gh, gw, gc))


def random_elastic_field(shape, cfg: ElasticAugConfig, rng: RandomStream) -> np.ndarray:
    H, W = shape
    if H < cfg.grid_size[0] or W < cfg.grid_size[1]:
        raise ValueError(f"image {shape} smaller than control grid {cfg.grid_size[:2]}")
    return upsample_control_grid(draw_elastic_controls(cfg, rng), shape).astype(np.float32)


def random_elastic(sample: SliceSample, cfg: ElasticAugConfig, rng: RandomStream) -> SliceSample:
    field = random_elastic_field(sample.image.shape, cfg, rng)
    return _warp_sample(sample, torch.from_numpy(field).permute(2, 0, 1))


def contrast_brightness(image: np.ndarray, c: float, b: float) -> np.ndarray:
    mean = image.mean()
    return (image - mean) * c + mean + b


def random_contrast_brightness(image: np.ndarray, cfg: IntensityAugConfig,
                               rng: RandomStream) -> np.ndarray:
    c = rng.uniform(*cfg.contrast_range)
    b = rng.uniform(*cfg.brightness_range)
    return contrast_brightness(image, c, b).astype(image.dtype)


def random_intensity(sample: SliceSample, cfg: IntensityAugConfig, rng: RandomStream) -> SliceSample:
    return SliceSample(random_contrast_brightness(sample.image, cfg, rng), sample.label_onehot,
                       sample.subject_id, sample.slice_index)


def mixup(sample_i: SliceSample, sample_j: SliceSample, cfg: MixupConfig, rng: RandomStream,
          lam: float | None = None) -> SliceSample:
    if sample_i.image.shape != sample_j.image.shape or \
            sample_i.label_onehot.shape != sample_j.label_onehot.shape:
        raise ValueError("mixup partners must share image shape and class count")
    if lam is None:
        lam = rng.beta(cfg.alpha, cfg.alpha)
    x = lam * sample_i.image + (1 - lam) * sample_j.image
    y = lam * sample_i.label_onehot + (1 - lam) * sample_j.label_onehot
    return SliceSample(x, y, sample_i.subject_id, sample_i.slice_index)
