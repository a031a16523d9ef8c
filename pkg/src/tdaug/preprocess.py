"""Percentile intensity normalization and in-plane resampling / cropping."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .data import ImageVolume, LabelVolume


@dataclass(frozen=True)
class PreprocessConfig:
    target_resolution: tuple = (1.367, 1.367)
    target_size: tuple = (224, 224)
    percentile_lo: float = 2.0
    percentile_hi: float = 98.0

    def __post_init__(self):
        if min(self.target_resolution) <= 0 or min(self.target_size) <= 0:
            raise ValueError("target resolution and size must be positive")
        if not self.percentile_lo < self.percentile_hi:
            raise ValueError("percentile_lo must be < percentile_hi")


PRESETS = {
    "cardiac": PreprocessConfig((1.367, 1.367), (224, 224)),
    "prostate": PreprocessConfig((0.6, 0.6), (224, 224)),
    "pancreas": PreprocessConfig((0.8, 0.8), (320, 320)),
}


def normalize_percentile(volume: ImageVolume, lo: float = 2.0, hi: float = 98.0) -> ImageVolume:
    """Map the lo/hi percentiles of the whole 3D volume to 0/1.

    Values outside the percentile range are kept, not clipped.
    """
    x = volume.voxels.astype(np.float64)
    p_lo, p_hi = np.percentile(x, [lo, hi])
    if p_hi == p_lo:
        raise ValueError(f"{volume.subject_id}: degenerate intensity range (p{lo}=p{hi}={p_lo})")
    out = (x - p_lo) / (p_hi - p_lo)
    return replace(volume, voxels=out.astype(np.float32))


def crop_or_pad(a: np.ndarray, size, fill=0) -> np.ndarray:
    """Center crop/zero-pad the first two axes; odd remainders go to the high side."""
    out = a
    for axis, target in enumerate(size):
        n = out.shape[axis]
        if n > target:
            start = (n - target) // 2
            out = np.take(out, np.arange(start, start + target), axis=axis)
        elif n < target:
            lo = (target - n) // 2
            widths = [(0, 0)] * out.ndim
            widths[axis] = (lo, target - n - lo)
            out = np.pad(out, widths, constant_values=fill)
    return out


def _zoom_slice(sl, factors, order):
    if factors == (1.0, 1.0):
        return sl.copy()
    out_shape = tuple(max(1, int(round(n * f))) for n, f in zip(sl.shape, factors))
    zf = tuple(o / n for o, n in zip(out_shape, sl.shape))
    return ndimage.zoom(sl, zf, order=order, mode="nearest", grid_mode=True)


def resample_and_crop(volume: ImageVolume, labels: LabelVolume | None, cfg: PreprocessConfig):
    """Resample every slice to ``cfg.target_resolution`` then crop/pad to ``cfg.target_size``.

    Images use bilinear interpolation, labels nearest-neighbour.  The
    through-plane axis is left alone.
    """
    if volume.spacing is None:
        raise ValueError(f"{volume.subject_id}: missing spacing metadata")
    factors = (volume.spacing[0] / cfg.target_resolution[0],
               volume.spacing[1] / cfg.target_resolution[1])
    factors = tuple(1.0 if np.isclose(f, 1.0, rtol=0, atol=1e-9) else f for f in factors)

    D = volume.num_slices
    img = np.stack([crop_or_pad(_zoom_slice(volume.voxels[:, :, k], factors, 1), cfg.target_size)
                    for k in range(D)], axis=-1)
    new_spacing = (cfg.target_resolution[0], cfg.target_resolution[1], volume.spacing[2])
    out_img = replace(volume, voxels=img, spacing=new_spacing)
    if labels is None:
        return out_img, None
    lab = np.stack([crop_or_pad(_zoom_slice(labels.labels[:, :, k], factors, 0), cfg.target_size)
                    for k in range(D)], axis=-1)
    return out_img, LabelVolume(lab, labels.num_classes)


def preprocess_pair(volume: ImageVolume, labels: LabelVolume | None, cfg: PreprocessConfig):
    vol = normalize_percentile(volume, cfg.percentile_lo, cfg.percentile_hi)
    return resample_and_crop(vol, labels, cfg)
