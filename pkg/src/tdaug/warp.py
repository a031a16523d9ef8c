"""Differentiable dense warping and additive intensity fields.

Fields follow the backward-warping convention: a displacement ``v`` in pixel
units (dy, dx) is added to the identity grid and the input is sampled there,
``out(p) = input(p + v(p))``.  Everything is written with plain tensor ops so
autograd provides gradients with respect to both the image and the field.
"""

from __future__ import annotations

from typing import Literal

import numpy as np
import torch

PadMode = Literal["zeros", "border"]


def _gather(img, iy, ix, valid):
    # img: (N,C,H,W); iy/ix: (N,H,W) long, already clamped; valid: (N,H,W) bool
    N, C, H, W = img.shape
    flat = img.reshape(N, C, H * W)
    idx = (iy * W + ix).reshape(N, 1, -1).expand(N, C, -1)
    vals = torch.gather(flat, 2, idx).reshape(N, C, *iy.shape[1:])
    return vals * valid.unsqueeze(1).to(img.dtype)


def warp(image: torch.Tensor, flow: torch.Tensor, padding: PadMode = "zeros") -> torch.Tensor:
    """Bilinearly resample ``image`` (N,C,H,W) at ``grid + flow`` (flow is N,2,H,W)."""
    if image.dim() != 4 or flow.dim() != 4 or flow.shape[1] != 2:
        raise ValueError(f"expected image (N,C,H,W) and flow (N,2,H,W), got "
                         f"{tuple(image.shape)} and {tuple(flow.shape)}")
    if image.shape[0] != flow.shape[0] or image.shape[2:] != flow.shape[2:]:
        raise ValueError(f"shape mismatch: image {tuple(image.shape)}, flow {tuple(flow.shape)}")
    if torch.isnan(flow).any():
        raise ValueError("deformation field contains NaN")
    N, C, H, W = image.shape
    flow = flow.to(image.dtype)
    gy = torch.arange(H, dtype=image.dtype, device=image.device).view(1, H, 1)
    gx = torch.arange(W, dtype=image.dtype, device=image.device).view(1, 1, W)
    py = gy + flow[:, 0]
    px = gx + flow[:, 1]
    if padding == "border":
        py = py.clamp(0, H - 1)
        px = px.clamp(0, W - 1)
    elif padding != "zeros":
        raise ValueError(f"unknown padding mode {padding!r}")

    y0f, x0f = torch.floor(py), torch.floor(px)
    wy1, wx1 = py - y0f, px - x0f
    wy0, wx0 = 1 - wy1, 1 - wx1
    y0, x0 = y0f.long(), x0f.long()
    y1, x1 = y0 + 1, x0 + 1

    out = 0
    for yy, wy in ((y0, wy0), (y1, wy1)):
        for xx, wx in ((x0, wx0), (x1, wx1)):
            valid = (yy >= 0) & (yy < H) & (xx >= 0) & (xx < W)
            v = _gather(image, yy.clamp(0, H - 1), xx.clamp(0, W - 1), valid)
            out = out + v * (wy * wx).unsqueeze(1)
    return out


def renormalize_labels(soft: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Clamp to [0,1] and renormalize channels; empty pixels fall back to background."""
    soft = soft.clamp(0, 1)
    total = soft.sum(1, keepdim=True)
    background = torch.zeros_like(soft)
    background[:, 0] = 1
    empty = total < eps
    return torch.where(empty, background, soft / torch.where(empty, torch.ones_like(total), total))


def warp_labels(onehot: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    return renormalize_labels(warp(onehot, flow, "zeros"))


# ---------------------------------------------------------------------------
# single-slice helpers (H,W images, H,W,2 fields, H,W,C labels)


def _as_tensor(a, dtype=None):
    if isinstance(a, torch.Tensor):
        return a if dtype is None else a.to(dtype)
    a = np.asarray(a)
    t = torch.from_numpy(np.ascontiguousarray(a))
    return t if dtype is None else t.to(dtype)


def _like(result: torch.Tensor, ref):
    return result if isinstance(ref, torch.Tensor) else result.detach().cpu().numpy()


def _check_field(field, shape):
    if tuple(field.shape) != (shape[0], shape[1], 2):
        raise ValueError(f"field shape {tuple(field.shape)} does not match image {tuple(shape)}")


def apply_deformation(image, field, padding: PadMode = "zeros"):
    """Warp one H x W slice by an H x W x 2 displacement field."""
    img = _as_tensor(image)
    if not img.is_floating_point():
        img = img.float()
    f = _as_tensor(field, img.dtype)
    _check_field(f, img.shape)
    out = warp(img[None, None], f.permute(2, 0, 1)[None], padding)[0, 0]
    return _like(out, image)


def apply_deformation_to_label(label_onehot, field):
    """Warp each one-hot channel with zero padding, then renormalize per pixel."""
    lab = _as_tensor(label_onehot)
    if not lab.is_floating_point():
        lab = lab.float()
    f = _as_tensor(field, lab.dtype)
    if lab.dim() != 3:
        raise ValueError(f"expected H x W x C label map, got {tuple(lab.shape)}")
    _check_field(f, lab.shape[:2])
    out = warp_labels(lab.permute(2, 0, 1)[None], f.permute(2, 0, 1)[None])
    return _like(out[0].permute(1, 2, 0), label_onehot)


def apply_intensity(image, delta):
    """Add an intensity field; no clipping, so values may leave [0, 1]."""
    if tuple(np.shape(image)) != tuple(np.shape(delta)):
        raise ValueError(f"shape mismatch: image {np.shape(image)}, field {np.shape(delta)}")
    return image + delta


def compose_transforms(image, label_onehot, field_v, field_i):
    """Deformation first, then the additive field; the label only sees the deformation."""
    warped = apply_deformation(image, field_v)
    warped_label = apply_deformation_to_label(label_onehot, field_v)
    return apply_intensity(warped, field_i), warped_label


def affine_flow(matrix, shape, center=None, dtype=torch.float32) -> torch.Tensor:
    """Displacement field (2,H,W) for sampling at ``A @ (p - c) + c + t``.

    ``matrix`` is 2x3 in (y, x) order; the translation column is in pixels.
    """
    H, W = shape
    A = torch.as_tensor(np.asarray(matrix, dtype=np.float64)[:, :2], dtype=torch.float64)
    t = torch.as_tensor(np.asarray(matrix, dtype=np.float64)[:, 2], dtype=torch.float64)
    cy, cx = ((H - 1) / 2, (W - 1) / 2) if center is None else center
    yy, xx = torch.meshgrid(torch.arange(H, dtype=torch.float64),
                            torch.arange(W, dtype=torch.float64), indexing="ij")
    p = torch.stack([yy - cy, xx - cx])
    q = torch.einsum("ij,jhw->ihw", A, p)
    q[0] += cy + t[0]
    q[1] += cx + t[1]
    return (q - torch.stack([yy, xx])).to(dtype)
