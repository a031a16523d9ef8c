"""Segmentation, adversarial, large-deviation and regularization objectives."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F


def default_class_weights(num_classes: int, background: float = 0.1) -> tuple:
    """Background gets ``background``; the rest is split evenly over the foreground."""
    if num_classes < 2:
        raise ValueError("need at least one foreground class")
    fg = (1.0 - background) / (num_classes - 1)
    return (background,) + (fg,) * (num_classes - 1)


@dataclass(frozen=True)
class LossWeights:
    class_weights: tuple = (0.1, 0.3, 0.3, 0.3)
    lambda_adv: float = 1.0
    lambda_ld: float = 1e-3
    ld_reduction: str = "mean"  # "mean": per-pixel; "sum": raw L1 norm
    saturating_gan: bool = False

    def __post_init__(self):
        if min(self.class_weights) <= 0:
            raise ValueError("class weights must be positive")
        if self.lambda_adv < 0 or self.lambda_ld < 0:
            raise ValueError("loss weights must be non-negative")
        if self.ld_reduction not in ("mean", "sum"):
            raise ValueError(f"unknown ld_reduction {self.ld_reduction!r}")


def weighted_cross_entropy(logits: torch.Tensor, target: torch.Tensor, weights) -> torch.Tensor:
    """Mean over pixels of -sum_c w_c t_c log softmax(logits)_c.

    ``logits`` and ``target`` are (N,C,H,W); ``target`` may be soft.
    """
    if not torch.isfinite(logits).all():
        raise ValueError("non-finite logits")
    if logits.shape != target.shape:
        raise ValueError(f"logits {tuple(logits.shape)} vs target {tuple(target.shape)}")
    w = torch.as_tensor(weights, dtype=logits.dtype, device=logits.device).view(1, -1, 1, 1)
    if w.shape[1] != logits.shape[1]:
        raise ValueError(f"{w.shape[1]} class weights for {logits.shape[1]} classes")
    logp = F.log_softmax(logits, dim=1)
    return -(w * target * logp).sum(1).mean()


REAL, FAKE = 1, 0


def _ce_to(logits, cls):
    target = torch.full((logits.shape[0],), cls, dtype=torch.long, device=logits.device)
    return F.cross_entropy(logits, target)


def discriminator_loss(d_real_logits, d_fake_logits):
    return _ce_to(d_real_logits, REAL) + _ce_to(d_fake_logits, FAKE)


def generator_adversarial_loss(d_fake_logits, saturating: bool = False):
    if saturating:
        # log(1 - D(fake)) with D(fake) = p(real); minimized by the generator
        return -_ce_to(d_fake_logits, FAKE)
    return _ce_to(d_fake_logits, REAL)


def adversarial_losses(d_real_logits, d_fake_logits, saturating: bool = False):
    """Return (loss_D, loss_G) for two-class discriminator logits."""
    return (discriminator_loss(d_real_logits, d_fake_logits),
            generator_adversarial_loss(d_fake_logits, saturating))


def large_deviation_loss(field: torch.Tensor, reduction: str = "sum") -> torch.Tensor:
    """Negative L1 norm of a generated field.

    With ``reduction="mean"`` the norm is divided by the number of pixels
    (N*H*W for an (N,C,H,W) field), so the weight does not depend on image size.
    """
    total = field.abs().sum()
    if reduction == "sum":
        return -total
    if reduction == "mean":
        if field.dim() != 4:
            raise ValueError("per-pixel reduction expects an (N,C,H,W) field")
        n, _, h, w = field.shape
        return -total / (n * h * w)
    raise ValueError(f"unknown reduction {reduction!r}")


def regularization_loss(adv_g, ld, weights: LossWeights):
    return weights.lambda_adv * adv_g + weights.lambda_ld * ld


def task_driven_objective(seg_loss_on_union, reg):
    return seg_loss_on_union + reg
