"""Segmentation and reconstruction losses.

All losses take probabilities (post-sigmoid), not logits, and reduce by mean
over every element. They accept torch tensors or numpy arrays; gradients flow
when the inputs are tensors with requires_grad.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import ShapeMismatchError, ValidationError

LOSS_MODES = ("bce_dice", "focal_dice")


@dataclass
class LossConfig:
    mode: str = "bce_dice"
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    dice_epsilon: float = 1e-6
    # ε in the numerator too, so a perfect all-background prediction scores 0
    # instead of 1; set false for the bare ratio form
    dice_smooth_numerator: bool = True
    probability_clamp: float = 1e-7

    def __post_init__(self):
        if self.mode not in LOSS_MODES:
            raise ValidationError(f"loss mode must be one of {LOSS_MODES}, got {self.mode!r}")
        if self.focal_gamma < 0:
            raise ValidationError(f"focal_gamma must be >= 0, got {self.focal_gamma}")
        if not self.dice_epsilon > 0:
            raise ValidationError(f"dice_epsilon must be > 0, got {self.dice_epsilon}")
        if not 0 < self.probability_clamp < 0.5:
            raise ValidationError(
                f"probability_clamp must be in (0, 0.5), got {self.probability_clamp}"
            )


def _pair(p, g) -> tuple[torch.Tensor, torch.Tensor]:
    p = torch.as_tensor(p, dtype=torch.float64) if not torch.is_tensor(p) else p
    g = torch.as_tensor(g, dtype=p.dtype) if not torch.is_tensor(g) else g.to(p.dtype)
    if p.shape != g.shape:
        raise ShapeMismatchError(f"prediction shape {tuple(p.shape)} != target shape {tuple(g.shape)}")
    return p, g


def bce_loss(p, g, clamp: float = 1e-7):
    """Mean binary cross-entropy: -(1/N) sum[g log p + (1-g) log(1-p)].

    Probabilities are clamped to [clamp, 1-clamp] so exact 0/1 predictions
    stay finite.
    """
    p, g = _pair(p, g)
    p = p.clamp(clamp, 1.0 - clamp)
    # log(1-p), not log1p(-p): the focal loss must reduce to 0.5*bce at
    # gamma=0 bitwise, so both must hit the same elementwise ops
    return -(g * torch.log(p) + (1.0 - g) * torch.log(1.0 - p)).mean()


def focal_loss(p, g, alpha: float = 0.25, gamma: float = 2.0, clamp: float = 1e-7):
    """Mean focal loss: -(1/N) sum alpha_t (1 - p_t)^gamma log(p_t).

    p_t is p on positives and 1-p on negatives; alpha_t likewise alpha /
    1-alpha. With gamma=0 and alpha=0.5 this is exactly half of bce_loss.
    """
    if gamma < 0:
        raise ValidationError(f"focal gamma must be >= 0, got {gamma}")
    p, g = _pair(p, g)
    p = p.clamp(clamp, 1.0 - clamp)
    p_t = torch.where(g > 0.5, p, 1.0 - p)
    alpha_t = torch.where(g > 0.5, torch.full_like(p, alpha), torch.full_like(p, 1.0 - alpha))
    return -(alpha_t * (1.0 - p_t) ** gamma * torch.log(p_t)).mean()


def dice_loss(p, g, epsilon: float = 1e-6, smooth_numerator: bool = True):
    """Soft Dice loss over the whole batch: 1 - 2|p*g| / (|p| + |g|).

    smooth_numerator=true adds epsilon to numerator and denominator (empty
    prediction of an empty target scores 0); false keeps epsilon in the
    denominator only, where an all-empty pair scores 1.
    """
    p, g = _pair(p, g)
    inter = (p * g).sum()
    total = p.sum() + g.sum()
    if smooth_numerator:
        return 1.0 - (2.0 * inter + epsilon) / (total + epsilon)
    return 1.0 - 2.0 * inter / (total + epsilon)


def mse_loss(x, x_hat):
    """Mean squared error between an image and its reconstruction."""
    x, x_hat = _pair(x, x_hat)
    return ((x - x_hat) ** 2).mean()


def total_loss(cfg: LossConfig, p, g):
    """Training objective: segmentation term (BCE or focal) plus Dice, unit weights."""
    dice = dice_loss(p, g, cfg.dice_epsilon, cfg.dice_smooth_numerator)
    if cfg.mode == "bce_dice":
        return bce_loss(p, g, cfg.probability_clamp) + dice
    if cfg.mode == "focal_dice":
        return focal_loss(p, g, cfg.focal_alpha, cfg.focal_gamma, cfg.probability_clamp) + dice
    raise ValidationError(f"unknown loss mode {cfg.mode!r}")
