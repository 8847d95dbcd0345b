"""Segmentation losses (BCE + soft Dice) and the Dice metric."""

from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F

BCE_CLAMP = 1e-7
DICE_SMOOTH = 1.0


class InvalidInputError(ValueError):
    pass


class LossValue(NamedTuple):
    total: torch.Tensor
    ce_part: torch.Tensor
    dice_part: torch.Tensor


def dice_score(pred, gt):
    """Hard Dice between two binary masks. Both empty counts as a perfect match."""
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise InvalidInputError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    denom = int(pred.sum()) + int(gt.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, gt).sum()) / denom


def dice_loss(probs, gt, smooth=DICE_SMOOTH):
    """Soft Dice loss over the whole tensor (all instances pooled)."""
    gt = gt.to(probs.dtype)
    inter = (probs * gt).sum()
    return 1.0 - (2.0 * inter + smooth) / (probs.sum() + gt.sum() + smooth)


def bce_loss(probs, gt, eps=BCE_CLAMP):
    probs = probs.clamp(eps, 1.0 - eps)
    return F.binary_cross_entropy(probs, gt.to(probs.dtype))


def combined_loss(probs, gt, ce_weight=1.0, dice_weight=1.0, smooth=DICE_SMOOTH):
    ce = bce_loss(probs, gt)
    dl = dice_loss(probs, gt, smooth)
    return LossValue(ce_weight * ce + dice_weight * dl, ce, dl)


def combined_loss_from_logits(logits, gt, ce_weight=1.0, dice_weight=1.0, smooth=DICE_SMOOTH):
    """Same value as :func:`combined_loss` on ``sigmoid(logits)`` but with a stable BCE term."""
    gt = gt.to(logits.dtype)
    probs = torch.sigmoid(logits)
    ce = F.binary_cross_entropy_with_logits(logits, gt)
    dl = dice_loss(probs, gt, smooth)
    return LossValue(ce_weight * ce + dice_weight * dl, ce, dl)
