"""Segmentation losses: BCE + Dice (binary) and CE + Dice (multi-class)."""
import torch
from torch.nn import functional as F

from .errors import DataError, ShapeError

DICE_SMOOTH = 1.0


def soft_dice_loss(prob, target, smooth=DICE_SMOOTH):
    inter = (prob * target).sum()
    return 1.0 - (2.0 * inter + smooth) / (prob.sum() + target.sum() + smooth)


def bce_dice_loss(logits, target):
    """BCE on ``sigmoid(logits)`` plus global soft Dice, equal weights."""
    if logits.shape != target.shape:
        raise ShapeError(f"logits {tuple(logits.shape)} and target {tuple(target.shape)} differ")
    target = target.to(logits.dtype)
    if not torch.all((target == 0) | (target == 1)):
        raise DataError("bce_dice_loss needs a binary target")
    bce = F.binary_cross_entropy_with_logits(logits, target)
    return bce + soft_dice_loss(torch.sigmoid(logits), target)


def ce_dice_loss(logits, labels):
    """Softmax cross-entropy plus Dice averaged over all classes.

    ``logits`` is ``(B, K, H, W)``, ``labels`` integer ``(B, H, W)``.
    """
    if logits.dim() != 4 or labels.shape != (logits.shape[0],) + tuple(logits.shape[2:]):
        raise ShapeError(f"logits {tuple(logits.shape)} do not match labels {tuple(labels.shape)}")
    K = logits.shape[1]
    labels = labels.long()
    if labels.numel() and (labels.min() < 0 or labels.max() >= K):
        raise DataError(f"labels must lie in [0, {K}), got range [{labels.min()}, {labels.max()}]")
    ce = F.cross_entropy(logits, labels)
    prob = torch.softmax(logits, dim=1)
    onehot = F.one_hot(labels, K).permute(0, 3, 1, 2).to(logits.dtype)
    dice = torch.stack([soft_dice_loss(prob[:, k], onehot[:, k]) for k in range(K)]).mean()
    return ce + dice


def foreground_logit(logits):
    """Single binary logit map from ``(B, 1|2, H, W)`` logits."""
    if logits.shape[1] == 1:
        return logits[:, 0]
    if logits.shape[1] == 2:
        return logits[:, 1] - logits[:, 0]
    raise ShapeError(f"binary task needs 1 or 2 logit channels, got {logits.shape[1]}")


def segmentation_loss(kind, logits, masks):
    if kind == "bce_dice":
        return bce_dice_loss(foreground_logit(logits), masks)
    if kind == "ce_dice":
        return ce_dice_loss(logits, masks)
    raise ValueError(f"unknown loss kind {kind!r}")


def predict_labels(kind, logits):
    if kind == "bce_dice":
        return (foreground_logit(logits) > 0).long()
    return logits.argmax(1)
