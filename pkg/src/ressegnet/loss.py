"""Dice objective and evaluation metric.

The per-map Dice loss is the negated soft Dice overlap

    -(2 * sum(s_i * r_i) + eps) / (sum(s_i) + sum(r_i) + eps)

between a probability map s and a binary target r, smoothed with eps = 1e-6
so the empty/empty case evaluates to -1 (perfect).  The training objective is
a weighted sum of per-level Dice losses, each intermediate prob-map first
upsampled to ground-truth resolution by a single bilinear pass; intermediate
levels default to weight 1/4 and the final level to weight 1.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

SMOOTH_EPS = 1e-6


def default_weights(num_levels: int) -> list[float]:
    """1/4 for every intermediate level, 1 for the final level."""
    if num_levels < 1:
        raise ValueError("need at least one supervised level")
    return [0.25] * (num_levels - 1) + [1.0]


def upsample_to_gt(prob: torch.Tensor, gt_size: int) -> torch.Tensor:
    """Single bilinear interpolation of an (N, 1, H, W) prob-map to gt_size.

    The scale factor must be a power of two (1x included); sampling uses the
    pixel-center convention (align_corners=False).
    """
    h, w = prob.shape[-2:]
    if h != w:
        raise ValueError(f"prob-maps are square, got {h}x{w}")
    if h == gt_size:
        return prob
    if gt_size % h != 0 or (gt_size // h) & (gt_size // h - 1) != 0:
        raise ValueError(f"gt size {gt_size} is not a power-of-two multiple of {h}")
    return F.interpolate(prob, size=(gt_size, gt_size), mode="bilinear", align_corners=False)


def dice_loss(pred: torch.Tensor, target: torch.Tensor, eps: float = SMOOTH_EPS) -> torch.Tensor:
    """Negative soft Dice between a prob-map and a {0,1} target; in [-1, 0].

    Accepts (H, W) pairs or batched (N, 1, H, W) pairs; batches are reduced
    by averaging the per-sample losses.
    """
    if pred.shape != target.shape:
        raise ValueError(f"pred {tuple(pred.shape)} and target {tuple(target.shape)} differ")
    target = target.to(pred.dtype)
    if pred.dim() <= 2:
        dims = tuple(range(pred.dim()))
    else:
        dims = tuple(range(1, pred.dim()))  # per-sample reduction
    inter = (pred * target).sum(dim=dims)
    denom = pred.sum(dim=dims) + target.sum(dim=dims)
    return (-(2.0 * inter + eps) / (denom + eps)).mean()


def total_loss(level_losses, weights) -> torch.Tensor:
    """Weighted sum of per-level Dice losses (finest last)."""
    if len(level_losses) != len(weights):
        raise ValueError(f"{len(level_losses)} level losses but {len(weights)} weights")
    if min(weights) <= 0:
        raise ValueError(f"weights must be positive, got {list(weights)}")
    total = None
    for loss, w in zip(level_losses, weights):
        term = w * loss
        total = term if total is None else total + term
    return total


def multiresolution_loss(maps, target: torch.Tensor, weights) -> torch.Tensor:
    """Upsample every supervised map to the target size and combine with the level weights."""
    gt_size = target.shape[-1]
    losses = [dice_loss(upsample_to_gt(m, gt_size), target) for m in maps]
    return total_loss(losses, weights)


def binarize(prob: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Threshold a probability map to a {0,1} mask (prob >= threshold -> 1)."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    return (np.asarray(prob) >= threshold).astype(np.uint8)


def dsc(pred: np.ndarray, target: np.ndarray) -> float:
    """Dice similarity coefficient between binary masks; empty/empty is 1.0."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"pred {pred.shape} and target {target.shape} differ")
    p = pred != 0
    t = target != 0
    total = int(p.sum()) + int(t.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((p & t).sum()) / total


def evaluation_report(per_image, threshold: float) -> dict:
    """Evaluation report: per-image DSC plus the macro average.

    `per_image` is an iterable of (id, dsc) pairs.
    """
    entries = [{"id": i, "dsc": float(d)} for i, d in per_image]
    if not entries:
        raise ValueError("evaluation needs at least one image")
    mean = sum(e["dsc"] for e in entries) / len(entries)
    return {"per_image": entries, "mean_dsc": mean, "threshold": float(threshold)}
