"""Training losses and evaluation metrics for displacement fields.

All functions take unbatched fields of shape ``(d, *spatial)``. Reductions
are voxel means so that values are comparable across resolutions.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from .fieldcore import laplacian_energy, warp

__all__ = [
    "LossConfig",
    "mse_flow_loss",
    "epe",
    "dice_loss",
    "dice_score",
    "one_hot",
    "TRAINING_EPE_EPS",
]

TRAINING_EPE_EPS = 1e-6
DICE_SMOOTH = 1e-5


@dataclass
class LossConfig:
    kind: str = "mse"
    multi_scale: bool = False
    laplacian_weight: float = 1.0

    def __post_init__(self):
        if self.kind not in ("mse", "epe", "dice"):
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if self.laplacian_weight < 0:
            raise ValueError("laplacian_weight must be nonnegative")


def _levels(pred, target, multi_scale: bool):
    if isinstance(pred, torch.Tensor):
        pred, target = [pred], [target]
    if len(pred) != len(target):
        raise ValueError(f"pyramids have {len(pred)} and {len(target)} levels")
    for p, t in zip(pred, target):
        if p.shape != t.shape:
            raise ValueError(f"level shapes differ: {tuple(p.shape)} vs {tuple(t.shape)}")
    pairs = list(zip(pred, target))
    return pairs if multi_scale else pairs[-1:]


def mse_flow_loss(pred, target, multi_scale: bool = False) -> torch.Tensor:
    """Squared error summed over components, averaged over voxels, summed unweighted over levels."""
    return sum(((p - t) ** 2).sum(0).mean() for p, t in _levels(pred, target, multi_scale))


def epe(pred, target, mask=None, eps: float = 0.0) -> torch.Tensor:
    """Mean end-point error ``|pred - target|_2`` over (masked) voxels.

    ``eps > 0`` gives the smoothed norm ``sqrt(|.|^2 + eps^2)`` used for
    training, which keeps the gradient finite at zero error.
    """
    pred, target = torch.as_tensor(pred), torch.as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"shapes differ: {tuple(pred.shape)} vs {tuple(target.shape)}")
    sq = ((pred - target) ** 2).sum(0)
    norm = torch.sqrt(sq + eps ** 2) if eps else torch.sqrt(sq)
    if mask is None:
        return norm.mean()
    mask = torch.as_tensor(mask, dtype=torch.bool)
    if mask.shape != norm.shape:
        raise ValueError(f"mask shape {tuple(mask.shape)} does not match field {tuple(norm.shape)}")
    if not mask.any():
        raise ValueError("empty mask")
    return norm[mask].mean()


def multi_scale_epe(pred, target, multi_scale: bool = False, eps: float = TRAINING_EPE_EPS) -> torch.Tensor:
    return sum(epe(p, t, eps=eps) for p, t in _levels(pred, target, multi_scale))


def one_hot(labels, label_values: Sequence[int]) -> torch.Tensor:
    labels = torch.as_tensor(labels)
    return torch.stack([(labels == v) for v in label_values]).to(torch.get_default_dtype())


def dice_loss(fixed_seg, moving_seg, field, laplacian_weight: float = 1.0) -> torch.Tensor:
    """Soft Dice distance between the fixed one-hot and the warped moving one-hot, plus a
    weighted squared-Laplacian penalty on the field."""
    fixed_seg, moving_seg = torch.as_tensor(fixed_seg), torch.as_tensor(moving_seg)
    if fixed_seg.shape != moving_seg.shape:
        raise ValueError(
            f"segmentations differ in label count or shape: {tuple(fixed_seg.shape)} vs {tuple(moving_seg.shape)}"
        )
    moved = warp(moving_seg.to(field.dtype), field)
    dims = tuple(range(1, moved.ndim))
    inter = (moved * fixed_seg).sum(dims)
    total = moved.sum(dims) + fixed_seg.sum(dims)
    dice = (2 * inter + DICE_SMOOTH) / (total + DICE_SMOOTH)
    loss = 1 - dice.mean()
    if laplacian_weight:
        loss = loss + laplacian_weight * laplacian_energy(field)
    return loss


def dice_score(seg_a, seg_b, labels: Sequence[int]) -> tuple[dict[int, float], float]:
    """Hard Dice per label; labels absent from both maps are ``nan`` and left out of the mean."""
    a, b = np.asarray(seg_a), np.asarray(seg_b)
    scores = {}
    for lab in labels:
        in_a, in_b = a == lab, b == lab
        denom = int(in_a.sum()) + int(in_b.sum())
        scores[int(lab)] = 2 * int((in_a & in_b).sum()) / denom if denom else float("nan")
    present = [s for s in scores.values() if not np.isnan(s)]
    return scores, float(np.mean(present)) if present else float("nan")
