"""Dice + focal loss, summed over deep-supervision levels with weights 1/2**i."""

from __future__ import annotations

from typing import Sequence

import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field

FOCAL_EPS = 1e-7


class LossConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    focal_gamma: float = Field(2.0, ge=0)
    dice_smooth: float = Field(1e-5, gt=0)
    include_background: bool = False
    dice_batch: bool = True
    num_ds_levels: int = Field(4, ge=1)

    def level_weight(self, i: int) -> float:
        return 2.0**-i


def _check_shapes(probs: torch.Tensor, target: torch.Tensor) -> None:
    if probs.shape != target.shape:
        raise ValueError(f"prediction shape {tuple(probs.shape)} != target shape {tuple(target.shape)}")
    if probs.ndim < 3:
        raise ValueError("expected (N, C, *spatial) tensors")


def one_hot(labels: torch.Tensor, num_classes: int) -> torch.Tensor:
    """(N, *spatial) or (N, 1, *spatial) integer labels -> (N, C, *spatial) float one-hot."""
    if labels.ndim == 5 and labels.shape[1] == 1:
        labels = labels[:, 0]
    oh = F.one_hot(labels.long(), num_classes)
    return oh.movedim(-1, 1).to(torch.get_default_dtype())


def soft_dice_loss(probs: torch.Tensor, target: torch.Tensor, cfg: LossConfig | None = None) -> torch.Tensor:
    """``1 - (2 sum(p t) + s) / (sum p + sum t + s)`` averaged over included classes.

    With ``dice_batch`` the sums run over batch and space jointly; otherwise per
    sample, then averaged.
    """
    cfg = cfg or LossConfig()
    _check_shapes(probs, target)
    target = target.to(probs.dtype)
    if not cfg.include_background:
        if probs.shape[1] < 2:
            raise ValueError("include_background=False needs at least two classes")
        probs, target = probs[:, 1:], target[:, 1:]
    spatial = tuple(range(2, probs.ndim))
    dims = (0,) + spatial if cfg.dice_batch else spatial
    inter = (probs * target).sum(dims)
    denom = probs.sum(dims) + target.sum(dims)
    s = cfg.dice_smooth
    return (1.0 - (2.0 * inter + s) / (denom + s)).mean()


def focal_loss(probs: torch.Tensor, target: torch.Tensor, cfg: LossConfig | None = None) -> torch.Tensor:
    """Mean over voxels of ``-(1 - p_t)**gamma * log(p_t)``; ``p_t`` is clamped to [eps, 1 - eps]."""
    cfg = cfg or LossConfig()
    _check_shapes(probs, target)
    p_t = (probs * target.to(probs.dtype)).sum(1).clamp(FOCAL_EPS, 1.0 - FOCAL_EPS)
    return (-((1.0 - p_t) ** cfg.focal_gamma) * torch.log(p_t)).mean()


def combined_loss(probs, target, cfg: LossConfig | None = None) -> torch.Tensor:
    cfg = cfg or LossConfig()
    return soft_dice_loss(probs, target, cfg) + focal_loss(probs, target, cfg)


def downsize_target(target: torch.Tensor, factor: int) -> torch.Tensor:
    """Nearest-neighbour label downsizing by an integer factor (takes every ``factor``-th voxel)."""
    factor = int(factor)
    if factor < 1:
        raise ValueError("factor must be >= 1")
    if factor == 1:
        return target
    for n in target.shape[-3:]:
        if n % factor:
            raise ValueError(f"target spatial dims {tuple(target.shape[-3:])} not divisible by {factor}")
    return target[..., ::factor, ::factor, ::factor]


def deep_supervision_loss(
    outputs: Sequence[torch.Tensor], target: torch.Tensor, cfg: LossConfig | None = None
) -> torch.Tensor:
    """Sum over levels ``i`` of ``2**-i * (dice + focal)`` at that level's resolution.

    ``outputs[i]`` are logits at scale ``1/2**i``; ``target`` holds integer labels
    at full resolution, shaped (N, X, Y, Z) or (N, 1, X, Y, Z).
    """
    cfg = cfg or LossConfig()
    if len(outputs) != cfg.num_ds_levels:
        raise ValueError(f"expected {cfg.num_ds_levels} deep-supervision outputs, got {len(outputs)}")
    if target.ndim == 5 and target.shape[1] == 1:
        target = target[:, 0]
    full = tuple(target.shape[-3:])
    total = outputs[0].new_zeros(())
    for i, logits in enumerate(outputs):
        factor = 2**i
        expected = tuple(n // factor for n in full)
        if tuple(logits.shape[-3:]) != expected:
            raise ValueError(f"level {i} logits have spatial shape {tuple(logits.shape[-3:])}, expected {expected}")
        probs = torch.softmax(logits, dim=1)
        tgt = one_hot(downsize_target(target, factor), logits.shape[1]).to(probs.dtype)
        total = total + cfg.level_weight(i) * combined_loss(probs, tgt, cfg)
    return total
