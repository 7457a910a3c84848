"""Soft dice, binary cross-entropy, their combination and deep-supervision weighting.

Every loss returns ``LossResult(value, gradient)`` where ``gradient`` has the
shape of the predictions and treats each ``p[c, i]`` as an independent input.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .volume import LabelVolume, ProbabilityMap, ShapeError

LOG_CLAMP = 1e-7


class LossResult(NamedTuple):
    value: float
    gradient: np.ndarray


@dataclass(frozen=True, eq=False)
class LossInput:
    """Predictions ``p`` and one-hot targets ``g``, both shaped (C, ...)."""

    predictions: np.ndarray
    targets: np.ndarray
    epsilon: float = 1.0

    def __post_init__(self):
        p = np.asarray(self.predictions, dtype=np.float64)
        g = np.asarray(self.targets, dtype=np.float64)
        if p.shape != g.shape:
            raise ShapeError(f"predictions {p.shape} and targets {g.shape} differ")
        if p.ndim < 2:
            raise ShapeError("expected a leading class axis plus at least one voxel axis")
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if not np.isin(g, (0.0, 1.0)).all():
            raise ValueError("targets must be binary")
        # a single channel is a plain binary mask; otherwise exactly one class per voxel
        if g.shape[0] > 1 and not np.all(g.sum(axis=0) == 1):
            raise ValueError("targets must be one-hot along the class axis")
        object.__setattr__(self, "predictions", p)
        object.__setattr__(self, "targets", g)

    @property
    def num_classes(self) -> int:
        return self.predictions.shape[0]

    @classmethod
    def from_volumes(cls, pm: ProbabilityMap, lbl: LabelVolume, epsilon: float = 1.0) -> "LossInput":
        if pm.dims != lbl.dims:
            raise ShapeError(f"probability map {pm.dims} and label {lbl.dims} differ")
        return cls(pm.data, one_hot(lbl.data, pm.num_classes), epsilon)


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and labels.max() >= num_classes:
        raise ValueError(f"label value {labels.max()} >= num_classes {num_classes}")
    return (np.arange(num_classes).reshape(-1, *([1] * labels.ndim)) == labels[None]).astype(np.float64)


def _class_sums(x: np.ndarray) -> np.ndarray:
    # contiguous per-class rows -> numpy's pairwise summation, fixed order
    return np.ascontiguousarray(x.reshape(x.shape[0], -1)).sum(axis=1)


def dice_loss(inp: LossInput) -> LossResult:
    """``-2/C * sum_c (sum_i p g + eps) / (sum_i p + sum_i g + eps)``.

    With ``eps == 0`` a class absent from both p and g contributes a ratio of
    1 and no gradient.
    """
    p, g, eps = inp.predictions, inp.targets, inp.epsilon
    C = inp.num_classes
    inter = _class_sums(p * g)
    denom = _class_sums(p) + _class_sums(g) + eps
    absent = denom == 0
    safe = np.where(absent, 1.0, denom)
    ratio = np.where(absent, 1.0, (inter + eps) / safe)
    value = -2.0 / C * ratio.sum()

    shape = (C,) + (1,) * (p.ndim - 1)
    num = (inter + eps).reshape(shape)
    den = safe.reshape(shape)
    grad = -2.0 / C * (g * den - num) / den**2
    grad[absent] = 0.0
    return LossResult(float(value), grad)


def cross_entropy_loss(inp: LossInput, reduction: str = "mean") -> LossResult:
    """Binary cross-entropy applied per class and summed over classes and voxels.

    ``reduction="sum"`` gives the raw sum; ``"mean"`` divides by the voxel
    count (not by C). Predictions are clamped to ``[1e-7, 1 - 1e-7]``; the
    gradient is zero where the clamp is active.
    """
    p, g = inp.predictions, inp.targets
    pc = np.clip(p, LOG_CLAMP, 1 - LOG_CLAMP)
    terms = -g * np.log(pc) - (1 - g) * np.log(1 - pc)
    raw = float(np.ascontiguousarray(terms).ravel().sum())
    grad = -g / pc + (1 - g) / (1 - pc)
    grad[(p < LOG_CLAMP) | (p > 1 - LOG_CLAMP)] = 0.0
    if reduction == "sum":
        return LossResult(raw, grad)
    if reduction != "mean":
        raise ValueError(f"unknown reduction {reduction!r}")
    n = p[0].size
    return LossResult(raw / n, grad / n)


def combined_loss(inp: LossInput, weights: tuple[float, float] = (1.0, 1.0)) -> LossResult:
    w_dice, w_ce = weights
    if w_dice < 0 or w_ce < 0:
        raise ValueError("loss weights must be non-negative")
    d = dice_loss(inp)
    ce = cross_entropy_loss(inp)
    return LossResult(w_dice * d.value + w_ce * ce.value, w_dice * d.gradient + w_ce * ce.gradient)


def deep_supervision_weights(num_levels: int, exclude_deepest: bool = False) -> np.ndarray:
    """Weights proportional to ``2**-k`` (k = 0 at full resolution), summing to 1."""
    if num_levels < 1:
        raise ValueError("need at least one level")
    w = 0.5 ** np.arange(num_levels, dtype=np.float64)
    if exclude_deepest:
        if num_levels < 2:
            raise ValueError("cannot exclude the only level")
        w[-1] = 0.0
    return w / w.sum()


def deep_supervision_aggregate(losses_per_level: Sequence[float], num_levels: int,
                               exclude_deepest: bool = False) -> float:
    if len(losses_per_level) != num_levels:
        raise ValueError(f"got {len(losses_per_level)} losses for {num_levels} levels")
    w = deep_supervision_weights(num_levels, exclude_deepest)
    return float(np.dot(w, np.asarray(losses_per_level, dtype=np.float64)))


LOSSES = {
    "dice": dice_loss,
    "ce": cross_entropy_loss,
    "combined": combined_loss,
}
