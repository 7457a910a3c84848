"""Averaging probability maps and turning them into label volumes."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .volume import LabelVolume, ProbabilityMap, ShapeError


def ensemble_probs(maps: Sequence[ProbabilityMap], weights: Sequence[float] | None = None) -> ProbabilityMap:
    """Voxelwise weighted arithmetic mean, renormalised so classes sum to 1."""
    if not maps:
        raise ValueError("need at least one probability map")
    ref = maps[0]
    for m in maps[1:]:
        if m.data.shape != ref.data.shape:
            raise ShapeError(f"probability maps differ in shape: {ref.data.shape} vs {m.data.shape}")
    w = np.ones(len(maps)) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (len(maps),):
        raise ValueError(f"expected {len(maps)} weights, got {w.shape[0] if w.ndim else 0}")
    if (w < 0).any() or w.sum() <= 0:
        raise ValueError("weights must be non-negative with a positive sum")
    w = w / w.sum()
    acc = np.zeros(ref.data.shape, dtype=np.float64)
    for wi, m in zip(w, maps):
        if wi:
            acc += wi * m.data
    acc /= acc.sum(axis=0, keepdims=True)
    return ProbabilityMap(acc.astype(np.float32), ref.spacing, ref.orientation)


def argmax_labels(pm: ProbabilityMap) -> LabelVolume:
    """Most probable class per voxel; exact ties go to the lowest class index."""
    if pm.num_classes > 3:
        raise ValueError("label volumes hold at most 3 classes")
    # np.argmax returns the first maximum, which is the tie rule we want
    return LabelVolume(np.argmax(pm.data, axis=0).astype(np.uint8), pm.spacing, pm.orientation)
