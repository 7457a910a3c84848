"""Connected components and largest-VS-component cleanup."""
from __future__ import annotations

import numpy as np
from scipy import ndimage

from .volume import LabelVolume

_STRUCTURES = {
    6: ndimage.generate_binary_structure(3, 1),
    26: ndimage.generate_binary_structure(3, 3),
}


def connected_components(mask, connectivity: int = 26) -> tuple[np.ndarray, list[int]]:
    """Label foreground components of a binary ``[x, y, z]`` mask.

    Labels run 1..n by decreasing size; equal sizes are ordered by the
    smallest x-fastest flat index (``x + nx * (y + ny * z)``) each contains.
    Returns the int32 label grid and the sizes in label order.
    """
    mask = np.asarray(mask)
    if mask.size and not np.isin(mask, (0, 1)).all():
        raise ValueError("mask values must be 0 or 1")
    if connectivity not in _STRUCTURES:
        raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")
    raw, n = ndimage.label(mask.astype(bool), structure=_STRUCTURES[connectivity])
    if n == 0:
        return np.zeros(mask.shape, dtype=np.int32), []

    # Fortran ravel gives x-fastest order
    flat = raw.ravel(order="F")
    sizes = np.bincount(flat, minlength=n + 1)[1:]
    fg = np.flatnonzero(flat)
    first = np.full(n + 1, flat.size, dtype=np.int64)
    np.minimum.at(first, flat[fg], fg)
    order = np.lexsort((first[1:], -sizes))  # primary key: size desc
    relabel = np.zeros(n + 1, dtype=np.int32)
    relabel[order + 1] = np.arange(1, n + 1, dtype=np.int32)
    return relabel[raw], [int(sizes[i]) for i in order]


def keep_largest_component(pred: LabelVolume, class_id: int = 1, connectivity: int = 26) -> LabelVolume:
    """Zero every ``class_id`` voxel outside its largest connected component."""
    mask = pred.data == class_id
    if not mask.any():
        return pred
    labels, _ = connected_components(mask, connectivity)
    data = pred.data.copy()
    data[mask & (labels != 1)] = 0
    return pred.replace(data=data)
