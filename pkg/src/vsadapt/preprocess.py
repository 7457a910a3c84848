"""Isotropic resampling, xy crop/pad and whole-volume z-scoring."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volume import LabelVolume, Volume

log = logging.getLogger(__name__)

# Width of the odd-reflection margin added before B-spline prefiltering. The
# cubic prefilter pole is |z| = 0.268, so the outer boundary's influence on
# the original samples decays to ~0.268**16 ~ 7e-10 of the signal scale.
_SPLINE_MARGIN = 16


class ConstantVolumeError(ValueError):
    pass


@dataclass(frozen=True)
class ResampleSpec:
    target_spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    image_order: int = 3
    label_mode: str = "nearest"

    def __post_init__(self):
        ts = tuple(float(s) for s in self.target_spacing)
        if len(ts) != 3 or not all(math.isfinite(s) and s > 0 for s in ts):
            raise ValueError(f"target_spacing must be 3 positive values, got {self.target_spacing}")
        if self.image_order not in (0, 1, 3):
            raise ValueError(f"image_order must be 0, 1 or 3, got {self.image_order}")
        if self.label_mode != "nearest":
            raise ValueError("only nearest-neighbour label resampling is supported")
        object.__setattr__(self, "target_spacing", ts)


def _round_half_away(x: float) -> int:
    return int(math.floor(abs(x) + 0.5)) * (1 if x >= 0 else -1)


def output_dims(dims, spacing, target_spacing) -> tuple[int, int, int]:
    """``round(n * s / t)`` per axis, half away from zero, clamped to >= 1."""
    out = []
    for axis, (n, s, t) in enumerate(zip(dims, spacing, target_spacing)):
        m = _round_half_away(n * s / t)
        if m < 1:
            log.warning("axis %d collapses to 0 voxels (n=%d, %.4g -> %.4g mm); clamping to 1", axis, n, s, t)
            m = 1
        out.append(m)
    return tuple(out)


def _axis_coords(n_out: int, s_in: float, t: float) -> np.ndarray:
    # voxel centres share the origin: output i sits at i*t mm, input j at j*s mm
    return np.arange(n_out, dtype=np.float64) * (t / s_in)


def _odd_pad(data: np.ndarray, margin: int) -> np.ndarray:
    pads = [(margin, margin) if n > 1 else (0, 0) for n in data.shape]
    return np.pad(data, pads, mode="reflect", reflect_type="odd"), [p[0] for p in pads]


def resample_image(vol: Volume, spec: ResampleSpec = ResampleSpec(), workers: int = 1) -> Volume:
    """Resample intensities onto ``spec.target_spacing``.

    For order 3 the volume is extended by point (odd) reflection about each
    edge sample, prefiltered, and evaluated with cubic B-splines. The odd
    extension keeps affine intensity fields exact right up to, and past, the
    last sample, so edges are neither darkened nor bent.
    """
    dims_out = output_dims(vol.dims, vol.spacing, spec.target_spacing)
    src = vol.data.astype(np.float64)
    order = spec.image_order
    axes = [_axis_coords(m, s, t) for m, s, t in zip(dims_out, vol.spacing, spec.target_spacing)]

    if order == 0:
        idx = [np.clip(np.ceil(a - 0.5).astype(np.intp), 0, n - 1) for a, n in zip(axes, vol.dims)]
        out = src[np.ix_(*idx)]
        return Volume(out.astype(np.float32), spec.target_spacing, vol.orientation)

    padded, offsets = _odd_pad(src, _SPLINE_MARGIN)
    coeffs = ndimage.spline_filter(padded, order=order, mode="mirror") if order > 1 else padded
    axes = [a + off for a, off in zip(axes, offsets)]
    gx, gy = np.meshgrid(axes[0], axes[1], indexing="ij")

    def _slab(zs: np.ndarray) -> np.ndarray:
        nz = len(zs)
        coords = np.empty((3, gx.shape[0], gx.shape[1], nz))
        coords[0] = gx[..., None]
        coords[1] = gy[..., None]
        coords[2] = zs[None, None, :]
        return ndimage.map_coordinates(coeffs, coords, order=order, mode="mirror", prefilter=False)

    chunks = np.array_split(axes[2], max(1, min(workers, len(axes[2]))))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(_slab, chunks))
    else:
        parts = [_slab(c) for c in chunks]
    out = np.concatenate(parts, axis=2)
    return Volume(out.astype(np.float32), spec.target_spacing, vol.orientation)


def nearest_indices(n_in: int, s_in: float, n_out: int, t: float) -> np.ndarray:
    """Nearest input voxel per output voxel; exact ties go to the lower index."""
    c = _axis_coords(n_out, s_in, t)
    return np.clip(np.ceil(c - 0.5).astype(np.intp), 0, n_in - 1)


def resample_label(lbl: LabelVolume, spec: ResampleSpec = ResampleSpec()) -> LabelVolume:
    dims_out = output_dims(lbl.dims, lbl.spacing, spec.target_spacing)
    idx = [nearest_indices(n, s, m, t) for n, s, m, t in zip(lbl.dims, lbl.spacing, dims_out, spec.target_spacing)]
    return LabelVolume(lbl.data[np.ix_(*idx)], spec.target_spacing, lbl.orientation)


def _crop_pad_axis(n: int, target: int) -> tuple[slice, tuple[int, int]]:
    if n >= target:
        lo = (n - target) // 2
        return slice(lo, lo + target), (0, 0)
    lo = (target - n) // 2
    return slice(0, n), (lo, target - n - lo)


def crop_or_pad_xy(vol, target=(256, 256)):
    """Centre-crop or zero-pad the x and y axes to ``target``; z is untouched.

    Odd excess goes to the high side, both when cropping and padding.
    """
    sx, px = _crop_pad_axis(vol.dims[0], target[0])
    sy, py = _crop_pad_axis(vol.dims[1], target[1])
    data = np.pad(vol.data[sx, sy, :], (px, py, (0, 0)), mode="constant", constant_values=0)
    return vol.replace(data=data)


def normalize_3d(vol: Volume) -> Volume:
    """Z-score over the whole volume (population std)."""
    v = vol.data.astype(np.float64)
    if v.size < 2:
        raise ConstantVolumeError("normalisation needs at least 2 voxels")
    flat = v.ravel()
    # np.sum on a contiguous 1D array uses pairwise summation: deterministic
    mean = flat.sum() / flat.size
    var = np.square(flat - mean).sum() / flat.size
    std = math.sqrt(var)
    if std == 0 or not math.isfinite(std):
        raise ConstantVolumeError("volume has zero variance")
    return vol.replace(data=((v - mean) / std).astype(np.float32))


def preprocess(vol, spacing=(1.0, 1.0, 1.0), xy=(256, 256), normalize: bool = True, workers: int = 1):
    """Resample -> crop/pad -> (images only) normalise.

    Zeros introduced by padding are part of the normalisation statistics.
    """
    spec = ResampleSpec(tuple(spacing))
    if isinstance(vol, LabelVolume):
        out = resample_label(vol, spec)
        return crop_or_pad_xy(out, xy) if xy else out
    out = resample_image(vol, spec, workers=workers)
    if xy:
        out = crop_or_pad_xy(out, xy)
    return normalize_3d(out) if normalize else out
