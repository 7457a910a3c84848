"""Tumour-signal reduction and the eight hrT2 augmentations.

Random draws come from numpy's Philox4x32-10 counter-based generator keyed
through ``SeedSequence([seed, *stream])``, so one spec seed can be split into
independent per-case streams (``stream=(case_index,)``) and replayed exactly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
from scipy import ndimage

from .volume import LabelVolume, ShapeError, Volume

KINDS = ("rotate", "noise", "scale", "translate", "contrast", "flip_x", "flip_y", "flip_z")
SPATIAL_KINDS = frozenset({"rotate", "scale", "translate", "flip_x", "flip_y", "flip_z"})
FLIP_AXES = {"flip_x": 0, "flip_y": 1, "flip_z": 2}

MAX_ROTATION_DEGREES = 20.0

DEFAULT_PARAMS: dict[str, dict[str, Any]] = {
    "rotate": {"max_degrees": MAX_ROTATION_DEGREES},
    "noise": {"sigma_fraction": 0.1},
    "scale": {"factor_range": (0.9, 1.1)},
    "translate": {"offset_range": (-10, 10)},
    "contrast": {"gamma_range": (0.7, 1.5), "gain_range": (0.75, 1.25)},
    "flip_x": {},
    "flip_y": {},
    "flip_z": {},
}


class InvalidKindError(ValueError):
    pass


@dataclass(frozen=True)
class AugmentationSpec:
    kind: str
    seed: int = 0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidKindError(f"unknown augmentation kind {self.kind!r}; expected one of {KINDS}")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        unknown = set(self.params) - set(DEFAULT_PARAMS[self.kind]) - {"angle", "factor", "offset", "gamma", "gain"}
        if unknown:
            raise ValueError(f"unknown parameters for {self.kind}: {sorted(unknown)}")
        merged = {**DEFAULT_PARAMS[self.kind], **self.params}
        merged = {k: tuple(v) if isinstance(v, list) else v for k, v in merged.items()}
        if self.kind == "rotate" and not 0 <= merged["max_degrees"] <= MAX_ROTATION_DEGREES:
            raise ValueError(f"rotate max_degrees must lie in [0, {MAX_ROTATION_DEGREES}]")
        object.__setattr__(self, "params", merged)

    @property
    def spatial(self) -> bool:
        return self.kind in SPATIAL_KINDS

    def to_dict(self) -> dict:
        return {"kind": self.kind, "seed": int(self.seed), "params": _jsonable(self.params)}

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentationSpec":
        return cls(d["kind"], int(d.get("seed", 0)), dict(d.get("params", {})))


def _jsonable(params: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in sorted(params.items())}


def default_specs(seed: int = 0) -> list[AugmentationSpec]:
    """One spec per kind, each with its own seed derived from ``seed``."""
    return [AugmentationSpec(kind, seed=seed + i) for i, kind in enumerate(KINDS)]


def make_rng(seed: int, stream: Sequence[int] = ()) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, stream)])))


def reduce_tumor_signal(vol: Volume, lbl: LabelVolume, factor: float = 0.5) -> Volume:
    """Scale intensities inside the VS label (class 1) by ``factor``."""
    if vol.dims != lbl.dims:
        raise ShapeError(f"image {vol.dims} and label {lbl.dims} differ in shape")
    if not 0 < factor <= 1:
        raise ValueError(f"factor must lie in (0, 1], got {factor}")
    data = vol.data.copy()
    tumour = lbl.data == 1
    data[tumour] = (data[tumour].astype(np.float64) * factor).astype(np.float32)
    return vol.replace(data=data)


def draw_params(spec: AugmentationSpec, stream: Sequence[int] = ()) -> dict:
    """Concrete transform parameters for one application of ``spec``.

    Fixed values in ``spec.params`` (``angle``, ``factor``, ``offset``,
    ``gamma``, ``gain``) override the random draw.
    """
    rng = make_rng(spec.seed, stream)
    p = spec.params
    if spec.kind == "rotate":
        m = float(p["max_degrees"])
        angle = p.get("angle", rng.uniform(-m, m) if m > 0 else 0.0)
        return {"angle": float(angle)}
    if spec.kind == "scale":
        lo, hi = p["factor_range"]
        return {"factor": float(p.get("factor", rng.uniform(lo, hi)))}
    if spec.kind == "translate":
        lo, hi = p["offset_range"]
        offset = p.get("offset", rng.integers(int(lo), int(hi), size=3, endpoint=True))
        return {"offset": tuple(float(o) for o in offset)}
    if spec.kind == "contrast":
        g0, g1 = p["gamma_range"]
        k0, k1 = p["gain_range"]
        gamma = p.get("gamma", rng.uniform(g0, g1))
        gain = p.get("gain", rng.uniform(k0, k1))
        return {"gamma": float(gamma), "gain": float(gain)}
    if spec.kind == "noise":
        # noise needs the generator itself, handed over after the sigma draw
        return {"sigma_fraction": float(p["sigma_fraction"]), "rng": rng}
    return {}


def _inverse_map(kind: str, params: dict, dims) -> tuple[np.ndarray, np.ndarray]:
    """Matrix A and offset b so that output voxel o samples input A @ o + b."""
    centre = (np.asarray(dims, dtype=np.float64) - 1) / 2
    if kind == "rotate":
        t = math.radians(params["angle"])
        c, s = math.cos(t), math.sin(t)
        # output = R(t) (input - centre) + centre, about the z axis
        a = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
    elif kind == "scale":
        a = np.eye(3) / params["factor"]
    elif kind == "translate":
        return np.eye(3), -np.asarray(params["offset"], dtype=np.float64)
    else:
        raise InvalidKindError(kind)
    return a, centre - a @ centre


def _sample_coords(a: np.ndarray, b: np.ndarray, dims) -> np.ndarray:
    grid = np.indices(dims, dtype=np.float64).reshape(3, -1)
    return (a @ grid + b[:, None]).reshape(3, *dims)


def _warp_image(data: np.ndarray, kind: str, params: dict, order: int = 3) -> np.ndarray:
    a, b = _inverse_map(kind, params, data.shape)
    coords = _sample_coords(a, b, data.shape)
    return ndimage.map_coordinates(data.astype(np.float64), coords, order=order, mode="constant", cval=0.0)


def _warp_label(data: np.ndarray, kind: str, params: dict) -> np.ndarray:
    a, b = _inverse_map(kind, params, data.shape)
    coords = _sample_coords(a, b, data.shape)
    # nearest with exact ties to the lower index; outside the grid -> 0
    idx = np.ceil(coords - 0.5).astype(np.intp)
    inside = np.ones(data.shape, dtype=bool)
    for axis, n in enumerate(data.shape):
        inside &= (idx[axis] >= 0) & (idx[axis] < n)
        np.clip(idx[axis], 0, n - 1, out=idx[axis])
    out = data[idx[0], idx[1], idx[2]]
    out[~inside] = 0
    return out


def apply_augmentation(vol: Volume, spec: AugmentationSpec, stream: Sequence[int] = ()) -> Volume:
    params = draw_params(spec, stream)
    data = vol.data
    if spec.kind in FLIP_AXES:
        out = np.flip(data, axis=FLIP_AXES[spec.kind])
    elif spec.kind in SPATIAL_KINDS:
        out = _warp_image(data, spec.kind, params)
    elif spec.kind == "noise":
        sigma = params["sigma_fraction"] * float(data.astype(np.float64).std())
        out = data.astype(np.float64) + params["rng"].normal(0.0, 1.0, size=data.shape) * sigma
    else:  # contrast, expects z-scored input
        v = data.astype(np.float64)
        out = params["gain"] * np.sign(v) * np.abs(v) ** params["gamma"]
    out = np.asarray(out, dtype=np.float32)
    if not np.isfinite(out).all():
        raise FloatingPointError(f"{spec.kind} augmentation produced non-finite values")
    return vol.replace(data=out)


def apply_spatial_to_label(lbl: LabelVolume, spec: AugmentationSpec, stream: Sequence[int] = ()) -> LabelVolume:
    """Same geometry as :func:`apply_augmentation`, nearest-neighbour sampled."""
    if not spec.spatial:
        raise InvalidKindError(f"{spec.kind} is an intensity augmentation and cannot be applied to labels")
    params = draw_params(spec, stream)
    if spec.kind in FLIP_AXES:
        out = np.flip(lbl.data, axis=FLIP_AXES[spec.kind])
    else:
        out = _warp_label(lbl.data, spec.kind, params)
    return lbl.replace(data=out)


def _check_specs(specs: Sequence[AugmentationSpec]) -> None:
    kinds = [s.kind for s in specs]
    if sorted(kinds) != sorted(KINDS):
        raise ValueError(f"expected each of the eight kinds exactly once, got {kinds}")


def expand_dataset(images: Sequence[Volume], specs: Sequence[AugmentationSpec]) -> list[Volume]:
    """Eight augmented copies per image, ordered image-major then by ``specs``.

    Image ``i`` draws from stream ``(i,)`` of each spec's seed, so outputs do
    not depend on how the work is scheduled.
    """
    _check_specs(specs)
    return [apply_augmentation(img, spec, stream=(i,)) for i, img in enumerate(images) for spec in specs]
