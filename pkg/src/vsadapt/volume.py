"""Volume types and single-file NIfTI-1 I/O.

Arrays are indexed ``data[x, y, z]``; on disk the voxel order is x-fastest,
so voxel ``(x, y, z)`` lives at flat index ``x + nx * (y + ny * z)``.
"""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

HEADER_SIZE = 348
VOX_OFFSET = 352

DT_UINT8 = 2
DT_INT16 = 4
DT_FLOAT32 = 16
DT_UINT16 = 512

_DTYPES = {
    DT_UINT8: np.dtype("u1"),
    DT_INT16: np.dtype("i2"),
    DT_FLOAT32: np.dtype("f4"),
    DT_UINT16: np.dtype("u2"),
}
_CODES = {np.dtype(v).str[1:]: k for k, v in _DTYPES.items()}

LABEL_CLASSES = (0, 1, 2)


class NiftiError(ValueError):
    pass


class NiftiFormatError(NiftiError):
    """Malformed header; ``field`` names the offending header entry."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class UnsupportedTypeError(NiftiError):
    pass


class DimensionalityError(NiftiError):
    pass


class ValidationError(ValueError):
    pass


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class Orientation:
    """Orientation fields carried through read/write untouched.

    Geometry in this package uses spacing only; these values are never
    interpreted, just preserved.
    """

    qform_code: int = 0
    sform_code: int = 0
    quatern: tuple[float, float, float] = (0.0, 0.0, 0.0)
    qoffset: tuple[float, float, float] = (0.0, 0.0, 0.0)
    qfac: float = 1.0
    srow: tuple[tuple[float, ...], ...] = (
        (0.0, 0.0, 0.0, 0.0),
        (0.0, 0.0, 0.0, 0.0),
        (0.0, 0.0, 0.0, 0.0),
    )
    xyzt_units: int = 2  # mm


def _check_spacing(spacing) -> tuple[float, float, float]:
    sp = tuple(float(s) for s in spacing)
    if len(sp) != 3:
        raise ValidationError(f"spacing must have 3 components, got {len(sp)}")
    if not all(np.isfinite(s) and s > 0 for s in sp):
        raise ValidationError(f"spacing must be positive and finite, got {sp}")
    return sp


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Volume:
    """3D float32 intensity grid with voxel spacing in mm."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    orientation: Orientation = field(default_factory=Orientation)

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float32, copy=True)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValidationError(f"volume data must be a non-empty 3D array, got shape {data.shape}")
        if not np.isfinite(data).all():
            raise ValidationError("volume contains non-finite intensities")
        object.__setattr__(self, "data", _freeze(data))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    def replace(self, data=None, spacing=None) -> "Volume":
        return Volume(
            self.data if data is None else data,
            self.spacing if spacing is None else spacing,
            self.orientation,
        )

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return (
            self.spacing == other.spacing
            and self.data.shape == other.data.shape
            and np.array_equal(self.data.view(np.uint32), other.data.view(np.uint32))
        )


@dataclass(frozen=True, eq=False)
class LabelVolume:
    """3D uint8 class grid: 0 background, 1 VS, 2 cochlea."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    orientation: Orientation = field(default_factory=Orientation)

    def __post_init__(self):
        raw = np.asarray(self.data)
        if raw.ndim != 3 or min(raw.shape) < 1:
            raise ValidationError(f"label data must be a non-empty 3D array, got shape {raw.shape}")
        if raw.size and (raw.min() < 0 or raw.max() > 2):
            raise ValidationError("label values must be in {0, 1, 2}")
        if np.issubdtype(raw.dtype, np.floating) and not np.array_equal(raw, np.round(raw)):
            raise ValidationError("label values must be integers")
        data = np.array(raw, dtype=np.uint8, copy=True)
        object.__setattr__(self, "data", _freeze(data))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    def replace(self, data=None, spacing=None) -> "LabelVolume":
        return LabelVolume(
            self.data if data is None else data,
            self.spacing if spacing is None else spacing,
            self.orientation,
        )

    def __eq__(self, other):
        if not isinstance(other, LabelVolume):
            return NotImplemented
        return self.spacing == other.spacing and np.array_equal(self.data, other.data)


@dataclass(frozen=True, eq=False)
class ProbabilityMap:
    """Per-class soft predictions, ``data[c, x, y, z]`` (class-major on disk)."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    orientation: Orientation = field(default_factory=Orientation)
    tolerance: float = 1e-4

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float32, copy=True)
        if data.ndim != 4 or min(data.shape) < 1:
            raise ValidationError(f"probability data must be (C, nx, ny, nz), got shape {data.shape}")
        if not np.isfinite(data).all():
            raise ValidationError("probability map contains non-finite values")
        if data.min() < 0 or data.max() > 1:
            raise ValidationError("probabilities must lie in [0, 1]")
        sums = data.sum(axis=0, dtype=np.float64)
        worst = float(np.abs(sums - 1.0).max())
        if worst > self.tolerance:
            raise ValidationError(f"class probabilities do not sum to 1 (max deviation {worst:.3g})")
        object.__setattr__(self, "data", _freeze(data))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def num_classes(self) -> int:
        return int(self.data.shape[0])

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape[1:])


AnyVolume = Union[Volume, LabelVolume]


# -- header codec -----------------------------------------------------------

def _open_bytes(path) -> bytes:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_header(raw: bytes) -> dict:
    if len(raw) < HEADER_SIZE:
        raise NiftiFormatError("sizeof_hdr", f"file shorter than {HEADER_SIZE} bytes")
    for endian in "<>":
        if struct.unpack_from(endian + "i", raw, 0)[0] == HEADER_SIZE:
            break
    else:
        raise NiftiFormatError("sizeof_hdr", f"expected {HEADER_SIZE}")
    e = endian

    magic = raw[344:348]
    if magic == b"ni1\x00":
        raise UnsupportedTypeError("two-file NIfTI (magic 'ni1') is not supported; use single-file .nii")
    if magic != b"n+1\x00":
        raise NiftiFormatError("magic", f"expected 'n+1\\0', got {magic!r}")

    dim = struct.unpack_from(e + "8h", raw, 40)
    pixdim = struct.unpack_from(e + "8f", raw, 76)
    datatype, bitpix = struct.unpack_from(e + "2h", raw, 70)
    vox_offset, scl_slope, scl_inter = struct.unpack_from(e + "3f", raw, 108)
    xyzt_units = raw[123]
    qform_code, sform_code = struct.unpack_from(e + "2h", raw, 252)
    quat = struct.unpack_from(e + "6f", raw, 256)
    srow = struct.unpack_from(e + "12f", raw, 280)

    if not 1 <= dim[0] <= 7:
        raise NiftiFormatError("dim", f"dim[0]={dim[0]} out of range")
    if any(d < 1 for d in dim[1 : dim[0] + 1]):
        raise NiftiFormatError("dim", f"non-positive extent in {dim[1:dim[0] + 1]}")
    if datatype not in _DTYPES:
        raise UnsupportedTypeError(f"datatype code {datatype} not supported (uint8, int16, uint16, float32 only)")
    if bitpix != _DTYPES[datatype].itemsize * 8:
        raise NiftiFormatError("bitpix", f"{bitpix} inconsistent with datatype {datatype}")
    if not np.isfinite(vox_offset) or vox_offset < VOX_OFFSET:
        raise NiftiFormatError("vox_offset", f"{vox_offset} < {VOX_OFFSET}")

    orientation = Orientation(
        qform_code=qform_code,
        sform_code=sform_code,
        quatern=tuple(quat[:3]),
        qoffset=tuple(quat[3:]),
        qfac=pixdim[0] if pixdim[0] in (1.0, -1.0) else 1.0,
        srow=(tuple(srow[0:4]), tuple(srow[4:8]), tuple(srow[8:12])),
        xyzt_units=xyzt_units,
    )
    return dict(
        endian=e,
        shape=tuple(dim[1 : dim[0] + 1]),
        pixdim=pixdim,
        dtype=_DTYPES[datatype].newbyteorder(e),
        datatype=datatype,
        vox_offset=int(vox_offset),
        scl_slope=scl_slope,
        scl_inter=scl_inter,
        orientation=orientation,
    )


def _read_array(path) -> tuple[dict, np.ndarray]:
    raw = _open_bytes(path)
    hdr = _parse_header(raw)
    count = int(np.prod(hdr["shape"]))
    nbytes = count * hdr["dtype"].itemsize
    start = hdr["vox_offset"]
    if len(raw) < start + nbytes:
        raise NiftiFormatError("vox_offset", f"data truncated: need {nbytes} bytes after offset {start}")
    flat = np.frombuffer(raw, dtype=hdr["dtype"], count=count, offset=start)
    arr = flat.reshape(hdr["shape"], order="F")
    return hdr, arr


def _apply_scaling(hdr: dict, arr: np.ndarray) -> tuple[np.ndarray, bool]:
    slope, inter = hdr["scl_slope"], hdr["scl_inter"]
    if slope == 0 or not np.isfinite(slope) or (slope == 1 and inter == 0):
        return arr, False
    inter = inter if np.isfinite(inter) else 0.0
    return arr.astype(np.float64) * slope + inter, True


def _spacing(hdr: dict, ndim: int = 3) -> tuple[float, ...]:
    sp = tuple(abs(float(p)) for p in hdr["pixdim"][1 : ndim + 1])
    for i, s in enumerate(sp):
        if not (np.isfinite(s) and s > 0):
            raise NiftiFormatError("pixdim", f"pixdim[{i + 1}]={s} must be positive")
    return sp


def read_nifti(path, as_label: bool | None = None) -> AnyVolume:
    """Read a 3D single-file NIfTI-1 (optionally gzipped).

    With ``as_label=None`` a uint8 file whose values are all <= 2 comes back as
    a LabelVolume, anything else as a Volume. ``as_label=True`` forces a label
    read (int16/uint16 label files are normalised to uint8).
    """
    hdr, arr = _read_array(path)
    if len(hdr["shape"]) != 3:
        raise DimensionalityError(f"expected a 3D image, got dim[0]={len(hdr['shape'])}")
    data, scaled = _apply_scaling(hdr, arr)
    spacing = _spacing(hdr)
    orient = hdr["orientation"]
    if as_label is None:
        as_label = hdr["datatype"] == DT_UINT8 and not scaled and (data.size == 0 or data.max() <= 2)
    if as_label:
        return LabelVolume(np.asarray(data), spacing, orient)
    return Volume(np.asarray(data, dtype=np.float32), spacing, orient)


def _build_header(shape, spacing, datatype, orientation: Orientation, intent_code: int = 0) -> bytes:
    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    hdr[38] = ord("r")
    dim = [len(shape), *shape] + [1] * (7 - len(shape))
    struct.pack_into("<8h", hdr, 40, *dim)
    struct.pack_into("<h", hdr, 68, intent_code)
    struct.pack_into("<2h", hdr, 70, datatype, _DTYPES[datatype].itemsize * 8)
    pixdim = [orientation.qfac, *spacing] + [1.0] * (7 - len(spacing))
    struct.pack_into("<8f", hdr, 76, *pixdim)
    struct.pack_into("<3f", hdr, 108, float(VOX_OFFSET), 1.0, 0.0)
    hdr[123] = orientation.xyzt_units & 0xFF
    struct.pack_into("<2h", hdr, 252, orientation.qform_code, orientation.sform_code)
    struct.pack_into("<6f", hdr, 256, *orientation.quatern, *orientation.qoffset)
    struct.pack_into("<12f", hdr, 280, *[v for row in orientation.srow for v in row])
    hdr[344:348] = b"n+1\x00"
    return bytes(hdr)


def _write_array(path, arr: np.ndarray, spacing, datatype: int, orientation: Orientation, intent_code: int = 0):
    header = _build_header(arr.shape, spacing, datatype, orientation, intent_code)
    body = np.asarray(arr, dtype=_DTYPES[datatype].newbyteorder("<")).tobytes(order="F")
    payload = header + b"\x00" * (VOX_OFFSET - HEADER_SIZE) + body
    path = Path(path)
    if path.name.endswith(".gz"):
        payload = gzip.compress(payload, mtime=0)
    with open(path, "wb") as fh:
        fh.write(payload)


def _pick_datatype(vol: AnyVolume, dtype) -> int:
    if isinstance(vol, LabelVolume):
        if dtype is not None and np.dtype(dtype) != np.uint8:
            raise UnsupportedTypeError("labels are always written as uint8")
        return DT_UINT8
    if dtype is None:
        return DT_FLOAT32
    dt = np.dtype(dtype)
    code = _CODES.get(dt.str[1:])
    if code is None:
        raise UnsupportedTypeError(f"cannot write dtype {dt}")
    if code != DT_FLOAT32:
        info = np.iinfo(dt)
        d = vol.data
        if not np.array_equal(d, np.round(d)) or d.min() < info.min or d.max() > info.max:
            raise ValueError(f"volume intensities are not exactly representable as {dt}")
    return code


def write_nifti(vol: AnyVolume, path, dtype=None) -> None:
    """Write ``vol`` as single-file NIfTI-1 (gzip when the name ends in .gz).

    Volumes are stored as float32 unless ``dtype`` asks for an integer type
    that represents every intensity exactly; labels are always uint8.
    """
    code = _pick_datatype(vol, dtype)
    _write_array(path, vol.data, vol.spacing, code, vol.orientation)


def read_probability_map(path, tolerance: float = 1e-4) -> ProbabilityMap:
    """Read a 4D NIfTI whose last axis indexes classes."""
    hdr, arr = _read_array(path)
    if len(hdr["shape"]) != 4:
        raise DimensionalityError(f"probability maps are 4D, got dim[0]={len(hdr['shape'])}")
    data, _ = _apply_scaling(hdr, arr)
    data = np.moveaxis(np.asarray(data, dtype=np.float32), 3, 0)
    return ProbabilityMap(data, _spacing(hdr), hdr["orientation"], tolerance)


def write_probability_map(pm: ProbabilityMap, path) -> None:
    write_class_array(pm.data, pm.spacing, path, pm.orientation)


def write_class_array(data: np.ndarray, spacing, path, orientation: Orientation | None = None) -> None:
    """Write any (C, nx, ny, nz) float array as 4D NIfTI, class axis last."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim != 4:
        raise DimensionalityError(f"expected (C, nx, ny, nz), got shape {data.shape}")
    _write_array(path, np.moveaxis(data, 0, 3), _check_spacing(spacing), DT_FLOAT32,
                 orientation or Orientation())
