import gzip
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vsadapt.volume import (
    DimensionalityError,
    LabelVolume,
    NiftiFormatError,
    Orientation,
    ProbabilityMap,
    UnsupportedTypeError,
    ValidationError,
    Volume,
    read_nifti,
    read_probability_map,
    write_class_array,
    write_nifti,
    write_probability_map,
)


def hand_built(path, values, dims, datatype=16, bitpix=32, dtype="<f4", slope=0.0, inter=0.0,
               magic=b"n+1\x00", pixdim=(1.0, 1.0, 1.0), ndim=3):
    """A NIfTI-1 file assembled field by field, independent of the writer."""
    hdr = bytearray(348)
    struct.pack_into("<i", hdr, 0, 348)
    struct.pack_into("<8h", hdr, 40, ndim, *dims, *([1] * (7 - len(dims))))
    struct.pack_into("<2h", hdr, 70, datatype, bitpix)
    struct.pack_into("<8f", hdr, 76, 1.0, *pixdim, *([0.0] * (7 - len(pixdim))))
    struct.pack_into("<3f", hdr, 108, 352.0, slope, inter)
    hdr[344:348] = magic
    body = np.asarray(values, dtype=dtype).tobytes()
    path.write_bytes(bytes(hdr) + b"\x00" * 4 + body)
    return path


def test_minimal_float_file(tmp_path):
    f = hand_built(tmp_path / "a.nii", np.arange(8), (2, 2, 2))
    vol = read_nifti(f)
    assert isinstance(vol, Volume)
    assert vol.dims == (2, 2, 2)
    assert vol.spacing == (1.0, 1.0, 1.0)
    np.testing.assert_array_equal(vol.data.ravel(order="F"), np.arange(8))


def test_scl_slope_and_inter_applied(tmp_path):
    f = hand_built(tmp_path / "s.nii", [3], (1, 1, 1), datatype=4, bitpix=16, dtype="<i2", slope=2.0, inter=1.0)
    assert read_nifti(f).data[0, 0, 0] == 7.0


def test_two_file_magic_rejected(tmp_path):
    f = hand_built(tmp_path / "x.nii", np.arange(8), (2, 2, 2), magic=b"ni1\x00")
    with pytest.raises(UnsupportedTypeError):
        read_nifti(f)


def test_bad_magic_names_field(tmp_path):
    f = hand_built(tmp_path / "x.nii", np.arange(8), (2, 2, 2), magic=b"abcd")
    with pytest.raises(NiftiFormatError) as err:
        read_nifti(f)
    assert err.value.field == "magic"


def test_bad_sizeof_hdr(tmp_path):
    f = hand_built(tmp_path / "x.nii", np.arange(8), (2, 2, 2))
    raw = bytearray(f.read_bytes())
    struct.pack_into("<i", raw, 0, 540)
    f.write_bytes(bytes(raw))
    with pytest.raises(NiftiFormatError) as err:
        read_nifti(f)
    assert err.value.field == "sizeof_hdr"


def test_unsupported_datatype(tmp_path):
    f = hand_built(tmp_path / "d.nii", np.arange(8), (2, 2, 2), datatype=64, bitpix=64, dtype="<f8")
    with pytest.raises(UnsupportedTypeError):
        read_nifti(f)


def test_non_3d_rejected(tmp_path):
    f = hand_built(tmp_path / "4d.nii", np.arange(16), (2, 2, 2, 2), ndim=4)
    with pytest.raises(DimensionalityError):
        read_nifti(f)


def test_uint8_small_values_become_labels(tmp_path):
    f = hand_built(tmp_path / "l.nii", [0, 1, 2, 0, 1, 2, 0, 0], (2, 2, 2), datatype=2, bitpix=8, dtype="u1")
    assert isinstance(read_nifti(f), LabelVolume)


def test_int16_labels_normalised_to_uint8(tmp_path):
    f = hand_built(tmp_path / "l16.nii", [0, 1, 2, 0, 1, 2, 0, 0], (2, 2, 2), datatype=4, bitpix=16, dtype="<i2")
    lbl = read_nifti(f, as_label=True)
    assert isinstance(lbl, LabelVolume) and lbl.data.dtype == np.uint8


def test_label_written_as_uint8(tmp_path):
    lbl = LabelVolume(np.array([0, 1, 2, 1]).reshape(2, 2, 1))
    write_nifti(lbl, tmp_path / "l.nii")
    raw = (tmp_path / "l.nii").read_bytes()
    assert struct.unpack_from("<h", raw, 70)[0] == 2
    assert struct.unpack_from("<f", raw, 108)[0] == 352.0
    assert raw[344:348] == b"n+1\x00"


def test_flat_index_is_x_fastest(tmp_path):
    nx, ny, nz = 3, 4, 5
    x, y, z = np.indices((nx, ny, nz))
    ramp = (x + nx * (y + ny * z)).astype(np.float32)
    write_nifti(Volume(ramp), tmp_path / "r.nii")
    body = np.frombuffer((tmp_path / "r.nii").read_bytes()[352:], dtype="<f4")
    np.testing.assert_array_equal(body, np.arange(nx * ny * nz))
    np.testing.assert_array_equal(read_nifti(tmp_path / "r.nii").data, ramp)


def test_gzip_round_trip(tmp_path):
    vol = Volume(np.random.default_rng(0).normal(size=(4, 5, 6)), (0.5, 0.7, 2.0))
    write_nifti(vol, tmp_path / "v.nii.gz")
    assert (tmp_path / "v.nii.gz").read_bytes()[:2] == b"\x1f\x8b"
    assert read_nifti(tmp_path / "v.nii.gz").data.tobytes() == vol.data.tobytes()
    # reading must not depend on the suffix
    (tmp_path / "plain.nii").write_bytes(gzip.decompress((tmp_path / "v.nii.gz").read_bytes()))
    assert read_nifti(tmp_path / "plain.nii") == read_nifti(tmp_path / "v.nii.gz")


def test_orientation_preserved(tmp_path):
    orient = Orientation(qform_code=1, sform_code=2, quatern=(0.0, 0.5, 0.0), qoffset=(-90.0, 12.5, 3.0),
                         qfac=-1.0, srow=((0.5, 0, 0, -90.0), (0, 0.5, 0, 12.5), (0, 0, 1.5, 3.0)))
    vol = Volume(np.zeros((2, 2, 2)), (0.5, 0.5, 1.5), orient)
    write_nifti(vol, tmp_path / "o.nii")
    back = read_nifti(tmp_path / "o.nii")
    assert back.orientation == orient
    write_nifti(back, tmp_path / "o2.nii")
    assert (tmp_path / "o.nii").read_bytes() == (tmp_path / "o2.nii").read_bytes()


def test_invariants_enforced():
    with pytest.raises(ValidationError):
        Volume(np.array([[[np.nan]]]))
    with pytest.raises(ValidationError):
        Volume(np.zeros((2, 2, 2)), (1.0, 0.0, 1.0))
    with pytest.raises(ValidationError):
        LabelVolume(np.full((2, 2, 2), 3))
    with pytest.raises(ValidationError):
        ProbabilityMap(np.full((3, 2, 2, 2), 0.3))


def test_volume_is_immutable():
    vol = Volume(np.zeros((2, 2, 2)))
    with pytest.raises(ValueError):
        vol.data[0, 0, 0] = 1


def test_integer_dtype_requires_exact_values(tmp_path):
    with pytest.raises(ValueError):
        write_nifti(Volume(np.full((2, 2, 2), 0.5)), tmp_path / "x.nii", dtype=np.int16)


def test_probability_map_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    raw = rng.uniform(size=(3, 4, 3, 2))
    pm = ProbabilityMap(raw / raw.sum(axis=0), (1.0, 1.0, 2.0))
    write_probability_map(pm, tmp_path / "p.nii.gz")
    back = read_probability_map(tmp_path / "p.nii.gz")
    assert back.num_classes == 3 and back.dims == (4, 3, 2)
    np.testing.assert_array_equal(back.data, pm.data)


def test_bad_probability_sum_rejected(tmp_path):
    write_class_array(np.full((3, 2, 2, 2), 0.8 / 3), (1, 1, 1), tmp_path / "bad.nii")
    with pytest.raises(ValidationError):
        read_probability_map(tmp_path / "bad.nii")


@given(
    dims=st.tuples(*[st.integers(1, 6)] * 3),
    spacing=st.tuples(*[st.floats(0.05, 8.0)] * 3),
    seed=st.integers(0, 2**32 - 1),
)
def test_random_spacing_round_trip(tmp_path_factory, dims, spacing, seed):
    path = tmp_path_factory.mktemp("rt") / "v.nii"
    data = np.random.default_rng(seed).normal(scale=100, size=dims)
    vol = Volume(data, spacing)
    write_nifti(vol, path)
    back = read_nifti(path)
    assert back.dims == vol.dims
    assert back.data.tobytes() == vol.data.tobytes()
    assert back.spacing == tuple(float(np.float32(s)) for s in spacing)
