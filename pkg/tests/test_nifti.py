import json
import struct
from pathlib import Path

import numpy as np
import pytest

from pemma import exceptions
from pemma.data import generate_phantom, read_nifti, write_nifti
from pemma.data.nifti import DT_INT16, parse_header
from pemma.exceptions import DimensionError, NiftiError, UnsupportedDatatypeError

CORPUS = Path(__file__).parent / "fixtures" / "nifti"
INDEX = json.loads((CORPUS / "index.json").read_text())


def _expected_grid():
    shape = tuple(INDEX["shape"])
    return np.arange(np.prod(shape), dtype=np.float64).reshape(shape) + INDEX["offset"]


def test_corpus_size():
    assert len(INDEX["files"]) >= 12
    assert all((CORPUS / name).exists() for name in INDEX["files"])


@pytest.mark.parametrize("name", sorted(n for n, i in INDEX["files"].items() if i["expect"] == "ok"))
def test_valid_fixture_parses(name):
    slope, inter = INDEX["files"][name]["scale"]
    vol = read_nifti(CORPUS / name)
    np.testing.assert_array_equal(vol.grid, (_expected_grid() * slope + inter).astype(np.float32))
    assert vol.spacing == tuple(INDEX["spacing"])


@pytest.mark.parametrize("name", sorted(n for n, i in INDEX["files"].items() if i["expect"] != "ok"))
def test_malformed_fixture_raises_typed_error(name):
    err = getattr(exceptions, INDEX["files"][name]["expect"])
    with pytest.raises(err):
        read_nifti(CORPUS / name)


def test_both_endian_headers_agree():
    le = parse_header((CORPUS / "le_float32.nii").read_bytes())
    be = parse_header((CORPUS / "be_float32.nii").read_bytes())
    assert (le["endian"], be["endian"]) == ("<", ">")
    assert {k: v for k, v in le.items() if k != "endian"} == {k: v for k, v in be.items() if k != "endian"}


@pytest.mark.parametrize("endian", ["<", ">"])
def test_writer_reader_roundtrip_float32(tmp_path, endian):
    case = generate_phantom(5)
    path = write_nifti(tmp_path / "ct.nii", case.ct, endian=endian)
    back = read_nifti(path)
    np.testing.assert_array_equal(back.grid, case.ct.grid)
    assert back.grid.dtype == np.float32 and back.spacing == case.ct.spacing


def test_writer_reader_roundtrip_int16_mask(tmp_path):
    mask = generate_phantom(6).mask.astype(np.int16)
    back = read_nifti(write_nifti(tmp_path / "m.nii", mask, datatype=DT_INT16), "mask")
    np.testing.assert_array_equal(back.grid, mask)


def test_non_cubic_axis_order(tmp_path):
    g = np.random.default_rng(0).normal(size=(3, 4, 5)).astype(np.float32)
    np.testing.assert_array_equal(read_nifti(write_nifti(tmp_path / "g.nii", g, spacing=(1, 2, 3))).grid, g)
    raw = (tmp_path / "g.nii").read_bytes()
    # first stored voxel after x is (1, 0, 0): column-major layout
    assert struct.unpack("<f", raw[356:360])[0] == g[1, 0, 0]


def test_writer_rejects_unsupported(tmp_path):
    with pytest.raises(DimensionError):
        write_nifti(tmp_path / "x.nii", np.zeros((2, 2)))
    with pytest.raises(UnsupportedDatatypeError):
        write_nifti(tmp_path / "x.nii", np.zeros((2, 2, 2)), datatype=2)


def test_errors_share_base_class():
    for name in ("BadMagicError", "UnsupportedDatatypeError", "DimensionError", "TruncatedPayloadError",
                 "CompressedFileError"):
        assert issubclass(getattr(exceptions, name), NiftiError)
