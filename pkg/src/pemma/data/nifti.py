"""Minimal single-file NIfTI-1 reader and writer.

Accepted subset: magic ``n+1``, three dimensions, datatype float32 (16) or
int16 (4), either byte order, uncompressed.  Everything else raises a
:class:`~pemma.exceptions.NiftiError` subclass.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from pemma.data.types import Volume
from pemma.exceptions import (BadMagicError, CompressedFileError, DimensionError, NiftiError,
                              TruncatedPayloadError, UnsupportedDatatypeError)

HEADER_SIZE = 348
DEFAULT_VOX_OFFSET = 352
MAGIC_SINGLE = b"n+1\x00"
DT_INT16, DT_FLOAT32 = 4, 16
_DTYPES = {DT_INT16: ("i2", 16), DT_FLOAT32: ("f4", 32)}

# byte offsets of the fields the reader and writer touch
OFF_DIM = 40
OFF_DATATYPE = 70
OFF_BITPIX = 72
OFF_PIXDIM = 76
OFF_VOX_OFFSET = 108
OFF_SCL_SLOPE = 112
OFF_SCL_INTER = 116
OFF_XYZT_UNITS = 123
OFF_DESCRIP = 148
OFF_QFORM = 252
OFF_SFORM = 254
OFF_SROW = 280
OFF_MAGIC = 344


def _endianness(raw: bytes) -> str:
    if struct.unpack("<i", raw[:4])[0] == HEADER_SIZE:
        return "<"
    if struct.unpack(">i", raw[:4])[0] == HEADER_SIZE:
        return ">"
    raise NiftiError("sizeof_hdr is not 348 in either byte order; not a NIfTI-1 file")


def parse_header(raw: bytes) -> dict:
    if raw[:2] == b"\x1f\x8b":
        raise CompressedFileError("gzip-compressed NIfTI is not supported")
    if len(raw) < HEADER_SIZE:
        raise TruncatedPayloadError(f"file is {len(raw)} bytes, shorter than the 348-byte header")
    e = _endianness(raw)
    magic = raw[OFF_MAGIC:OFF_MAGIC + 4]
    if magic != MAGIC_SINGLE:
        raise BadMagicError(f"magic {magic!r} is not single-file NIfTI-1 ('n+1')")
    dim = struct.unpack(e + "8h", raw[OFF_DIM:OFF_DIM + 16])
    if dim[0] != 3:
        raise DimensionError(f"expected a 3-D volume, header says dim[0] = {dim[0]}")
    shape = tuple(int(d) for d in dim[1:4])
    if any(d < 1 for d in shape):
        raise DimensionError(f"nonpositive dimension in {shape}")
    datatype, bitpix = struct.unpack(e + "hh", raw[OFF_DATATYPE:OFF_DATATYPE + 4])
    if datatype not in _DTYPES:
        raise UnsupportedDatatypeError(f"datatype code {datatype} is not supported (only 4 and 16)")
    if bitpix != _DTYPES[datatype][1]:
        raise UnsupportedDatatypeError(f"bitpix {bitpix} does not match datatype {datatype}")
    pixdim = struct.unpack(e + "8f", raw[OFF_PIXDIM:OFF_PIXDIM + 32])
    vox_offset, slope, inter = struct.unpack(e + "3f", raw[OFF_VOX_OFFSET:OFF_VOX_OFFSET + 12])
    if vox_offset < HEADER_SIZE or vox_offset != int(vox_offset):
        raise NiftiError(f"invalid vox_offset {vox_offset}")
    return {
        "endian": e,
        "shape": shape,
        "datatype": int(datatype),
        "spacing": tuple(abs(float(p)) if p else 1.0 for p in pixdim[1:4]),
        "vox_offset": int(vox_offset),
        "scl_slope": float(slope),
        "scl_inter": float(inter),
    }


def read_nifti(path, modality: str = "ct") -> Volume:
    raw = Path(path).read_bytes()
    h = parse_header(raw)
    code, _ = _DTYPES[h["datatype"]]
    dtype = np.dtype(h["endian"] + code)
    count = int(np.prod(h["shape"]))
    start, end = h["vox_offset"], h["vox_offset"] + count * dtype.itemsize
    if len(raw) < end:
        raise TruncatedPayloadError(f"payload needs {end - start} bytes, file has {max(0, len(raw) - start)}")
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=start).reshape(h["shape"], order="F")
    grid = data.astype(np.float32)
    slope, inter = h["scl_slope"], h["scl_inter"]
    if slope != 0.0 and not (slope == 1.0 and inter == 0.0):
        grid = (grid * np.float32(slope) + np.float32(inter)).astype(np.float32)
    return Volume(np.ascontiguousarray(grid), h["spacing"], modality)


def nifti_header(shape, spacing=(1.0, 1.0, 1.0), datatype: int = DT_FLOAT32, endian: str = "<",
                 vox_offset: int = DEFAULT_VOX_OFFSET, descrip: str = "") -> bytes:
    if endian not in ("<", ">"):
        raise ValueError("endian must be '<' or '>'")
    if datatype not in _DTYPES:
        raise UnsupportedDatatypeError(f"cannot write datatype {datatype}")
    hdr = bytearray(HEADER_SIZE)
    struct.pack_into(endian + "i", hdr, 0, HEADER_SIZE)
    struct.pack_into(endian + "8h", hdr, OFF_DIM, 3, *shape, 1, 1, 1, 1)
    struct.pack_into(endian + "hh", hdr, OFF_DATATYPE, datatype, _DTYPES[datatype][1])
    struct.pack_into(endian + "8f", hdr, OFF_PIXDIM, 1.0, *spacing, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into(endian + "3f", hdr, OFF_VOX_OFFSET, float(vox_offset), 0.0, 0.0)
    hdr[OFF_XYZT_UNITS] = 2  # millimetres
    hdr[OFF_DESCRIP:OFF_DESCRIP + 80] = descrip.encode("ascii")[:80].ljust(80, b"\x00")
    struct.pack_into(endian + "hh", hdr, OFF_QFORM, 0, 1)
    sx, sy, sz = spacing
    struct.pack_into(endian + "12f", hdr, OFF_SROW, sx, 0, 0, 0, 0, sy, 0, 0, 0, 0, sz, 0)
    hdr[OFF_MAGIC:OFF_MAGIC + 4] = MAGIC_SINGLE
    return bytes(hdr)


def write_nifti(path, volume, spacing=None, datatype: int = DT_FLOAT32, endian: str = "<") -> Path:
    """Write a 3-D grid (or :class:`Volume`) as a single-file NIfTI-1."""
    if isinstance(volume, Volume):
        grid = volume.grid
        spacing = spacing or volume.spacing
    else:
        grid = np.asarray(volume)
    spacing = tuple(float(s) for s in (spacing or (1.0, 1.0, 1.0)))
    if grid.ndim != 3:
        raise DimensionError(f"only 3-D volumes can be written, got {grid.ndim}-D")
    code, _ = _DTYPES.get(datatype, (None, None))
    if code is None:
        raise UnsupportedDatatypeError(f"cannot write datatype {datatype}")
    payload = np.asarray(grid).astype(endian + code).tobytes(order="F")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(nifti_header(grid.shape, spacing, datatype, endian))
        fh.write(b"\x00" * (DEFAULT_VOX_OFFSET - HEADER_SIZE))
        fh.write(payload)
    return path
