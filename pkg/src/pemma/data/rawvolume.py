"""Internal raw volume container.

Layout, little-endian::

    bytes 0-11   magic b"PEMMA-RAWVOL"
    bytes 12-15  uint32 format version (1)
    bytes 16-27  uint32 dims[3]
    bytes 28-39  float32 spacing[3]
    bytes 40-43  uint32 dtype code (1 = float32, 2 = uint8, 3 = int16)
    bytes 44..   C-order payload
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from pemma.data.types import Volume
from pemma.exceptions import DataError

MAGIC = b"PEMMA-RAWVOL"
VERSION = 1
CODES = {1: "<f4", 2: "u1", 3: "<i2"}
_HEAD = struct.Struct("<12sI3I3fI")


def write_raw_volume(path, grid, spacing=(1.0, 1.0, 1.0)) -> Path:
    grid = np.asarray(grid)
    if grid.ndim != 3:
        raise DataError("raw volumes are 3-D")
    code = {np.dtype("float32"): 1, np.dtype("uint8"): 2, np.dtype("int16"): 3}.get(grid.dtype)
    if code is None:
        raise DataError(f"dtype {grid.dtype} cannot be stored")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_HEAD.pack(MAGIC, VERSION, *grid.shape, *spacing, code))
        fh.write(np.ascontiguousarray(grid, dtype=CODES[code]).tobytes())
    return path


def read_raw_volume(path) -> tuple[np.ndarray, tuple[float, float, float]]:
    raw = Path(path).read_bytes()
    if len(raw) < _HEAD.size:
        raise DataError(f"{path}: truncated raw volume header")
    magic, version, dx, dy, dz, sx, sy, sz, code = _HEAD.unpack_from(raw)
    if magic != MAGIC:
        raise DataError(f"{path}: bad raw volume magic")
    if version > VERSION:
        raise DataError(f"{path}: raw volume version {version} is newer than supported")
    if code not in CODES:
        raise DataError(f"{path}: unknown dtype code {code}")
    dtype = np.dtype(CODES[code])
    count = dx * dy * dz
    if len(raw) < _HEAD.size + count * dtype.itemsize:
        raise DataError(f"{path}: truncated raw volume payload")
    grid = np.frombuffer(raw, dtype=dtype, count=count, offset=_HEAD.size).reshape(dx, dy, dz)
    return grid.astype(dtype.newbyteorder("=")), (sx, sy, sz)


def read_volume(path, modality: str = "ct") -> Volume:
    grid, spacing = read_raw_volume(path)
    return Volume(grid.astype(np.float32), spacing, modality)
