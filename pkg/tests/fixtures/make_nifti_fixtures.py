"""Regenerate the NIfTI-1 parser corpus in ./nifti.

Headers are packed field by field here rather than through the package's
writer, so the reader is checked against an independent encoding.  Run from
any directory; ``index.json`` records the expected outcome of every file.
"""

import gzip
import json
import struct
from pathlib import Path

import numpy as np

OUT = Path(__file__).resolve().parent / "nifti"
SHAPE = (2, 3, 4)
SPACING = (0.5, 1.0, 2.0)


def header(e, *, sizeof_hdr=348, dims=(3, *SHAPE), datatype=16, bitpix=32, vox_offset=352.0, slope=0.0,
           inter=0.0, magic=b"n+1\x00"):
    h = bytearray(348)
    struct.pack_into(e + "i", h, 0, sizeof_hdr)
    d = list(dims) + [1] * (8 - len(dims))
    struct.pack_into(e + "8h", h, 40, *d)
    struct.pack_into(e + "hh", h, 70, datatype, bitpix)
    struct.pack_into(e + "8f", h, 76, 1.0, *SPACING, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into(e + "3f", h, 108, vox_offset, slope, inter)
    h[344:348] = magic
    return bytes(h)


def grid():
    return np.arange(np.prod(SHAPE), dtype=np.float64).reshape(SHAPE) - 7.0


def payload(e, code):
    return grid().astype(e + code).tobytes(order="F")


def build():
    files = {}

    def add(name, data, expect, **extra):
        files[name] = (data, dict(expect=expect, **extra))

    for e, tag in (("<", "le"), (">", "be")):
        add(f"{tag}_float32.nii", header(e) + b"\0" * 4 + payload(e, "f4"), "ok", scale=[1.0, 0.0])
        add(f"{tag}_int16.nii", header(e, datatype=4, bitpix=16) + b"\0" * 4 + payload(e, "i2"), "ok",
            scale=[1.0, 0.0])
    add("le_int16_scaled.nii", header("<", datatype=4, bitpix=16, slope=2.0, inter=-1.0) + b"\0" * 4
        + payload("<", "i2"), "ok", scale=[2.0, -1.0])
    add("le_offset_400.nii", header("<", vox_offset=400.0) + b"\0" * 52 + payload("<", "f4"), "ok",
        scale=[1.0, 0.0])
    add("bad_magic_ni1.nii", header("<", magic=b"ni1\x00") + b"\0" * 4 + payload("<", "f4"), "BadMagicError")
    add("uint8.nii", header("<", datatype=2, bitpix=8) + b"\0" * 4 + grid().astype("u1").tobytes(order="F"),
        "UnsupportedDatatypeError")
    add("float64.nii", header("<", datatype=64, bitpix=64) + b"\0" * 4 + payload("<", "f8"),
        "UnsupportedDatatypeError")
    add("bitpix_mismatch.nii", header("<", bitpix=16) + b"\0" * 4 + payload("<", "f4"), "UnsupportedDatatypeError")
    add("dim4.nii", header("<", dims=(4, *SHAPE, 2)) + b"\0" * 4 + payload("<", "f4") * 2, "DimensionError")
    add("zero_dim.nii", header("<", dims=(3, 2, 0, 4)) + b"\0" * 4, "DimensionError")
    add("truncated_payload.nii", (header("<") + b"\0" * 4 + payload("<", "f4"))[:-10], "TruncatedPayloadError")
    add("truncated_header.nii", header("<")[:100], "TruncatedPayloadError")
    add("bad_sizeof_hdr.nii", header("<", sizeof_hdr=540) + b"\0" * 4 + payload("<", "f4"), "NiftiError")
    add("bad_vox_offset.nii", header("<", vox_offset=10.0) + b"\0" * 4 + payload("<", "f4"), "NiftiError")
    add("gzip.nii.gz", gzip.compress(header("<") + b"\0" * 4 + payload("<", "f4"), mtime=0), "CompressedFileError")
    return files


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    index = {}
    for name, (data, info) in build().items():
        (OUT / name).write_bytes(data)
        index[name] = info
    index_doc = {"shape": list(SHAPE), "spacing": list(SPACING), "offset": -7.0, "files": index}
    (OUT / "index.json").write_text(json.dumps(index_doc, indent=1, sort_keys=True) + "\n")


if __name__ == "__main__":
    main()
