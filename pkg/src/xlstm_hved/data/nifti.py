"""Uncompressed single-file NIfTI-1 (``.nii``) with 32-bit float voxels.

Array axis 0 maps to ``dim[1]`` and varies fastest on disk, matching the
usual i/j/k voxel convention. Files are always written little-endian; big
endian files are recognised by ``dim[0]`` falling outside 1..7 when read
little-endian, and byte-swapped on load.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..errors import ContractViolation, ParseError
from .volume import Volume

HEADER_SIZE = 348
VOX_OFFSET = 352
FLOAT32 = 16
MAGIC = b"n+1\x00"


class NiftiMagicError(ParseError):
    pass


class NiftiDatatypeError(ParseError):
    pass


class NiftiTruncatedError(ParseError):
    pass


def _header_bytes(shape: tuple[int, int, int], spacing: tuple[float, float, float]) -> bytes:
    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<c", hdr, 38, b"r")
    struct.pack_into("<8h", hdr, 40, 3, *shape, 1, 1, 1, 1)
    struct.pack_into("<hh", hdr, 70, FLOAT32, 32)
    struct.pack_into("<8f", hdr, 76, 1.0, *spacing, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<fff", hdr, 108, float(VOX_OFFSET), 1.0, 0.0)
    struct.pack_into("<B", hdr, 123, 2)                 # xyzt_units: millimetres
    struct.pack_into("<4s", hdr, 344, MAGIC)
    return bytes(hdr)


def write_nifti1(volume: Volume | np.ndarray, path, spacing_mm=None) -> Path:
    """Write a single-channel volume (or a bare 3-D array) as one ``.nii`` file."""
    if isinstance(volume, Volume):
        if volume.data.shape[:2] != (1, 1):
            raise ContractViolation(f"NIfTI files hold one 3-D image; volume has shape {volume.data.shape}")
        arr, spacing = volume.data[0, 0], spacing_mm or volume.spacing_mm
    else:
        arr, spacing = np.asarray(volume), spacing_mm or (1.0, 1.0, 1.0)
        if arr.ndim != 3:
            raise ContractViolation(f"expected a 3-D array, got shape {arr.shape}")
    if any(n > 32767 for n in arr.shape):
        raise ContractViolation("NIfTI-1 dims are limited to 32767")
    path = Path(path)
    payload = np.asarray(arr, dtype="<f4").tobytes(order="F")
    with open(path, "wb") as fh:
        fh.write(_header_bytes(arr.shape, tuple(float(s) for s in spacing)))
        fh.write(b"\x00" * (VOX_OFFSET - HEADER_SIZE))   # empty extension block
        fh.write(payload)
    return path


def _endianness(raw: bytes) -> str:
    (dim0,) = struct.unpack_from("<h", raw, 40)
    if 1 <= dim0 <= 7:
        return "<"
    (dim0,) = struct.unpack_from(">h", raw, 40)
    if 1 <= dim0 <= 7:
        return ">"
    raise ParseError("dim[0]", f"rank {dim0} is outside 1..7 in either byte order")


def read_header(raw: bytes) -> dict:
    if len(raw) < HEADER_SIZE:
        raise NiftiTruncatedError("header", f"file has {len(raw)} bytes, header needs {HEADER_SIZE}")
    magic = raw[344:348]
    if magic != MAGIC:
        raise NiftiMagicError("magic", f"expected {MAGIC!r}, found {magic!r}")
    e = _endianness(raw)
    (sizeof_hdr,) = struct.unpack_from(e + "i", raw, 0)
    if sizeof_hdr != HEADER_SIZE:
        raise ParseError("sizeof_hdr", f"expected {HEADER_SIZE}, found {sizeof_hdr}")
    dim = struct.unpack_from(e + "8h", raw, 40)
    datatype, bitpix = struct.unpack_from(e + "hh", raw, 70)
    pixdim = struct.unpack_from(e + "8f", raw, 76)
    vox_offset, scl_slope, scl_inter = struct.unpack_from(e + "fff", raw, 108)
    if datatype != FLOAT32:
        raise NiftiDatatypeError("datatype", f"only 32-bit float (16) is supported, found {datatype}")
    return {"endian": e, "dim": dim, "datatype": datatype, "bitpix": bitpix, "pixdim": pixdim,
            "vox_offset": vox_offset, "scl_slope": scl_slope, "scl_inter": scl_inter}


def read_nifti1(path) -> Volume:
    """Read a 3-D float32 ``.nii`` file into a [1, 1, D, H, W] volume."""
    raw = Path(path).read_bytes()
    if len(raw) < VOX_OFFSET:
        raise NiftiTruncatedError("header", f"file has {len(raw)} bytes, need at least {VOX_OFFSET}")
    hdr = read_header(raw)
    dim = hdr["dim"]
    rank = dim[0]
    if rank < 3 or any(d != 1 for d in dim[4:rank + 1]):
        raise ParseError("dim", f"expected a single 3-D image, got dim={dim[:rank + 1]}")
    shape = tuple(int(d) for d in dim[1:4])
    if any(d < 1 for d in shape):
        raise ParseError("dim", f"non-positive extent {shape}")
    offset = int(hdr["vox_offset"])
    if offset < VOX_OFFSET:
        raise ParseError("vox_offset", f"{hdr['vox_offset']} is inside the header")
    n_bytes = 4 * int(np.prod(shape))
    if len(raw) < offset + n_bytes:
        raise NiftiTruncatedError("payload", f"need {n_bytes} voxel bytes at offset {offset}, "
                                             f"file has {len(raw) - offset}")
    data = np.frombuffer(raw, dtype=hdr["endian"] + "f4", count=n_bytes // 4, offset=offset)
    data = data.astype(np.float32).reshape(shape, order="F")
    slope, inter = hdr["scl_slope"], hdr["scl_inter"]
    if slope not in (0.0, 1.0) or inter != 0.0:
        data = (data * (slope or 1.0) + inter).astype(np.float32)
    spacing = tuple(abs(float(p)) or 1.0 for p in hdr["pixdim"][1:4])
    return Volume(np.ascontiguousarray(data)[None, None], spacing)
