"""Strict subset of the NIfTI-1 single-file format (``.nii`` / ``.nii.gz``).

Only 3D grids with datatype uint8 (2) or float32 (16) are supported. Files are
always written little-endian with the data at byte 352; reading accepts either
byte order and transparently handles gzip.
"""
from __future__ import annotations

import gzip
import logging
import os
import struct
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from .volume import LabelMask, Volume

logger = logging.getLogger(__name__)

HEADER_SIZE = 348
VOX_OFFSET = 352
MAGIC = b"n+1\x00"
GZIP_MAGIC = b"\x1f\x8b"

DT_UINT8 = 2
DT_FLOAT32 = 16
_DTYPES = {DT_UINT8: ("u1", 8), DT_FLOAT32: ("f4", 32)}

# byte range holding qform_code .. srow_z (orientation fields)
_ORIENT = slice(252, 328)


class NiftiError(ValueError):
    """Base class for malformed or unsupported files."""


class BadMagicError(NiftiError):
    pass


class UnsupportedDatatypeError(NiftiError):
    pass


class TruncatedDataError(NiftiError):
    pass


@dataclass
class NiftiHeader:
    dim: Tuple[int, ...]
    datatype: int
    bitpix: int
    pixdim: Tuple[float, ...]
    vox_offset: float
    scl_slope: float
    scl_inter: float
    sizeof_hdr: int = HEADER_SIZE
    magic: bytes = MAGIC
    endian: str = "<"
    orientation: bytes = field(default=bytes(_ORIENT.stop - _ORIENT.start), repr=False)

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(self.dim[1:4])  # type: ignore[return-value]


def _read_bytes(path) -> bytes:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == GZIP_MAGIC:
        raw = gzip.decompress(raw)
    return raw


def parse_header(raw: bytes) -> NiftiHeader:
    if len(raw) < HEADER_SIZE:
        raise TruncatedDataError(f"sizeof_hdr: file has only {len(raw)} bytes, header needs {HEADER_SIZE}")
    for endian in "<>":
        if struct.unpack(endian + "i", raw[:4])[0] == HEADER_SIZE:
            break
    else:
        raise BadMagicError(f"sizeof_hdr: expected 348, got {struct.unpack('<i', raw[:4])[0]}")
    magic = raw[344:348]
    if magic[:3] != MAGIC[:3]:
        raise BadMagicError(f"magic: expected 'n+1', got {magic!r}")
    dim = struct.unpack(endian + "8h", raw[40:56])
    datatype, bitpix = struct.unpack(endian + "2h", raw[70:74])
    pixdim = struct.unpack(endian + "8f", raw[76:108])
    vox_offset, slope, inter = struct.unpack(endian + "3f", raw[108:120])
    if dim[0] != 3 and not (dim[0] > 3 and all(d == 1 for d in dim[4 : dim[0] + 1])):
        raise NiftiError(f"dim: only 3D images are supported, dim[0]={dim[0]}")
    if min(dim[1:4]) < 1:
        raise NiftiError(f"dim: spatial dims must be >= 1, got {dim[1:4]}")
    if datatype not in _DTYPES:
        raise UnsupportedDatatypeError(f"unsupported datatype {datatype}")
    if bitpix != _DTYPES[datatype][1]:
        raise NiftiError(f"bitpix: {bitpix} does not match datatype {datatype}")
    if vox_offset < VOX_OFFSET:
        raise NiftiError(f"vox_offset: {vox_offset} is below {VOX_OFFSET}")
    return NiftiHeader(
        dim=dim,
        datatype=datatype,
        bitpix=bitpix,
        pixdim=pixdim,
        vox_offset=vox_offset,
        scl_slope=slope,
        scl_inter=inter,
        magic=magic,
        endian=endian,
        orientation=raw[_ORIENT],
    )


def read_nifti(path) -> Tuple[Volume, NiftiHeader]:
    """Read a volume together with its parsed header."""
    raw = _read_bytes(path)
    hdr = parse_header(raw)
    nx, ny, nz = hdr.dims
    code, _ = _DTYPES[hdr.datatype]
    start = int(hdr.vox_offset)
    n = nx * ny * nz
    nbytes = n * np.dtype(code).itemsize
    if len(raw) < start + nbytes:
        raise TruncatedDataError(f"data: expected {nbytes} bytes at offset {start}, found {max(len(raw) - start, 0)}")
    stored = np.frombuffer(raw, dtype=hdr.endian + code, count=n, offset=start)
    values = stored.astype(np.float32)
    slope, inter = hdr.scl_slope, hdr.scl_inter
    if slope != 0 and np.isfinite(slope) and (slope != 1 or inter != 0):
        values = values * np.float32(slope) + np.float32(inter)
    spacing = []
    for i, p in enumerate(hdr.pixdim[1:4]):
        p = abs(float(p))
        if p == 0 or not np.isfinite(p):
            logger.warning("pixdim[%d] is %r in %s; using 1.0", i + 1, p, path)
            p = 1.0
        spacing.append(p)
    return Volume.from_flat(values, hdr.dims, spacing), hdr


def read_volume(path) -> Volume:
    return read_nifti(path)[0]


def read_mask(path) -> LabelMask:
    v = read_volume(path)
    return LabelMask(v.data, v.spacing)


def build_header(dims, spacing, datatype: int, reference: Optional[NiftiHeader] = None) -> bytes:
    """Serialize a little-endian 352-byte header block (348 + 4 extension bytes)."""
    code, bitpix = _DTYPES[datatype]
    buf = bytearray(VOX_OFFSET)
    struct.pack_into("<i", buf, 0, HEADER_SIZE)
    struct.pack_into("<8h", buf, 40, 3, *dims, 1, 1, 1, 1)
    struct.pack_into("<2h", buf, 70, datatype, bitpix)
    struct.pack_into("<8f", buf, 76, 1.0, *spacing, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<3f", buf, 108, float(VOX_OFFSET), 1.0, 0.0)
    struct.pack_into("<B", buf, 123, 2)  # xyzt_units: mm
    if reference is not None:
        orient = reference.orientation
        if reference.endian != "<":
            orient = _swap_orientation(orient)
        buf[_ORIENT] = orient
    buf[344:348] = MAGIC
    return bytes(buf)


def _swap_orientation(orient: bytes) -> bytes:
    codes = struct.unpack(">2h", orient[:4])
    floats = struct.unpack(">18f", orient[4:])
    return struct.pack("<2h", *codes) + struct.pack("<18f", *floats)


def _write(path, header: bytes, payload: bytes) -> None:
    blob = header + payload
    path = os.fspath(path)
    if path.endswith(".gz"):
        # mtime pinned so identical inputs give identical bytes
        blob = gzip.compress(blob, mtime=0)
    with open(path, "wb") as fh:
        fh.write(blob)


def write_volume(v: Volume, path, reference: Optional[NiftiHeader] = None) -> None:
    """Write a float32 volume."""
    header = build_header(v.dims, v.spacing, DT_FLOAT32, reference)
    _write(path, header, v.flat.astype("<f4").tobytes())


def write_mask(mask: LabelMask, path, reference: Optional[NiftiHeader] = None) -> None:
    """Write a uint8 mask."""
    header = build_header(mask.dims, mask.spacing, DT_UINT8, reference)
    _write(path, header, mask.flat.astype("u1").tobytes())
