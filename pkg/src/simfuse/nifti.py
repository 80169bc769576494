"""Minimal single-file NIfTI-1 reader/writer.

Covers exactly what the pipeline stores: scalar 3D volumes in one
``.nii`` file (gzip accepted on read). Header fields honored: dim,
pixdim, datatype, scl_slope/scl_inter, vox_offset and the ``n+1`` magic.
Everything else is carried as constant bytes so outputs are
byte-reproducible. Writing is always uncompressed; the linear voxel
order is x-fastest per the format.
"""
from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, UnsupportedShapeError
from .grid import LabelMap, Volume

HEADER_SIZE = 348
_VOX_OFFSET = 352  # header + 4-byte extension flag

# datatype code -> numpy dtype (scalar types only)
_DTYPES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
}
_CODES = {np.dtype(d).name: c for c, d in _DTYPES.items()}
_BITPIX = {c: np.dtype(d).itemsize * 8 for c, d in _DTYPES.items()}


def _read_bytes(path: Path) -> bytes:
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_header(buf: bytes, path: Path):
    if len(buf) < HEADER_SIZE:
        raise FormatError(f"{path}: file shorter than a NIfTI-1 header")
    if struct.unpack_from("<i", buf, 0)[0] == HEADER_SIZE:
        end = "<"
    elif struct.unpack_from(">i", buf, 0)[0] == HEADER_SIZE:
        end = ">"
    else:
        raise FormatError(f"{path}: sizeof_hdr is not 348; not a NIfTI-1 file")
    magic = buf[344:348]
    if magic == b"ni1\x00":
        raise FormatError(f"{path}: two-file (.hdr/.img) NIfTI is not supported")
    if magic != b"n+1\x00":
        raise FormatError(f"{path}: bad magic {magic!r}")
    dim = struct.unpack_from(end + "8h", buf, 40)
    datatype, bitpix = struct.unpack_from(end + "2h", buf, 70)
    pixdim = struct.unpack_from(end + "8f", buf, 76)
    vox_offset, scl_slope, scl_inter = struct.unpack_from(end + "3f", buf, 108)
    if dim[0] != 3:
        raise UnsupportedShapeError(
            f"{path}: only scalar 3D volumes are supported, got dim[0]={dim[0]}"
        )
    shape = tuple(int(d) for d in dim[1:4])
    if any(d < 1 for d in shape):
        raise FormatError(f"{path}: non-positive dims {shape}")
    if datatype not in _DTYPES:
        raise FormatError(f"{path}: unsupported datatype code {datatype}")
    if bitpix != _BITPIX[datatype]:
        raise FormatError(f"{path}: bitpix {bitpix} inconsistent with datatype {datatype}")
    spacing = tuple(float(p) for p in pixdim[1:4])
    if any(s <= 0 for s in spacing):
        raise FormatError(f"{path}: non-positive pixdim {spacing}")
    offset = int(round(vox_offset))
    if offset < HEADER_SIZE:
        raise FormatError(f"{path}: vox_offset {vox_offset} inside the header")
    return end, shape, spacing, datatype, offset, float(scl_slope), float(scl_inter)


def _read_array(path) -> tuple[np.ndarray, tuple, float, float, int]:
    path = Path(path)
    buf = _read_bytes(path)
    end, shape, spacing, datatype, offset, slope, inter = _parse_header(buf, path)
    dt = np.dtype(_DTYPES[datatype]).newbyteorder(end)
    count = shape[0] * shape[1] * shape[2]
    nbytes = count * dt.itemsize
    if len(buf) < offset + nbytes:
        raise FormatError(f"{path}: truncated data section")
    flat = np.frombuffer(buf, dtype=dt, count=count, offset=offset)
    arr = flat.reshape(shape, order="F")
    return arr, spacing, slope, inter, datatype


def load_volume(path) -> Volume:
    """Load a scalar 3D NIfTI-1 file as floating-point intensities.

    The header scale (scl_slope/scl_inter) is applied; slope 0 means
    unscaled per the format convention.
    """
    arr, spacing, slope, inter, _ = _read_array(path)
    out = arr.astype(np.float64)
    if slope != 0.0 and (slope != 1.0 or inter != 0.0):
        out = out * slope + inter
    return Volume(out, spacing)


def load_labels(path) -> LabelMap:
    """Load an integer-typed NIfTI-1 file as a label map."""
    arr, spacing, slope, inter, datatype = _read_array(path)
    if datatype not in (2, 4, 8):
        raise FormatError(f"{path}: label maps must use an integer datatype")
    if slope not in (0.0, 1.0) or inter != 0.0:
        raise FormatError(f"{path}: label maps must not carry intensity scaling")
    native = arr.astype(arr.dtype.newbyteorder("="))
    return LabelMap(native, spacing)


def save_volume(obj: Volume | LabelMap, path) -> None:
    """Write a Volume (float32) or LabelMap (uint8/int32) as single-file .nii.

    Outputs are uncompressed; pass the file through gzip yourself if you
    need .nii.gz (readable back by load_volume/load_labels).
    """
    path = Path(path)
    if path.name.endswith(".gz"):
        raise ValueError(f"{path}: compressed output is not supported, write .nii")
    if isinstance(obj, Volume):
        data = obj.voxels.astype(np.float32)
    elif isinstance(obj, LabelMap):
        hi = int(obj.labels.max()) if obj.labels.size else 0
        data = obj.labels.astype(np.uint8 if hi <= 255 else np.int32)
    else:
        raise TypeError(f"cannot save object of type {type(obj).__name__}")
    header = _build_header(data.shape, obj.spacing, _CODES[data.dtype.name])
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(b"\x00\x00\x00\x00")
        fh.write(data.tobytes(order="F"))


def _build_header(shape, spacing, datatype: int) -> bytes:
    buf = bytearray(HEADER_SIZE)
    struct.pack_into("<i", buf, 0, HEADER_SIZE)
    struct.pack_into("<8h", buf, 40, 3, shape[0], shape[1], shape[2], 1, 1, 1, 1)
    struct.pack_into("<2h", buf, 70, datatype, _BITPIX[datatype])
    struct.pack_into("<8f", buf, 76, 1.0, spacing[0], spacing[1], spacing[2], 0, 0, 0, 0)
    struct.pack_into("<3f", buf, 108, float(_VOX_OFFSET), 1.0, 0.0)
    struct.pack_into("<b", buf, 123, 2)  # spatial units: mm
    struct.pack_into("<80s", buf, 148, b"simfuse")
    struct.pack_into("<2h", buf, 252, 0, 1)  # qform none, sform aligned
    struct.pack_into("<4f", buf, 280, spacing[0], 0, 0, 0)
    struct.pack_into("<4f", buf, 296, 0, spacing[1], 0, 0)
    struct.pack_into("<4f", buf, 312, 0, 0, spacing[2], 0)
    struct.pack_into("<4s", buf, 344, b"n+1\x00")
    return bytes(buf)
