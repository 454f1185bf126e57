"""Minimal NIfTI-1 single-file codec.

Supports exactly what the rest of the package needs: 3D images, float32 or
int16 payloads, little-endian output, optional gzip compression, spacing via
``pixdim``. The affine (sform) is written for interoperability but never
applied — there is no resampling here.
"""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

HEADER_SIZE = 348
VOX_OFFSET = 352
MAGIC_SINGLE = b"n+1\x00"
MAGIC_PAIR = b"ni1\x00"

DTYPE_INT16 = 4
DTYPE_FLOAT32 = 16

_CODE_TO_DTYPE = {DTYPE_INT16: np.int16, DTYPE_FLOAT32: np.float32}
_BITPIX = {DTYPE_INT16: 16, DTYPE_FLOAT32: 32}


class NiftiFormatError(ValueError):
    """Raised when a file is not a well-formed NIfTI-1 single-file image."""


class UnsupportedImageError(ValueError):
    """Raised for well-formed files outside the supported envelope (rank, dtype)."""


def _open_maybe_gzip(path: Path):
    with open(path, "rb") as fh:
        head = fh.read(2)
    if head == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def read_array(path) -> tuple[np.ndarray, tuple[float, float, float]]:
    """Read a 3D NIfTI-1 file.

    Returns ``(voxels, spacing)`` where ``voxels`` is a C-contiguous float32
    array with shape ``(dim1, dim2, dim3)`` and ``spacing`` is ``pixdim[1:4]``
    in mm. Both byte orders are accepted on read.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    with _open_maybe_gzip(path) as fh:
        raw = fh.read()
    if len(raw) < HEADER_SIZE:
        raise NiftiFormatError(f"{path}: file shorter than the 348-byte NIfTI-1 header")

    byteorder = "<"
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != HEADER_SIZE:
        (sizeof_hdr,) = struct.unpack_from(">i", raw, 0)
        if sizeof_hdr != HEADER_SIZE:
            raise NiftiFormatError(f"{path}: bad sizeof_hdr, not a NIfTI-1 file")
        byteorder = ">"

    magic = raw[344:348]
    if magic == MAGIC_PAIR:
        raise UnsupportedImageError(f"{path}: two-file (.hdr/.img) NIfTI is not supported")
    if magic != MAGIC_SINGLE:
        raise NiftiFormatError(f"{path}: bad magic {magic!r}")

    dim = struct.unpack_from(f"{byteorder}8h", raw, 40)
    (datatype,) = struct.unpack_from(f"{byteorder}h", raw, 70)
    pixdim = struct.unpack_from(f"{byteorder}8f", raw, 76)
    (vox_offset,) = struct.unpack_from(f"{byteorder}f", raw, 108)
    scl_slope, scl_inter = struct.unpack_from(f"{byteorder}2f", raw, 112)

    ndim = dim[0]
    if ndim < 1 or ndim > 7:
        raise NiftiFormatError(f"{path}: dim[0]={ndim} out of range")
    shape = tuple(int(d) for d in dim[1 : ndim + 1])
    if any(d < 1 for d in shape):
        raise NiftiFormatError(f"{path}: non-positive dimension in {shape}")
    # Trailing singleton dims are tolerated; anything genuinely >3D is not.
    while len(shape) > 3 and shape[-1] == 1:
        shape = shape[:-1]
    if len(shape) != 3:
        raise UnsupportedImageError(f"{path}: rank-{len(shape)} image, only 3D is supported")

    if datatype not in _CODE_TO_DTYPE:
        raise UnsupportedImageError(f"{path}: datatype code {datatype} unsupported (float32/int16 only)")
    dtype = np.dtype(_CODE_TO_DTYPE[datatype]).newbyteorder(byteorder)

    offset = int(vox_offset) if vox_offset >= HEADER_SIZE else VOX_OFFSET
    nvox = int(np.prod(shape))
    nbytes = nvox * dtype.itemsize
    if len(raw) < offset + nbytes:
        raise NiftiFormatError(f"{path}: truncated voxel payload ({len(raw) - offset} of {nbytes} bytes)")

    data = np.frombuffer(raw, dtype=dtype, count=nvox, offset=offset)
    voxels = np.ascontiguousarray(data.reshape(shape, order="F"), dtype=np.float32)
    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        if scl_slope == 0.0:
            scl_slope = 1.0
        voxels = voxels * np.float32(scl_slope) + np.float32(scl_inter)

    spacing = tuple(float(abs(p)) if p != 0 else 1.0 for p in pixdim[1:4])
    return voxels, spacing


def write_array(voxels: np.ndarray, spacing, path, dtype: str = "float32") -> None:
    """Write a 3D array as a little-endian NIfTI-1 single file.

    Gzip compression is selected by a ``.gz`` suffix. ``read_array`` inverts
    this bit-exactly for float32 payloads.
    """
    voxels = np.asarray(voxels)
    if voxels.ndim != 3:
        raise UnsupportedImageError(f"expected a 3D array, got rank {voxels.ndim}")
    if dtype == "float32":
        code, payload = DTYPE_FLOAT32, voxels.astype("<f4", copy=False)
    elif dtype == "int16":
        code, payload = DTYPE_INT16, voxels.astype("<i2", copy=False)
    else:
        raise UnsupportedImageError(f"dtype {dtype!r} unsupported (float32/int16 only)")

    path = Path(path)
    sx, sy, sz = (float(s) for s in spacing)
    header = bytearray(HEADER_SIZE)
    struct.pack_into("<i", header, 0, HEADER_SIZE)
    struct.pack_into("<8h", header, 40, 3, *voxels.shape, 1, 1, 1, 1)
    struct.pack_into("<h", header, 70, code)
    struct.pack_into("<h", header, 72, _BITPIX[code])
    struct.pack_into("<8f", header, 76, 1.0, sx, sy, sz, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", header, 108, float(VOX_OFFSET))
    struct.pack_into("<2f", header, 112, 1.0, 0.0)  # scl_slope, scl_inter
    struct.pack_into("<2h", header, 252, 0, 1)  # qform off, sform on
    struct.pack_into("<4f", header, 280, sx, 0.0, 0.0, 0.0)
    struct.pack_into("<4f", header, 296, 0.0, sy, 0.0, 0.0)
    struct.pack_into("<4f", header, 312, 0.0, 0.0, sz, 0.0)
    header[344:348] = MAGIC_SINGLE

    blob = bytes(header) + b"\x00\x00\x00\x00" + payload.tobytes(order="F")
    if path.suffix == ".gz":
        # mtime/name pinned so identical volumes produce identical files
        with open(path, "wb") as raw_fh:
            with gzip.GzipFile(filename="", fileobj=raw_fh, mode="wb", mtime=0) as fh:
                fh.write(blob)
    else:
        with open(path, "wb") as fh:
            fh.write(blob)
