"""Minimal NIfTI-1 single-file I/O (.nii / .nii.gz).

Supports axis-aligned volumes only: the sform/qform rotation part must be
diagonal (up to sign). Data is returned in (x, y, z) index order exactly as
stored on disk; callers decide their own axis convention.
"""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

HEADER_SIZE = 348
VOX_OFFSET = 352
MAGIC_SINGLE = b"n+1\x00"

_DTYPE_FOR_CODE = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
    256: np.int8,
    512: np.uint16,
    768: np.uint32,
}
_CODE_FOR_DTYPE = {np.dtype(v): k for k, v in _DTYPE_FOR_CODE.items()}


class NiftiError(ValueError):
    """Malformed or unsupported NIfTI file."""


def _open(path, mode):
    path = Path(path)
    if path.suffix == ".gz":
        # mtime=0 keeps byte-identical output for identical input
        return gzip.GzipFile(path, mode, mtime=0)
    return open(path, mode)


def read(path):
    """Read a NIfTI-1 file.

    Returns (data, spacing, origin) with data indexed (x, y, z), spacing and
    origin as float32 arrays in (x, y, z) order.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    with _open(path, "rb") as f:
        raw = f.read()
    if len(raw) < VOX_OFFSET:
        raise NiftiError(f"{path}: file shorter than NIfTI-1 header")

    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    endian = "<"
    if sizeof_hdr != HEADER_SIZE:
        (sizeof_hdr,) = struct.unpack_from(">i", raw, 0)
        if sizeof_hdr != HEADER_SIZE:
            raise NiftiError(f"{path}: bad sizeof_hdr, not a NIfTI-1 file")
        endian = ">"

    magic = raw[344:348]
    if magic not in (MAGIC_SINGLE, b"ni1\x00"):
        raise NiftiError(f"{path}: bad magic {magic!r}")
    if magic != MAGIC_SINGLE:
        raise NiftiError(f"{path}: two-file NIfTI (.hdr/.img) not supported")

    dim = struct.unpack_from(endian + "8h", raw, 40)
    ndim = dim[0]
    shape = tuple(int(d) for d in dim[1 : 1 + max(ndim, 0)])
    # tolerate trailing singleton dims (e.g. shape (X,Y,Z,1))
    while len(shape) > 3 and shape[-1] == 1:
        shape = shape[:-1]
    if len(shape) != 3 or any(s < 1 for s in shape):
        raise NiftiError(f"{path}: non-3D data (dim={dim[: ndim + 1]})")

    (datatype,) = struct.unpack_from(endian + "h", raw, 70)
    if datatype not in _DTYPE_FOR_CODE:
        raise NiftiError(f"{path}: unsupported datatype code {datatype}")
    dtype = np.dtype(_DTYPE_FOR_CODE[datatype]).newbyteorder(endian)

    pixdim = struct.unpack_from(endian + "8f", raw, 76)
    (vox_offset,) = struct.unpack_from(endian + "f", raw, 108)
    scl_slope, scl_inter = struct.unpack_from(endian + "2f", raw, 112)
    qform_code, sform_code = struct.unpack_from(endian + "2h", raw, 252)
    srow = np.array(struct.unpack_from(endian + "12f", raw, 280), dtype=np.float64).reshape(3, 4)

    spacing = np.abs(np.asarray(pixdim[1:4], dtype=np.float32))
    origin = np.zeros(3, dtype=np.float32)
    if sform_code > 0:
        rot = srow[:, :3]
        if np.any(np.abs(rot - np.diag(np.diag(rot))) > 1e-4 * max(1.0, np.abs(rot).max())):
            raise NiftiError(f"{path}: oblique orientation not supported")
        spacing = np.abs(np.diag(rot)).astype(np.float32)
        origin = srow[:, 3].astype(np.float32)
    elif qform_code > 0:
        b, c, d = struct.unpack_from(endian + "3f", raw, 256)
        if abs(b) > 1e-6 or abs(c) > 1e-6 or abs(d) > 1e-6:
            raise NiftiError(f"{path}: rotated qform not supported")
        origin = np.array(struct.unpack_from(endian + "3f", raw, 268), dtype=np.float32)

    if any(s <= 0 for s in spacing):
        raise NiftiError(f"{path}: non-positive voxel spacing {tuple(spacing)}")

    offset = int(vox_offset) if vox_offset >= HEADER_SIZE else VOX_OFFSET
    count = int(np.prod(shape))
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    data = data.reshape(shape, order="F").astype(dtype.newbyteorder("="))
    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        slope = scl_slope if scl_slope != 0.0 else 1.0
        data = data.astype(np.float32) * slope + scl_inter
    return data, spacing, origin


def write(path, data, spacing, origin):
    """Write a 3D array as a NIfTI-1 single file; data indexed (x, y, z)."""
    data = np.asarray(data)
    if data.ndim != 3:
        raise NiftiError(f"can only write 3D data, got ndim={data.ndim}")
    if data.dtype not in _CODE_FOR_DTYPE:
        data = data.astype(np.float32)
    spacing = np.asarray(spacing, dtype=np.float32)
    origin = np.asarray(origin, dtype=np.float32)

    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, *data.shape, 1, 1, 1, 1)
    struct.pack_into("<h", hdr, 70, _CODE_FOR_DTYPE[data.dtype])
    struct.pack_into("<h", hdr, 72, data.dtype.itemsize * 8)
    struct.pack_into("<8f", hdr, 76, 1.0, *spacing, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, float(VOX_OFFSET))
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)  # scl_slope, scl_inter
    struct.pack_into("<2h", hdr, 252, 0, 1)  # qform_code, sform_code
    srow = np.zeros((3, 4), dtype=np.float32)
    srow[:, :3] = np.diag(spacing)
    srow[:, 3] = origin
    struct.pack_into("<12f", hdr, 280, *srow.ravel())
    hdr[344:348] = MAGIC_SINGLE

    with _open(path, "wb") as f:
        f.write(bytes(hdr))
        f.write(b"\x00" * (VOX_OFFSET - HEADER_SIZE))  # no extensions
        f.write(np.asfortranarray(data).tobytes(order="F"))
