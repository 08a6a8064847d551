"""Minimal single-file NIfTI-1 reader/writer.

Handles `.nii` and `.nii.gz` volumes with the standard 348-byte header.
Data is exposed as a numpy array in (nx, ny, nz) order with voxel spacing
taken from pixdim. Only single-file ("n+1") images are supported; the
paired .hdr/.img layout is rejected.
"""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

from .errors import CorruptHeader, MissingFile

HEADER_SIZE = 348
# data starts after the header plus the 4-byte extension flag
VOX_OFFSET = 352

# NIfTI datatype code -> numpy dtype
_CODE_TO_DTYPE = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
    256: np.int8,
    512: np.uint16,
    768: np.uint32,
}
_DTYPE_TO_CODE = {np.dtype(d): c for c, d in _CODE_TO_DTYPE.items()}


def _open_for_read(path: Path):
    with open(path, "rb") as f:
        magic = f.read(2)
    if magic == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def read_nifti(path) -> tuple[np.ndarray, tuple[float, float, float]]:
    """Read a NIfTI-1 volume.

    Returns (data, spacing) where data has shape (nx, ny, nz) and spacing
    is the voxel size in mm along each axis.
    """
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"no such volume: {path}")
    try:
        with _open_for_read(path) as f:
            raw = f.read()
    except (OSError, EOFError) as e:
        raise CorruptHeader(f"{path}: unreadable ({e})")
    if len(raw) < HEADER_SIZE:
        raise CorruptHeader(f"{path}: file shorter than NIfTI-1 header")

    # endianness is detected from sizeof_hdr
    order = "<"
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != HEADER_SIZE:
        order = ">"
        (sizeof_hdr,) = struct.unpack_from(">i", raw, 0)
        if sizeof_hdr != HEADER_SIZE:
            raise CorruptHeader(f"{path}: bad sizeof_hdr")

    (magic,) = struct.unpack_from("4s", raw, 344)
    if magic == b"ni1\x00":
        raise CorruptHeader(f"{path}: paired .hdr/.img NIfTI not supported")
    if magic != b"n+1\x00":
        raise CorruptHeader(f"{path}: bad magic {magic!r}")

    dim = struct.unpack_from(order + "8h", raw, 40)
    ndim = dim[0]
    if ndim < 3 or ndim > 7:
        raise CorruptHeader(f"{path}: unsupported dim[0]={ndim}")
    if any(d != 1 for d in dim[4 : 1 + ndim]):
        raise CorruptHeader(f"{path}: volume is not 3D (dim={dim[1:1 + ndim]})")
    nx, ny, nz = dim[1], dim[2], dim[3]
    if nx < 1 or ny < 1 or nz < 1:
        raise CorruptHeader(f"{path}: non-positive dimensions {dim[1:4]}")

    (datatype,) = struct.unpack_from(order + "h", raw, 70)
    if datatype not in _CODE_TO_DTYPE:
        raise CorruptHeader(f"{path}: unsupported datatype code {datatype}")
    dtype = np.dtype(_CODE_TO_DTYPE[datatype]).newbyteorder(order)

    pixdim = struct.unpack_from(order + "8f", raw, 76)
    spacing = tuple(abs(p) if p != 0 else 1.0 for p in pixdim[1:4])

    (vox_offset,) = struct.unpack_from(order + "f", raw, 108)
    offset = int(vox_offset) if vox_offset >= HEADER_SIZE else VOX_OFFSET
    (scl_slope,) = struct.unpack_from(order + "f", raw, 112)
    (scl_inter,) = struct.unpack_from(order + "f", raw, 116)

    count = nx * ny * nz
    if len(raw) < offset + count * dtype.itemsize:
        raise CorruptHeader(f"{path}: data section truncated")
    flat = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    data = flat.reshape((nx, ny, nz), order="F")
    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        data = data.astype(np.float32) * scl_slope + scl_inter
    return np.ascontiguousarray(data), spacing


def write_nifti(path, data: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> None:
    """Write a 3D array as a single-file little-endian NIfTI-1 volume.

    `.gz` suffixed paths are gzip-compressed (mtime pinned to 0 so repeated
    writes are byte-identical).
    """
    path = Path(path)
    data = np.asarray(data)
    if data.ndim != 3:
        raise ValueError(f"expected a 3D array, got shape {data.shape}")
    dtype = data.dtype.newbyteorder("<") if data.dtype.byteorder == ">" else data.dtype
    if np.dtype(dtype) not in _DTYPE_TO_CODE:
        raise ValueError(f"unsupported dtype for NIfTI output: {data.dtype}")
    code = _DTYPE_TO_CODE[np.dtype(dtype)]

    hdr = bytearray(VOX_OFFSET)  # header + zeroed extension flag
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<c", hdr, 38, b"r")
    struct.pack_into("<8h", hdr, 40, 3, data.shape[0], data.shape[1], data.shape[2], 1, 1, 1, 1)
    struct.pack_into("<h", hdr, 70, code)
    struct.pack_into("<h", hdr, 72, np.dtype(dtype).itemsize * 8)
    struct.pack_into("<8f", hdr, 76, 1.0, spacing[0], spacing[1], spacing[2], 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<f", hdr, 108, float(VOX_OFFSET))
    struct.pack_into("<f", hdr, 112, 1.0)  # scl_slope
    struct.pack_into("<f", hdr, 116, 0.0)  # scl_inter
    struct.pack_into("<c", hdr, 123, bytes([10]))  # xyzt_units: mm | sec
    struct.pack_into("<h", hdr, 254, 1)  # sform_code: scanner
    struct.pack_into("<4f", hdr, 280, spacing[0], 0.0, 0.0, 0.0)
    struct.pack_into("<4f", hdr, 296, 0.0, spacing[1], 0.0, 0.0)
    struct.pack_into("<4f", hdr, 312, 0.0, 0.0, spacing[2], 0.0)
    struct.pack_into("<4s", hdr, 344, b"n+1\x00")

    payload = bytes(hdr) + np.asfortranarray(data.astype(dtype, copy=False)).tobytes(order="F")
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.name.endswith(".gz"):
        # pin filename/mtime so identical volumes produce identical bytes
        with open(path, "wb") as raw_f:
            with gzip.GzipFile(filename="", fileobj=raw_f, mode="wb", mtime=0) as f:
                f.write(payload)
    else:
        with open(path, "wb") as f:
            f.write(payload)
