"""NIfTI reader/writer round trips and header validation."""

from __future__ import annotations

import gzip
import struct

import numpy as np
import pytest

from brainseg import nifti
from brainseg.errors import CorruptHeader, MissingFile


@pytest.mark.parametrize("suffix", [".nii", ".nii.gz"])
@pytest.mark.parametrize(
    "dtype", [np.float32, np.float64, np.int16, np.int32, np.uint8]
)
def test_write_read_round_trip(tmp_path, suffix, dtype):
    rng = np.random.default_rng(3)
    if np.issubdtype(dtype, np.floating):
        data = rng.random((8, 8, 8)).astype(dtype)
    else:
        data = rng.integers(0, 100, size=(8, 8, 8)).astype(dtype)
    path = tmp_path / f"vol{suffix}"
    nifti.write_nifti(path, data, spacing=(0.9, 1.1, 1.25))
    back, spacing = nifti.read_nifti(path)
    assert back.dtype == data.dtype
    assert np.array_equal(back, data)
    assert spacing == pytest.approx((0.9, 1.1, 1.25), abs=1e-6)


def test_read_shape_matches_independent_header_parse(tmp_path):
    # oracle: pull dim[1..3] straight out of the header bytes
    data = np.arange(3 * 5 * 7, dtype=np.float32).reshape(3, 5, 7)
    path = tmp_path / "odd.nii"
    nifti.write_nifti(path, data)
    raw = path.read_bytes()
    dims = struct.unpack_from("<8h", raw, 40)
    assert dims[0] == 3
    back, _ = nifti.read_nifti(path)
    assert back.shape == (dims[1], dims[2], dims[3]) == (3, 5, 7)


def test_fortran_order_on_disk(tmp_path):
    # voxel (x, y, z) lives at flat index x + nx*y + nx*ny*z
    data = np.arange(2 * 3 * 4, dtype=np.float32).reshape(2, 3, 4)
    path = tmp_path / "order.nii"
    nifti.write_nifti(path, data)
    raw = path.read_bytes()[nifti.VOX_OFFSET :]
    flat = np.frombuffer(raw, dtype="<f4")
    for x in range(2):
        for y in range(3):
            for z in range(4):
                assert flat[x + 2 * y + 6 * z] == data[x, y, z]


def test_missing_file(tmp_path):
    with pytest.raises(MissingFile):
        nifti.read_nifti(tmp_path / "absent.nii.gz")


def test_truncated_file(tmp_path):
    path = tmp_path / "short.nii"
    path.write_bytes(b"\x00" * 100)
    with pytest.raises(CorruptHeader):
        nifti.read_nifti(path)


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.nii"
    data = np.zeros((2, 2, 2), dtype=np.float32)
    nifti.write_nifti(path, data)
    raw = bytearray(path.read_bytes())
    raw[344:348] = b"XXX\x00"
    path.write_bytes(bytes(raw))
    with pytest.raises(CorruptHeader):
        nifti.read_nifti(path)


def test_truncated_data_section(tmp_path):
    path = tmp_path / "cut.nii"
    nifti.write_nifti(path, np.ones((4, 4, 4), dtype=np.float32))
    whole = path.read_bytes()
    path.write_bytes(whole[: len(whole) - 32])
    with pytest.raises(CorruptHeader):
        nifti.read_nifti(path)


def test_gzip_detection_by_content(tmp_path):
    # .nii name but gzipped payload still reads
    data = np.ones((3, 3, 3), dtype=np.float32)
    gz = tmp_path / "x.nii.gz"
    nifti.write_nifti(gz, data)
    renamed = tmp_path / "x.nii"
    renamed.write_bytes(gz.read_bytes())
    back, _ = nifti.read_nifti(renamed)
    assert np.array_equal(back, data)


def test_big_endian_volume(tmp_path):
    # hand-build a big-endian header + payload
    data = np.arange(8, dtype=">f4").reshape(2, 2, 2)
    hdr = bytearray(nifti.VOX_OFFSET)
    struct.pack_into(">i", hdr, 0, 348)
    struct.pack_into(">8h", hdr, 40, 3, 2, 2, 2, 1, 1, 1, 1)
    struct.pack_into(">h", hdr, 70, 16)
    struct.pack_into(">h", hdr, 72, 32)
    struct.pack_into(">8f", hdr, 76, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into(">f", hdr, 108, float(nifti.VOX_OFFSET))
    struct.pack_into(">f", hdr, 112, 1.0)
    struct.pack_into("4s", hdr, 344, b"n+1\x00")
    path = tmp_path / "be.nii"
    path.write_bytes(bytes(hdr) + np.asfortranarray(data).tobytes(order="F"))
    back, _ = nifti.read_nifti(path)
    assert np.array_equal(back.astype(np.float32), data.astype(np.float32))


def test_scl_slope_applied(tmp_path):
    path = tmp_path / "scaled.nii"
    nifti.write_nifti(path, np.full((2, 2, 2), 10, dtype=np.int16))
    raw = bytearray(path.read_bytes())
    struct.pack_into("<f", raw, 112, 2.0)  # scl_slope
    struct.pack_into("<f", raw, 116, 1.0)  # scl_inter
    path.write_bytes(bytes(raw))
    back, _ = nifti.read_nifti(path)
    assert np.allclose(back, 21.0)


def test_rejects_4d(tmp_path):
    path = tmp_path / "4d.nii"
    nifti.write_nifti(path, np.zeros((2, 2, 2), dtype=np.float32))
    raw = bytearray(path.read_bytes())
    struct.pack_into("<8h", raw, 40, 4, 2, 2, 2, 5, 1, 1, 1)
    path.write_bytes(bytes(raw))
    with pytest.raises(CorruptHeader):
        nifti.read_nifti(path)


def test_deterministic_gzip_bytes(tmp_path):
    data = np.arange(27, dtype=np.float32).reshape(3, 3, 3)
    a = tmp_path / "a.nii.gz"
    b = tmp_path / "b.nii.gz"
    nifti.write_nifti(a, data)
    nifti.write_nifti(b, data)
    assert a.read_bytes() == b.read_bytes()
    assert gzip.decompress(a.read_bytes()) == gzip.decompress(b.read_bytes())
