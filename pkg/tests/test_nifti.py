import gzip
import struct

import numpy as np
import pytest

from tractory.errors import FormatError, UnsupportedDatatypeError
from tractory.nifti import read_nifti, write_nifti
from tractory.volume import LabelVolume, Volume


def make_volume(rng, channels=1, dtype=np.float32):
    data = rng.normal(size=(4, 5, 6, channels)).astype(dtype)
    affine = np.eye(4)
    affine[:3, :3] = np.diag([1.2, 1.2, 1.2])
    affine[:3, 3] = (-3.0, 2.0, 7.5)
    return Volume(data, spacing=(1.2, 1.2, 1.2), affine=affine)


@pytest.mark.parametrize("suffix", [".nii", ".nii.gz"])
def test_round_trip_float32(tmp_path, suffix):
    rng = np.random.default_rng(11)
    v = make_volume(rng, channels=3)
    path = tmp_path / ("vol" + suffix)
    write_nifti(v, path)
    back = read_nifti(path)
    assert back.dims == v.dims
    assert back.channels == 3
    assert back.data.tobytes() == v.data.tobytes()
    assert np.allclose(back.affine, v.affine, atol=1e-6)
    assert np.allclose(back.spacing, v.spacing, atol=1e-6)


def test_write_read_write_bit_identical(tmp_path):
    rng = np.random.default_rng(12)
    v = make_volume(rng, channels=2)
    p1, p2 = tmp_path / "a.nii.gz", tmp_path / "b.nii.gz"
    write_nifti(v, p1)
    write_nifti(read_nifti(p1), p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_label_round_trip(tmp_path):
    labels = np.zeros((4, 4, 4), dtype=np.int16)
    labels[1:3, 1:3, 1:3] = 4
    labels[0] = 2
    lv = LabelVolume(labels, spacing=(2.0, 2.0, 2.0))
    path = tmp_path / "labels.nii.gz"
    write_nifti(lv, path)
    back = read_nifti(path, as_labels=True)
    assert np.array_equal(back.labels, labels)


def test_header_parsed_per_standard_layout(tmp_path):
    # hand-built 348-byte header: the reader must recover dim/pixdim from
    # the published byte offsets, independently of the writer
    dims = (3, 4, 5)
    pixdim = (0.9, 1.1, 1.3)
    data = np.arange(np.prod(dims), dtype="<f4").reshape(dims, order="F")
    hdr = bytearray(348)
    struct.pack_into("<i", hdr, 0, 348)
    struct.pack_into("<8h", hdr, 40, 3, *dims, 1, 1, 1, 1)
    struct.pack_into("<h", hdr, 70, 16)           # datatype float32
    struct.pack_into("<h", hdr, 72, 32)           # bitpix
    struct.pack_into("<8f", hdr, 76, 1.0, *pixdim, 1, 1, 1, 1)
    struct.pack_into("<f", hdr, 108, 352.0)       # vox_offset
    struct.pack_into("<f", hdr, 112, 1.0)         # scl_slope
    struct.pack_into("<h", hdr, 254, 1)           # sform_code
    struct.pack_into("<4f", hdr, 280, pixdim[0], 0, 0, 0)
    struct.pack_into("<4f", hdr, 296, 0, pixdim[1], 0, 0)
    struct.pack_into("<4f", hdr, 312, 0, 0, pixdim[2], 0)
    struct.pack_into("<4s", hdr, 344, b"n+1\x00")
    path = tmp_path / "hand.nii"
    path.write_bytes(bytes(hdr) + b"\x00" * 4 + data.tobytes(order="F"))

    v = read_nifti(path)
    assert v.dims == dims
    assert np.allclose(v.spacing, pixdim)
    assert np.array_equal(v.data[..., 0], data)


def test_bad_magic_raises(tmp_path):
    rng = np.random.default_rng(1)
    v = make_volume(rng)
    path = tmp_path / "x.nii"
    write_nifti(v, path)
    blob = bytearray(path.read_bytes())
    blob[344:348] = b"ni1\x00"
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatError):
        read_nifti(path)


def test_unsupported_datatype_raises(tmp_path):
    rng = np.random.default_rng(2)
    v = make_volume(rng)
    path = tmp_path / "x.nii"
    write_nifti(v, path)
    blob = bytearray(path.read_bytes())
    struct.pack_into("<h", blob, 70, 64)  # float64 code
    path.write_bytes(bytes(blob))
    with pytest.raises(UnsupportedDatatypeError):
        read_nifti(path)


def test_truncated_file_raises(tmp_path):
    rng = np.random.default_rng(3)
    v = make_volume(rng)
    path = tmp_path / "x.nii"
    write_nifti(v, path)
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(FormatError):
        read_nifti(path)
    path.write_bytes(blob[:100])
    with pytest.raises(FormatError):
        read_nifti(path)


def test_float64_write_rejected(tmp_path):
    v = Volume(np.zeros((2, 2, 2, 1), dtype=np.float64))
    with pytest.raises(UnsupportedDatatypeError):
        write_nifti(v, tmp_path / "x.nii")


def test_qform_warning(tmp_path):
    rng = np.random.default_rng(4)
    v = make_volume(rng)
    path = tmp_path / "x.nii"
    write_nifti(v, path)
    blob = bytearray(path.read_bytes())
    struct.pack_into("<h", blob, 252, 1)  # qform_code = 1
    path.write_bytes(bytes(blob))
    with pytest.warns(UserWarning, match="qform"):
        read_nifti(path)


def test_gzip_output_is_deterministic(tmp_path):
    rng = np.random.default_rng(5)
    v = make_volume(rng)
    p1, p2 = tmp_path / "a.nii.gz", tmp_path / "b.nii.gz"
    write_nifti(v, p1)
    write_nifti(v, p2)
    assert p1.read_bytes() == p2.read_bytes()
    # and actually gzipped
    assert p1.read_bytes()[:2] == b"\x1f\x8b"
    gzip.decompress(p1.read_bytes())
