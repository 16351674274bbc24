"""Minimal NIfTI-1 single-file I/O (.nii / .nii.gz).

Supports little-endian float32 / int16 / uint8 data, 3D scalar volumes
and 4D vector volumes (``dim[0]=4`` with ``dim[4]`` channels). Only the
sform affine is honored; a set qform triggers a warning and is ignored.
Write followed by read is bit-exact on dims, pixdim, sform and data.
"""

from __future__ import annotations

import gzip
import struct
import warnings

import numpy as np

from .errors import FormatError, UnsupportedDatatypeError
from .volume import LabelVolume, Volume

HEADER_SIZE = 348
VOX_OFFSET = 352  # header + 4-byte extension flag

# struct layout of the 348-byte NIfTI-1 header, little-endian
_HDR_FMT = "<i10s18sihcc8h3fhhhh8ffffhccffffii80s24shh6f4f4f4f16s4s"
assert struct.calcsize(_HDR_FMT) == HEADER_SIZE

_DTYPE_CODES = {16: np.dtype("<f4"), 4: np.dtype("<i2"), 2: np.dtype("<u1")}
_CODE_FOR_DTYPE = {v: k for k, v in _DTYPE_CODES.items()}
_BITPIX = {16: 32, 4: 16, 2: 8}


def _read_bytes(path) -> bytes:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:2] == b"\x1f\x8b":
        try:
            buf = gzip.decompress(buf)
        except (OSError, EOFError) as exc:
            raise FormatError(f"{path}: corrupt gzip container: {exc}") from exc
    return buf


def write_nifti(vol, path) -> None:
    """Write a Volume or LabelVolume as a single-file NIfTI-1 image.

    Label volumes are stored as uint8. Volume data must already be one of
    the supported dtypes (float32, int16, uint8) — cast explicitly first.
    Gzip output (``.nii.gz``) is byte-deterministic (mtime pinned to 0).
    """
    if isinstance(vol, LabelVolume):
        data = vol.labels.astype("<u1")
        spacing, affine = vol.spacing, vol.affine
    else:
        data = np.asarray(vol.data)
        if data.shape[-1] == 1:
            data = data[..., 0]
        spacing, affine = vol.spacing, vol.affine
        dt = np.dtype(data.dtype).newbyteorder("<")
        if dt not in _CODE_FOR_DTYPE:
            raise UnsupportedDatatypeError(
                f"dtype {data.dtype} not supported for NIfTI output; "
                "cast to float32, int16 or uint8 first")
        data = data.astype(dt, copy=False)

    code = _CODE_FOR_DTYPE[np.dtype(data.dtype).newbyteorder("<")]
    ndim = data.ndim
    if ndim == 3:
        dim = (3, *data.shape, 1, 1, 1, 1)
    elif ndim == 4:
        dim = (4, *data.shape, 1, 1, 1)
    else:
        raise ValueError("only 3D or 4D arrays can be written")
    pixdim = (1.0, *spacing, 1.0, 1.0, 1.0, 1.0)

    header = struct.pack(
        _HDR_FMT,
        HEADER_SIZE,            # sizeof_hdr
        b"", b"", 0, 0, b"r", b"\x00",
        *dim,                   # dim[8]
        0.0, 0.0, 0.0,          # intent_p1..p3
        0, code, _BITPIX[code], 0,
        *pixdim,                # pixdim[8]
        float(VOX_OFFSET), 1.0, 0.0,   # vox_offset, scl_slope, scl_inter
        0, b"\x00", b"\x00",
        0.0, 0.0, 0.0, 0.0, 0, 0,
        b"tractory", b"",
        0, 1,                   # qform_code=0, sform_code=1
        0.0, 0.0, 0.0, 0.0, 0.0, 0.0,  # quaternion block (unused)
        *affine[0], *affine[1], *affine[2],
        b"", b"n+1\x00",
    )
    payload = header + b"\x00" * (VOX_OFFSET - HEADER_SIZE) + data.tobytes(order="F")

    if str(path).endswith(".gz"):
        # filename pinned empty and mtime pinned 0 so output is byte-deterministic
        with open(path, "wb") as raw:
            with gzip.GzipFile(filename="", fileobj=raw, mode="wb", mtime=0) as fh:
                fh.write(payload)
    else:
        with open(path, "wb") as fh:
            fh.write(payload)


def read_nifti(path, as_labels: bool = False):
    """Read a NIfTI-1 file into a Volume (or LabelVolume with ``as_labels``)."""
    blob = _read_bytes(path)
    if len(blob) < HEADER_SIZE:
        raise FormatError(f"{path}: truncated header ({len(blob)} bytes)")
    fields = struct.unpack(_HDR_FMT, blob[:HEADER_SIZE])
    sizeof_hdr = fields[0]
    if sizeof_hdr != HEADER_SIZE:
        raise FormatError(
            f"{path}: sizeof_hdr={sizeof_hdr}; not a little-endian NIfTI-1 file")
    magic = fields[-1]
    if magic != b"n+1\x00":
        raise FormatError(f"{path}: bad magic {magic!r}; expected single-file 'n+1'")

    dim = fields[7:15]
    ndim = dim[0]
    if ndim not in (3, 4):
        raise FormatError(f"{path}: unsupported dim[0]={ndim}")
    shape = tuple(int(d) for d in dim[1:1 + ndim])
    if min(shape) < 1:
        raise FormatError(f"{path}: nonpositive dimension in {shape}")

    datatype = fields[19]
    if datatype not in _DTYPE_CODES:
        raise UnsupportedDatatypeError(f"{path}: datatype code {datatype} unsupported")
    dtype = _DTYPE_CODES[datatype]

    pixdim = fields[22:30]
    spacing = tuple(float(abs(p)) for p in pixdim[1:4])
    vox_offset = int(round(fields[30]))
    scl_slope, scl_inter = fields[31], fields[32]
    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        warnings.warn(f"{path}: scl_slope/scl_inter ignored")

    qform_code, sform_code = fields[44], fields[45]
    if qform_code > 0:
        warnings.warn(f"{path}: qform present but ignored (sform is authoritative)")
    if sform_code > 0:
        srow = np.array(fields[52:64], dtype=float).reshape(3, 4)
        affine = np.vstack([srow, [0.0, 0.0, 0.0, 1.0]])
    else:
        warnings.warn(f"{path}: no sform; using pixdim-diagonal affine")
        affine = np.diag([*spacing, 1.0])

    n_items = int(np.prod(shape))
    end = vox_offset + n_items * dtype.itemsize
    if len(blob) < end:
        raise FormatError(f"{path}: truncated data section")
    data = np.frombuffer(blob[vox_offset:end], dtype=dtype).reshape(shape, order="F")

    if as_labels:
        if not np.issubdtype(data.dtype, np.integer):
            raise UnsupportedDatatypeError(f"{path}: label volume must be integer typed")
        if data.ndim != 3:
            raise FormatError(f"{path}: label volume must be 3D")
        return LabelVolume(data.astype(np.int16), spacing=spacing, affine=affine)
    return Volume(data, spacing=spacing, affine=affine)
