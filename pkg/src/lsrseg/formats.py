"""Binary tensor (LSRT) and label raster (LSRL) files.

LSRT layout, little-endian throughout::

    magic "LSRT" | u8 version=1 | u8 dtype | u16 ndim | 8 reserved zero bytes
    ndim x u32 extents | row-major payload

dtype codes: 1 = f64, 2 = f32, 3 = u8.

LSRL layout::

    magic "LSRL" | u32 H | u32 W | u32 reserved | H*W u8 class ids (255 = void)
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

TENSOR_MAGIC = b"LSRT"
LABEL_MAGIC = b"LSRL"
TENSOR_VERSION = 1
VOID = 255

_DTYPES = {1: np.dtype("<f8"), 2: np.dtype("<f4"), 3: np.dtype("u1")}
_CODES = {np.dtype("float64"): 1, np.dtype("float32"): 2, np.dtype("uint8"): 3}
_TENSOR_HEAD = struct.Struct("<4sBBH8x")
_LABEL_HEAD = struct.Struct("<4sIII")
MAX_PAYLOAD_BYTES = 1 << 40


class FormatError(ValueError):
    """Malformed LSRT/LSRL file.  ``code`` names the failure."""

    BAD_MAGIC = "bad_magic"
    BAD_VERSION = "bad_version"
    BAD_DTYPE = "bad_dtype"
    TRUNCATED = "truncated"
    DIM_OVERFLOW = "dim_overflow"
    TRAILING = "trailing_bytes"

    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code


def encode_tensor(array: np.ndarray) -> bytes:
    arr = np.asarray(array)
    if arr.dtype not in _CODES:
        raise TypeError(f"unsupported dtype {arr.dtype}")
    code = _CODES[arr.dtype]
    head = _TENSOR_HEAD.pack(TENSOR_MAGIC, TENSOR_VERSION, code, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + dims + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < _TENSOR_HEAD.size:
        if buf[:4] != TENSOR_MAGIC[: len(buf[:4])]:
            raise FormatError(FormatError.BAD_MAGIC, f"got {buf[:4]!r}")
        raise FormatError(FormatError.TRUNCATED, "header shorter than 16 bytes")
    magic, version, code, ndim = _TENSOR_HEAD.unpack_from(buf)
    if magic != TENSOR_MAGIC:
        raise FormatError(FormatError.BAD_MAGIC, f"got {magic!r}")
    if version != TENSOR_VERSION:
        raise FormatError(FormatError.BAD_VERSION, f"version {version}")
    if code not in _DTYPES:
        raise FormatError(FormatError.BAD_DTYPE, f"dtype code {code}")
    offset = _TENSOR_HEAD.size
    if len(buf) < offset + 4 * ndim:
        raise FormatError(FormatError.TRUNCATED, "extent table cut short")
    shape = struct.unpack_from(f"<{ndim}I", buf, offset)
    offset += 4 * ndim
    dtype = _DTYPES[code]
    nbytes = dtype.itemsize
    for extent in shape:
        nbytes *= extent
        if nbytes > MAX_PAYLOAD_BYTES:
            raise FormatError(FormatError.DIM_OVERFLOW, f"extents {shape} exceed payload limit")
    if len(buf) - offset < nbytes:
        raise FormatError(FormatError.TRUNCATED, f"need {nbytes} payload bytes, have {len(buf) - offset}")
    if len(buf) - offset > nbytes:
        raise FormatError(FormatError.TRAILING, f"{len(buf) - offset - nbytes} unexpected bytes")
    return np.frombuffer(buf, dtype=dtype, count=nbytes // dtype.itemsize, offset=offset).reshape(shape).copy()


def write_tensor(path: str | os.PathLike, array: np.ndarray) -> None:
    Path(path).write_bytes(encode_tensor(array))


def read_tensor(path: str | os.PathLike) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


def write_labels(path: str | os.PathLike, labels: np.ndarray) -> None:
    lab = np.asarray(labels)
    if lab.ndim != 2:
        raise ValueError(f"label map must be 2-D, got shape {lab.shape}")
    if lab.min(initial=0) < 0 or lab.max(initial=0) > 255:
        raise ValueError("label ids must fit in a byte")
    h, w = lab.shape
    Path(path).write_bytes(_LABEL_HEAD.pack(LABEL_MAGIC, h, w, 0) + lab.astype(np.uint8).tobytes())


def read_labels(path: str | os.PathLike) -> np.ndarray:
    buf = Path(path).read_bytes()
    if len(buf) < _LABEL_HEAD.size:
        raise FormatError(FormatError.TRUNCATED, "label header shorter than 16 bytes")
    magic, h, w, _ = _LABEL_HEAD.unpack_from(buf)
    if magic != LABEL_MAGIC:
        raise FormatError(FormatError.BAD_MAGIC, f"got {magic!r}")
    if h * w > MAX_PAYLOAD_BYTES:
        raise FormatError(FormatError.DIM_OVERFLOW, f"{h}x{w} label map")
    body = len(buf) - _LABEL_HEAD.size
    if body < h * w:
        raise FormatError(FormatError.TRUNCATED, f"need {h * w} bytes, have {body}")
    if body > h * w:
        raise FormatError(FormatError.TRAILING, f"{body - h * w} unexpected bytes")
    return np.frombuffer(buf, dtype=np.uint8, offset=_LABEL_HEAD.size).reshape(h, w).copy()
