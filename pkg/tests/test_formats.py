import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from lsrseg.formats import (
    FormatError,
    decode_tensor,
    encode_tensor,
    read_labels,
    read_tensor,
    write_labels,
    write_tensor,
)


def test_known_layout():
    arr = np.arange(24, dtype=np.float64).reshape(2, 3, 4)
    buf = encode_tensor(arr)
    assert buf[:4] == b"LSRT"
    assert buf[4] == 1 and buf[5] == 1
    assert struct.unpack_from("<H", buf, 6)[0] == 3
    assert struct.unpack_from("<3I", buf, 16) == (2, 3, 4)
    assert len(buf) == 16 + 12 + 24 * 8
    np.testing.assert_array_equal(np.frombuffer(buf[28:], "<f8"), np.arange(24.0))


@settings(max_examples=60, deadline=None)
@given(st.sampled_from([np.float64, np.float32, np.uint8]).flatmap(
    lambda dt: arrays(dt, array_shapes(min_dims=0, max_dims=4, max_side=5))))
def test_roundtrip_is_bit_exact(arr):
    out = decode_tensor(encode_tensor(arr))
    assert out.dtype == arr.dtype and out.shape == arr.shape
    assert out.tobytes() == np.ascontiguousarray(arr).tobytes()


def test_file_roundtrip(tmp_path):
    arr = np.random.default_rng(0).normal(size=(3, 5)).astype(np.float32)
    write_tensor(tmp_path / "a.lsrt", arr)
    assert read_tensor(tmp_path / "a.lsrt").tobytes() == arr.tobytes()


def _code(buf):
    with pytest.raises(FormatError) as info:
        decode_tensor(buf)
    return info.value.code


def test_error_codes():
    good = encode_tensor(np.ones((2, 2)))
    assert _code(b"NOPE" + good[4:]) == "bad_magic"
    assert _code(good[:4] + b"\x02" + good[5:]) == "bad_version"
    assert _code(good[:5] + b"\x09" + good[6:]) == "bad_dtype"
    assert _code(good[:-1]) == "truncated"
    assert _code(good[:10]) == "truncated"
    assert _code(good + b"\x00") == "trailing_bytes"
    huge = good[:16] + struct.pack("<2I", 1 << 20, 1 << 20)
    assert _code(huge) == "dim_overflow"


def test_unsupported_dtype():
    with pytest.raises(TypeError):
        encode_tensor(np.ones(3, dtype=np.int32))


def test_label_roundtrip_and_errors(tmp_path):
    lab = np.random.default_rng(0).integers(0, 5, size=(6, 7)).astype(np.uint8)
    lab[0, 0] = 255
    write_labels(tmp_path / "l.lsrl", lab)
    raw = (tmp_path / "l.lsrl").read_bytes()
    assert raw[:4] == b"LSRL" and len(raw) == 16 + 42
    np.testing.assert_array_equal(read_labels(tmp_path / "l.lsrl"), lab)
    (tmp_path / "bad.lsrl").write_bytes(raw[:-1])
    with pytest.raises(FormatError, match="truncated"):
        read_labels(tmp_path / "bad.lsrl")
    (tmp_path / "bad.lsrl").write_bytes(b"LSRT" + raw[4:])
    with pytest.raises(FormatError, match="bad_magic"):
        read_labels(tmp_path / "bad.lsrl")
    with pytest.raises(ValueError):
        write_labels(tmp_path / "x.lsrl", np.zeros((2, 2, 2)))
