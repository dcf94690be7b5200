import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from mxplan import tensorio
from mxplan.errors import DataError


def test_header_layout():
    buf = tensorio.encode(np.arange(6, dtype=np.float32).reshape(2, 3))
    assert buf[:4] == b"MXT1"
    assert buf[4] == 0 and buf[5] == 2
    assert struct.unpack_from("<2Q", buf, 6) == (2, 3)
    assert np.frombuffer(buf[22:], "<f4").tolist() == [0, 1, 2, 3, 4, 5]


@given(arrays(np.float32, array_shapes(min_dims=0, max_dims=4, max_side=5),
              elements=st.floats(width=32, allow_nan=False)))
def test_round_trip(arr):
    out = tensorio.decode(tensorio.encode(arr))
    assert out.shape == arr.shape
    np.testing.assert_array_equal(out, arr)


def test_file_round_trip(tmp_path):
    arr = np.random.default_rng(0).normal(size=(3, 4)).astype(np.float32)
    tensorio.save(tmp_path / "a.mxt", arr)
    np.testing.assert_array_equal(tensorio.load(tmp_path / "a.mxt"), arr)


@pytest.mark.parametrize("buf", [b"NOPE\x00\x01", b"MXT1\x07\x00", b"MXT1\x00\x01\x02"])
def test_malformed(buf):
    with pytest.raises(DataError):
        tensorio.decode(buf)


def test_size_mismatch():
    buf = tensorio.encode(np.zeros(4, np.float32))
    with pytest.raises(DataError):
        tensorio.decode(buf[:-4])


def test_missing_file(tmp_path):
    with pytest.raises(DataError):
        tensorio.load(tmp_path / "absent.mxt")
