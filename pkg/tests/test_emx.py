"""EMX v1 binary matrix format."""

import struct

import numpy as np
import pytest

from orthoadapt.emx import MAGIC, read_emx, write_emx
from orthoadapt.errors import FormatError, ValidationError


def test_round_trip_bytes(tmp_path):
    m = np.random.default_rng(0).standard_normal((7, 3))
    p1 = tmp_path / "a.emx"
    p2 = tmp_path / "b.emx"
    write_emx(p1, m)
    back = read_emx(p1)
    np.testing.assert_array_equal(back, m)
    write_emx(p2, back)
    assert p1.read_bytes() == p2.read_bytes()


def test_layout(tmp_path):
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    p = tmp_path / "m.emx"
    write_emx(p, m)
    raw = p.read_bytes()
    assert raw[:4] == MAGIC
    assert struct.unpack("<QQ", raw[4:20]) == (2, 2)
    assert np.frombuffer(raw[20:], dtype="<f8").tolist() == [1.0, 2.0, 3.0, 4.0]


def test_bad_magic(tmp_path):
    p = tmp_path / "bad.emx"
    p.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(FormatError):
        read_emx(p)


def test_truncated(tmp_path):
    m = np.ones((4, 4))
    p = tmp_path / "t.emx"
    write_emx(p, m)
    p.write_bytes(p.read_bytes()[:-8])
    with pytest.raises(FormatError):
        read_emx(p)


def test_rejects_non_finite(tmp_path):
    bad = np.zeros((2, 2))
    bad[0, 0] = np.inf
    with pytest.raises(ValidationError):
        write_emx(tmp_path / "x.emx", bad)
