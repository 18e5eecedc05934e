import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from salsanet.nn.tnsr import (FormatError, decode_checkpoint, encode_checkpoint, encode_tensor, load_tensor,
                              read_tensor, save_tensor)
from salsanet.pnm import PnmError, read_pgm, read_ppm, write_pgm, write_ppm

f32 = st.floats(width=32, allow_nan=False)


def test_tnsr_layout():
    blob = encode_tensor(np.array([[1.0, 2.0, 3.0]], np.float32))
    assert blob[:4] == b"TNSR"
    assert struct.unpack_from("<I", blob, 4) == (2,)
    assert struct.unpack_from("<2Q", blob, 8) == (1, 3)
    assert struct.unpack_from("<3f", blob, 24) == (1.0, 2.0, 3.0)
    assert len(blob) == 24 + 12


@given(arrays(np.float32, array_shapes(min_dims=0, max_dims=4, min_side=0, max_side=5), elements=f32))
def test_tnsr_round_trip(a):
    b = read_tensor(encode_tensor(a))
    assert b.shape == a.shape and b.dtype == np.float32
    assert b.tobytes() == a.astype("<f4").tobytes()


def test_tnsr_file_round_trip(tmp_path, rng):
    a = rng.standard_normal((256, 64, 4)).astype(np.float32)
    save_tensor(tmp_path / "a.tnsr", a)
    assert np.array_equal(load_tensor(tmp_path / "a.tnsr"), a)


@pytest.mark.parametrize("blob", [b"", b"XXXX\0\0\0\0", b"TNSR\1\0\0\0", b"TNSR\1\0\0\0" + struct.pack("<Q", 3) + b"\0" * 8])
def test_tnsr_corrupt(blob):
    with pytest.raises(FormatError):
        read_tensor(blob)


def test_tnsr_trailing_bytes():
    with pytest.raises(FormatError):
        read_tensor(encode_tensor(np.zeros(2)) + b"\0")


def test_checkpoint_round_trip(rng):
    tensors = {"a.weight": rng.standard_normal((3, 2)).astype(np.float32), "b": np.zeros(0, np.float32)}
    header = {"iteration": 5, "arch": {"x": [1, 2]}}
    data = encode_checkpoint(header, tensors)
    assert data[:4] == b"SNCK"
    h, t = decode_checkpoint(data)
    assert h == header and list(t) == list(tensors)
    assert all(np.array_equal(t[k], tensors[k]) for k in tensors)
    assert encode_checkpoint(header, tensors) == data


def test_checkpoint_corruption_detected(rng):
    data = encode_checkpoint({"i": 1}, {"w": rng.standard_normal(10).astype(np.float32)})
    for bad in (data[:-1], data + b"\0", b"SNCX" + data[4:], data[:20], data[:8] + b"[" + data[9:]):
        with pytest.raises(FormatError):
            decode_checkpoint(bad)


def test_pgm_round_trip(rng):
    img = rng.integers(0, 256, (7, 11), dtype=np.uint8)
    data = write_pgm(img)
    assert data.startswith(b"P5\n11 7\n255\n")
    assert np.array_equal(read_pgm(data), img)


def test_pgm_ascii_and_comments():
    data = b"P2\n# a comment\n3 2\n255\n0 128 255\n1 2 3\n"
    assert read_pgm(data).tolist() == [[0, 128, 255], [1, 2, 3]]


@pytest.mark.parametrize("data", [b"P5\n2 2\n255\n\0", b"P6\n1 1\n255\nabc", b"P5\n1 1\n65535\n\0\0", b"P5\n"])
def test_pgm_errors(data):
    with pytest.raises(PnmError):
        read_pgm(data)


def test_ppm_round_trip(rng):
    rgb = rng.integers(0, 256, (4, 5, 3), dtype=np.uint8)
    assert np.array_equal(read_ppm(write_ppm(rgb)), rgb)
    with pytest.raises(PnmError):
        read_ppm(write_ppm(rgb)[:-1])
