import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fusionseg.errors import FormatError, NegativeOutput, NonIntegralOutput, ShapeMismatch
from fusionseg.tensor import (ConvGeometry, channel_slice, concat_channels, conv_out_size, load_tensor,
                              same_padding, save_tensor, tconv_out_size)


@pytest.mark.parametrize("M,F,S,P,d,out", [
    (50, 5, 1, 2, 1, 50),
    (50, 5, 1, 4, 2, 50),
    (200, 2, 2, 0, 1, 100),
    (7, 3, 2, 1, 1, 4),
])
def test_conv_out_size(M, F, S, P, d, out):
    assert conv_out_size(M, ConvGeometry(F, S, P, d)) == out


def test_dilated_effective_width():
    assert ConvGeometry(5, dilation=2).effective_width == 9
    assert same_padding(5, 2) == 4
    assert same_padding(1) == 0


def test_even_effective_width_has_no_same_padding():
    with pytest.raises(NonIntegralOutput):
        same_padding(4)


def test_conv_non_integral_and_negative():
    with pytest.raises(NonIntegralOutput):
        conv_out_size(6, ConvGeometry(3, 2, 0))
    with pytest.raises(NegativeOutput):
        conv_out_size(3, ConvGeometry(5, 1, 0))


@pytest.mark.parametrize("M,S,F,p,out", [(50, 2, 4, 1, 100), (100, 2, 4, 1, 200), (7, 1, 1, 0, 7)])
def test_tconv_out_size(M, S, F, p, out):
    assert tconv_out_size(M, ConvGeometry(F, S, cropping=p)) == out


def test_tconv_negative():
    with pytest.raises(NegativeOutput):
        tconv_out_size(1, ConvGeometry(1, 1, cropping=1))


@given(st.integers(1, 64), st.integers(1, 3), st.integers(1, 3))
def test_conv_inverts_tconv(M, S, half):
    # a stride-S conv undoes the size change of the matching transposed conv
    F = 2 * half
    g = ConvGeometry(F, S, padding=half - 1, cropping=half - 1)
    up = tconv_out_size(M, g)
    assert up == S * (M - 1) + 2
    assert conv_out_size(up, g) == M


def test_concat_channels():
    a = np.zeros((1, 16, 50, 50), np.float32)
    b = np.ones((1, 32, 50, 50), np.float32)
    c = concat_channels(a, b)
    assert c.shape == (1, 48, 50, 50)
    np.testing.assert_array_equal(channel_slice(c, 16, 48), b)
    assert concat_channels(np.zeros((2, 1, 4, 4)), np.zeros((2, 1, 4, 4))).shape == (2, 2, 4, 4)


def test_concat_mismatch():
    with pytest.raises(ShapeMismatch):
        concat_channels(np.zeros((1, 3, 8, 8)), np.zeros((1, 3, 9, 9)))
    with pytest.raises(ShapeMismatch):
        concat_channels(np.zeros((1, 3, 8, 8)), np.zeros((2, 3, 8, 8)))


@pytest.mark.parametrize("dtype", [np.float32, np.float64, np.uint8, np.int64])
def test_tensor_roundtrip(tmp_path, rng, dtype):
    x = (rng.standard_normal((2, 3, 5, 4)) * 50).astype(dtype)
    save_tensor(tmp_path / "x", x)
    y = load_tensor(tmp_path / "x")
    assert y.dtype == x.dtype and y.shape == x.shape
    np.testing.assert_array_equal(x, y)
    assert (tmp_path / "x.bin").stat().st_size == x.nbytes


def test_payload_is_little_endian(tmp_path):
    save_tensor(tmp_path / "t", np.array([1.0], dtype=np.float32))
    assert (tmp_path / "t.bin").read_bytes() == b"\x00\x00\x80\x3f"
    meta = json.loads((tmp_path / "t.meta.json").read_text())
    assert meta == {"version": 1, "dtype": "f32", "shape": [1]}


def test_truncated_payload(tmp_path):
    save_tensor(tmp_path / "t", np.arange(10, dtype=np.float32))
    p = tmp_path / "t.bin"
    p.write_bytes(p.read_bytes()[:-3])
    with pytest.raises(FormatError, match="offset 37"):
        load_tensor(tmp_path / "t")


def test_version_mismatch(tmp_path):
    save_tensor(tmp_path / "t", np.arange(3, dtype=np.int64))
    m = tmp_path / "t.meta.json"
    meta = json.loads(m.read_text())
    meta["version"] = 2
    m.write_text(json.dumps(meta))
    with pytest.raises(FormatError, match="expected version 1.*found 2"):
        load_tensor(tmp_path / "t")
