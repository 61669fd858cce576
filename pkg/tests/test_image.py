import math
import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from esrkit import png
from esrkit.image import (
    DegradeConfig,
    ImageU8,
    bicubic_resize,
    load_png,
    psnr,
    resize_weights,
    rgb_to_gray,
    save_png,
    to_image,
    to_tensor,
)
from esrkit.png import PngDecodeError
from esrkit.tensor import ShapeError
from oracles import cubic_resize_1d


def img(arr):
    return ImageU8(np.asarray(arr, np.uint8))


# PNG


def test_png_roundtrip(tmp_path):
    a = img(np.random.default_rng(0).integers(0, 256, (17, 23, 3)))
    save_png(a, tmp_path / "a.png")
    assert load_png(tmp_path / "a.png") == a


def test_png_single_white_pixel(tmp_path):
    a = img(np.full((1, 1, 3), 255))
    save_png(a, tmp_path / "w.png")
    assert load_png(tmp_path / "w.png") == a


@pytest.mark.parametrize("cut", [10, 30, -13, -1])
def test_png_truncated_raises_with_offset(cut):
    data = png.encode(np.zeros((4, 4, 3), np.uint8))
    with pytest.raises(PngDecodeError) as err:
        png.decode(data[:cut])
    assert err.value.offset >= 0
    assert "byte offset" in str(err.value)


def test_png_crc_and_signature_errors():
    data = bytearray(png.encode(np.zeros((2, 2, 3), np.uint8)))
    with pytest.raises(PngDecodeError, match="signature"):
        png.decode(b"GIF89a" + bytes(data[6:]))
    data[20] ^= 0xFF  # inside IHDR body
    with pytest.raises(PngDecodeError, match="CRC") as err:
        png.decode(bytes(data))
    assert err.value.offset == 8


def _filter_rows(raw: np.ndarray, bpp: int, ftype: int) -> bytes:
    """Apply PNG filter ``ftype`` to every row (reference encoder, scalar loops)."""
    out = bytearray()
    prev = [0] * raw.shape[1]
    for row in raw.tolist():
        enc = []
        for i, x in enumerate(row):
            a = row[i - bpp] if i >= bpp else 0
            b = prev[i]
            c = prev[i - bpp] if i >= bpp else 0
            if ftype == 0:
                pred = 0
            elif ftype == 1:
                pred = a
            elif ftype == 2:
                pred = b
            elif ftype == 3:
                pred = (a + b) // 2
            else:
                p = a + b - c
                pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
                pred = a if pa <= pb and pa <= pc else (b if pb <= pc else c)
            enc.append((x - pred) & 0xFF)
        out.append(ftype)
        out += bytes(enc)
        prev = row
    return bytes(out)


def _png_bytes(raw: np.ndarray, width: int, color: int, ftype: int, bpp: int) -> bytes:
    def chunk(t, body):
        return struct.pack(">I", len(body)) + t + body + struct.pack(">I", zlib.crc32(t + body))

    ihdr = struct.pack(">IIBBBBB", width, raw.shape[0], 8, color, 0, 0, 0)
    return png.SIGNATURE + chunk(b"IHDR", ihdr) + chunk(b"IDAT", zlib.compress(_filter_rows(raw, bpp, ftype))) + chunk(b"IEND", b"")


@pytest.mark.parametrize("ftype", range(5))
@pytest.mark.parametrize("color,chans", [(0, 1), (2, 3), (4, 2), (6, 4)])
def test_png_decodes_all_filters_and_color_types(ftype, color, chans):
    rng = np.random.default_rng(ftype * 10 + color)
    px = rng.integers(0, 256, (5, 7, chans), dtype=np.uint8)
    out = png.decode(_png_bytes(px.reshape(5, 7 * chans), 7, color, ftype, chans))
    expected = np.repeat(px[:, :, :1], 3, axis=2) if chans <= 2 else px[:, :, :3]
    np.testing.assert_array_equal(out, expected)


# tensor conversion


def test_to_tensor_and_back():
    a = img([[[255, 0, 128]]])
    t = to_tensor(a)
    assert t.shape == (1, 3, 1, 1) and t[0, 0, 0, 0] == 1.0
    assert to_image(t) == a


@pytest.mark.parametrize("v,expected", [(0.5, 128), (-0.2, 0), (1.7, 255), (0.5 / 255, 1), (127.5 / 255, 128)])
def test_to_image_rounding(v, expected):
    t = np.full((1, 3, 1, 1), v, np.float32)
    assert to_image(t).pixels[0, 0, 0] == expected


def test_to_image_rejects_wrong_channels():
    with pytest.raises(ShapeError):
        to_image(np.zeros((1, 4, 2, 2), np.float32))


# bicubic


def test_bicubic_constant_and_identity():
    c = np.full((1, 3, 16, 12), 0.4, np.float32)
    assert np.allclose(bicubic_resize(c), 0.4, atol=1e-6)
    assert np.allclose(bicubic_resize(c[:, :, :4, :3], direction="up"), 0.4, atol=1e-6)
    x = np.random.default_rng(0).random((1, 3, 5, 7)).astype(np.float32)
    np.testing.assert_array_equal(bicubic_resize(x, DegradeConfig(scale=1)), x)


def test_bicubic_ramp_oracle():
    ramp = np.tile(np.arange(8, dtype=np.float32), (8, 1))
    x = np.broadcast_to(ramp, (1, 3, 8, 8)).copy()
    y = bicubic_resize(x)
    row = cubic_resize_1d(list(range(8)), 2)
    # rows are identical, so resizing down the rows leaves each column constant
    expected = np.array([row, row])
    assert y.shape == (1, 3, 2, 2)
    assert np.max(np.abs(y[0, 0] - expected)) <= 1e-6


@pytest.mark.parametrize("seed", range(6))
@pytest.mark.parametrize("direction", ["down", "up"])
def test_bicubic_separable_oracle(seed, direction):
    rng = np.random.default_rng(seed)
    s = int(rng.integers(2, 5))
    h, w = (s * int(rng.integers(1, 4)), s * int(rng.integers(1, 4))) if direction == "down" else (int(rng.integers(1, 5)), int(rng.integers(1, 5)))
    x = rng.random((1, 1, h, w))
    oh, ow = (h // s, w // s) if direction == "down" else (h * s, w * s)
    tmp = np.array([cubic_resize_1d(list(x[0, 0, :, j]), oh) for j in range(w)]).T
    ref = np.array([cubic_resize_1d(list(tmp[i]), ow) for i in range(oh)])
    y = bicubic_resize(x.astype(np.float32), DegradeConfig(scale=s), direction)
    assert np.max(np.abs(y[0, 0] - ref)) <= 1e-5


def test_bicubic_weights_normalised():
    idx, w = resize_weights(32, 8)
    assert np.allclose(w.sum(axis=1), 1.0)
    assert idx.min() >= 0 and idx.max() < 32


def test_bicubic_mass_conservation():
    x = np.full((1, 3, 32, 32), 0.3, np.float32)
    x[:, :, 13, 18] += 4.0
    up = bicubic_resize(x[:, :, ::4, ::4], direction="up")
    up[:, :, 17, 9] += 2.0
    for t in (x, up):
        y = bicubic_resize(t)
        assert abs(y.astype(np.float64).sum() * 16 / t.astype(np.float64).sum() - 1) <= 1e-4


def test_bicubic_rejects_non_divisible():
    with pytest.raises(ShapeError):
        bicubic_resize(np.zeros((1, 3, 10, 8), np.float32))


# gray


def test_rgb_to_gray():
    t = np.zeros((1, 3, 2, 2), np.float32)
    t[:, 0] = 1.0
    g = rgb_to_gray(t)
    assert g.shape == (1, 1, 2, 2)
    assert np.allclose(g, 0.299)
    v = np.full((1, 3, 2, 2), 0.37, np.float32)
    assert np.allclose(rgb_to_gray(v), 0.37, atol=1e-6)


# PSNR


def test_psnr_identical_is_inf():
    a = img(np.random.default_rng(1).integers(0, 256, (12, 12, 3)))
    assert psnr(a, a) == math.inf


def test_psnr_closed_form_20_17():
    sr = img(np.full((16, 16, 3), 128))
    hr = img(np.full((16, 16, 3), 153))
    expected = 10 * math.log10(1 / (25 / 255) ** 2)
    assert abs(psnr(sr, hr) - 20.17) <= 0.01
    assert psnr(sr, hr) == pytest.approx(expected, abs=1e-9)


def test_psnr_ignores_border():
    rng = np.random.default_rng(2)
    hr = rng.integers(0, 256, (20, 20, 3))
    sr = np.clip(hr + rng.integers(-5, 6, hr.shape), 0, 255)
    base = psnr(img(sr), img(hr))
    sr2 = sr.copy()
    sr2[:4] = 0
    sr2[-4:] = 255
    sr2[:, :4] = 17
    sr2[:, -4:] = 3
    assert psnr(img(sr2), img(hr)) == base


def test_psnr_symmetry_and_errors():
    rng = np.random.default_rng(3)
    a, b = img(rng.integers(0, 256, (10, 10, 3))), img(rng.integers(0, 256, (10, 10, 3)))
    assert psnr(a, b) == psnr(b, a)
    with pytest.raises(ShapeError):
        psnr(a, img(rng.integers(0, 256, (10, 11, 3))))
    with pytest.raises(ShapeError):
        psnr(img(np.zeros((8, 8, 3))), img(np.zeros((8, 8, 3))))


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), dy=st.integers(-5, 5), dx=st.integers(-5, 5), c=st.integers(0, 4))
def test_psnr_translation_invariant_crops(seed, dy, dx, c):
    rng = np.random.default_rng(seed)
    hr = rng.integers(0, 256, (24, 24, 3))
    sr = rng.integers(0, 256, (24, 24, 3))
    whole = psnr(img(sr), img(hr), border=0)
    shifted = psnr(img(np.roll(sr, (dy, dx), (0, 1))), img(np.roll(hr, (dy, dx), (0, 1))), border=0)
    assert shifted == pytest.approx(whole, rel=1e-12)
    inner = psnr(img(sr[c : 24 - c, c : 24 - c]), img(hr[c : 24 - c, c : 24 - c]), border=4 - c)
    assert inner == pytest.approx(psnr(img(sr), img(hr)), rel=1e-12)


def test_psnr_monotone_in_noise():
    rng = np.random.default_rng(4)
    hr = rng.integers(40, 216, (32, 32, 3))
    noise = rng.choice([-1, 1], hr.shape)
    vals = [psnr(img(hr + k * noise), img(hr)) for k in (1, 5, 20)]
    assert vals[0] > vals[1] > vals[2]
