"""Image I/O, bicubic degradation, color conversion and the PSNR protocol."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import png
from .tensor import ShapeError, as_tensor

__all__ = [
    "ImageU8",
    "DegradeConfig",
    "load_png",
    "save_png",
    "to_tensor",
    "to_image",
    "cubic",
    "resize_weights",
    "bicubic_resize",
    "rgb_to_gray",
    "psnr",
    "GRAY_COEFFS",
]

GRAY_COEFFS = (0.299, 0.587, 0.114)


@dataclass(frozen=True, eq=False)
class ImageU8:
    """An 8-bit RGB image stored as an ``(h, w, 3)`` uint8 array."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.dtype != np.uint8 or px.ndim != 3 or px.shape[2] != 3 or px.shape[0] < 1 or px.shape[1] < 1:
            raise ShapeError(f"ImageU8 needs a nonempty (h, w, 3) uint8 array, got {px.dtype} {px.shape}")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def __eq__(self, other):
        return isinstance(other, ImageU8) and np.array_equal(self.pixels, other.pixels)


@dataclass(frozen=True)
class DegradeConfig:
    scale: int = 4
    antialias: bool = True
    a: float = -0.5

    def __post_init__(self):
        if self.scale < 1:
            raise ValueError(f"scale must be >= 1, got {self.scale}")


def load_png(path) -> ImageU8:
    return ImageU8(png.decode(Path(path).read_bytes()))


def save_png(img: ImageU8, path) -> None:
    Path(path).write_bytes(png.encode(img.pixels))


def to_tensor(img: ImageU8) -> np.ndarray:
    """``(h, w, 3)`` uint8 -> ``(1, 3, h, w)`` float32 in [0, 1]."""
    return (img.pixels.astype(np.float32) / np.float32(255.0)).transpose(2, 0, 1)[None].copy()


def to_image(t) -> ImageU8:
    """Inverse of :func:`to_tensor`: clamp to [0, 1], scale by 255, round half away from zero."""
    t = as_tensor(t)
    if t.shape[0] != 1 or t.shape[1] != 3:
        raise ShapeError(f"to_image needs a (1, 3, h, w) tensor, got {t.shape}")
    v = np.clip(t[0].astype(np.float64), 0.0, 1.0) * 255.0
    # values are nonnegative after clamping, so floor(v + 0.5) rounds half away from zero
    q = np.floor(v + 0.5).astype(np.uint8)
    return ImageU8(np.ascontiguousarray(q.transpose(1, 2, 0)))


def cubic(x, a: float = -0.5):
    """Keys cubic convolution kernel."""
    ax = np.abs(np.asarray(x, np.float64))
    ax2, ax3 = ax * ax, ax * ax * ax
    near = (a + 2) * ax3 - (a + 3) * ax2 + 1
    far = a * ax3 - 5 * a * ax2 + 8 * a * ax - 4 * a
    return np.where(ax <= 1, near, np.where(ax <= 2, far, 0.0))


def resize_weights(in_len: int, out_len: int, antialias: bool = True, a: float = -0.5):
    """Per-output-sample taps ``(indices, weights)`` for one axis.

    Output sample ``j`` (1-based) maps to input coordinate
    ``u = j/scale + 0.5*(1 - 1/scale)`` with ``scale = out_len/in_len``.  When
    downscaling with antialiasing the kernel is stretched to
    ``scale*cubic(scale*x)`` and its support widened to ``4/scale``.  Weights
    are normalised to sum to one per output sample; out-of-range taps are
    mirrored back into the image (symmetric boundary).  Returned indices are
    0-based.
    """
    scale = out_len / in_len
    if scale < 1 and antialias:
        width = 4.0 / scale

        def kern(x):
            return scale * cubic(scale * x, a)
    else:
        width = 4.0

        def kern(x):
            return cubic(x, a)

    j = np.arange(1, out_len + 1, dtype=np.float64)
    u = j / scale + 0.5 * (1 - 1 / scale)
    left = np.floor(u - width / 2)
    taps = int(math.ceil(width)) + 2
    idx = left[:, None] + np.arange(taps)[None, :]
    w = kern(u[:, None] - idx)
    w = w / w.sum(axis=1, keepdims=True)
    mirror = np.concatenate([np.arange(in_len), np.arange(in_len - 1, -1, -1)])
    idx0 = mirror[np.mod(idx.astype(np.int64) - 1, 2 * in_len)]
    keep = np.any(w != 0, axis=0)
    return idx0[:, keep], w[:, keep]


def _resize_axis(x: np.ndarray, axis: int, out_len: int, antialias: bool, a: float) -> np.ndarray:
    idx, w = resize_weights(x.shape[axis], out_len, antialias, a)
    xm = np.moveaxis(x, axis, -1)
    out = np.zeros(xm.shape[:-1] + (out_len,), np.float64)
    for p in range(idx.shape[1]):
        out += xm[..., idx[:, p]] * w[:, p]
    return np.moveaxis(out, -1, axis)


def bicubic_resize(t, cfg: DegradeConfig = DegradeConfig(), direction: str = "down") -> np.ndarray:
    """Separable cubic resize by ``cfg.scale`` (rows first, then columns)."""
    t = as_tensor(t)
    n, c, h, w = t.shape
    s = cfg.scale
    if direction == "down":
        if h % s or w % s:
            raise ShapeError(f"height/width {h}x{w} not divisible by scale {s}")
        oh, ow = h // s, w // s
    elif direction == "up":
        oh, ow = h * s, w * s
    else:
        raise ValueError(f"direction must be 'down' or 'up', got {direction!r}")
    if s == 1:
        return t.copy()
    x = t.astype(np.float64)
    x = _resize_axis(x, 2, oh, cfg.antialias, cfg.a)
    x = _resize_axis(x, 3, ow, cfg.antialias, cfg.a)
    return x.astype(np.float32)


def rgb_to_gray(t) -> np.ndarray:
    t = as_tensor(t)
    if t.shape[1] != 3:
        raise ShapeError(f"rgb_to_gray needs 3 channels, got {t.shape[1]}")
    r, g, b = GRAY_COEFFS
    x = t.astype(np.float64)
    return (r * x[:, 0:1] + g * x[:, 1:2] + b * x[:, 2:3]).astype(np.float32)


def psnr(sr: ImageU8, hr: ImageU8, border: int = 4) -> float:
    """PSNR in dB over all RGB values after cropping ``border`` pixels per side.

    Identical crops give ``math.inf``.
    """
    if sr.pixels.shape != hr.pixels.shape:
        raise ShapeError(f"image size mismatch: {sr.pixels.shape} vs {hr.pixels.shape}")
    if border < 0:
        raise ValueError("border must be nonnegative")
    h, w = hr.height, hr.width
    if h < 2 * border + 1 or w < 2 * border + 1:
        raise ShapeError(f"image {h}x{w} too small for border {border}")
    a = sr.pixels[border : h - border, border : w - border].astype(np.float64) / 255.0
    b = hr.pixels[border : h - border, border : w - border].astype(np.float64) / 255.0
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)
