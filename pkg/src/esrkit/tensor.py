"""Dense NCHW float32 primitives.

Tensors are plain ``numpy.ndarray`` objects of rank 4 and dtype float32.
Every function here is pure: inputs are never modified.

Convolution accumulation order on the serial path is fixed: the output is
initialised with the bias, then for each kernel row ``u``, each kernel column
``v`` and each input channel ``ci`` of the group (in that nesting order) the
product ``w[o, ci, u, v] * x[ci, ...]`` is added in a float64 accumulator
that is rounded to float32 once at the end.  This makes serial results
bitwise reproducible and makes grouped convolution exactly equal to running
each group on its own.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erf

__all__ = [
    "ShapeError",
    "ConvParams",
    "BnParams",
    "as_tensor",
    "conv2d",
    "pixel_shuffle",
    "pixel_unshuffle",
    "activation",
    "batchnorm_inference",
    "resize",
    "pool",
    "ACTIVATIONS",
]

ACTIVATIONS = ("relu", "leaky_relu", "prelu", "silu", "gelu", "sigmoid")


class ShapeError(ValueError):
    """Raised when tensor shapes or channel counts are inconsistent."""


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        a, b = v
        return int(a), int(b)
    return int(v), int(v)


@dataclass(frozen=True)
class ConvParams:
    """Static description of a 2-D convolution.

    ``padding`` is either one integer or an ``(pad_h, pad_w)`` pair; padding is
    symmetric along each axis.
    """

    out_channels: int
    in_channels: int
    kernel_h: int
    kernel_w: int
    stride: int = 1
    padding: int | tuple[int, int] = 0
    dilation: int = 1
    groups: int = 1
    has_bias: bool = True

    def __post_init__(self):
        for name in ("out_channels", "in_channels", "kernel_h", "kernel_w", "stride", "dilation", "groups"):
            if getattr(self, name) < 1:
                raise ShapeError(f"{name} must be positive, got {getattr(self, name)}")
        if min(self.pad) < 0:
            raise ShapeError(f"padding must be nonnegative, got {self.padding}")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ShapeError(
                f"in_channels={self.in_channels} and out_channels={self.out_channels} "
                f"must be divisible by groups={self.groups}"
            )

    @property
    def pad(self) -> tuple[int, int]:
        return _pair(self.padding)

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels // self.groups, self.kernel_h, self.kernel_w)

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        ph, pw = self.pad
        d, s = self.dilation, self.stride
        oh = (h + 2 * ph - d * (self.kernel_h - 1) - 1) // s + 1
        ow = (w + 2 * pw - d * (self.kernel_w - 1) - 1) // s + 1
        return oh, ow

    @classmethod
    def square(cls, cin: int, cout: int, k: int, **kw) -> "ConvParams":
        kw.setdefault("padding", k // 2)
        return cls(cout, cin, k, k, **kw)


@dataclass(frozen=True)
class BnParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = 1e-5

    def __post_init__(self):
        n = len(self.gamma)
        for name in ("beta", "running_mean", "running_var"):
            if len(getattr(self, name)) != n:
                raise ShapeError(f"BnParams.{name} has length {len(getattr(self, name))}, expected {n}")
        if np.any(np.asarray(self.running_var) < 0):
            raise ValueError("running_var must be nonnegative")
        if self.epsilon < 0:
            raise ValueError("epsilon must be nonnegative")

    @property
    def channels(self) -> int:
        return len(self.gamma)

    def affine(self) -> tuple[np.ndarray, np.ndarray]:
        """Return per-channel ``(scale, shift)`` such that ``bn(x) = scale*x + shift``."""
        g = np.asarray(self.gamma, np.float64)
        scale = g / np.sqrt(np.asarray(self.running_var, np.float64) + self.epsilon)
        shift = np.asarray(self.beta, np.float64) - np.asarray(self.running_mean, np.float64) * scale
        return scale, shift


def as_tensor(x) -> np.ndarray:
    """Coerce ``x`` to a rank-4 float32 array (no copy when already conforming)."""
    t = np.asarray(x, dtype=np.float32)
    if t.ndim != 4:
        raise ShapeError(f"expected a rank-4 (n, c, h, w) tensor, got shape {t.shape}")
    return t


def _pad_input(x: np.ndarray, ph: int, pw: int, fill: np.ndarray | None) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    n, c, h, w = x.shape
    if fill is None:
        return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    fill = np.asarray(fill, np.float32).reshape(1, c, 1, 1)
    out = np.empty((n, c, h + 2 * ph, w + 2 * pw), np.float32)
    out[...] = fill
    out[:, :, ph : ph + h, pw : pw + w] = x
    return out


def conv2d(
    x,
    params: ConvParams,
    weight,
    bias=None,
    *,
    pad_value=None,
    fast: bool = False,
) -> np.ndarray:
    """Cross-correlate ``x`` with ``weight`` (no kernel flip).

    ``pad_value`` optionally replaces zero padding with a per-input-channel
    constant.  ``fast=True`` uses a GEMM formulation whose results differ from
    the serial path only by float rounding.
    """
    x = as_tensor(x)
    n, c, h, w = x.shape
    if c != params.in_channels:
        raise ShapeError(f"input channels: got {c}, conv expects in_channels={params.in_channels}")
    weight = np.asarray(weight, np.float32)
    if weight.shape != params.weight_shape:
        raise ShapeError(f"weight shape: got {weight.shape}, expected {params.weight_shape}")
    if params.has_bias:
        if bias is None:
            raise ShapeError("bias: conv declares has_bias but no bias given")
        bias = np.asarray(bias, np.float32).reshape(-1)
        if bias.shape != (params.out_channels,):
            raise ShapeError(f"bias length: got {bias.shape[0]}, expected out_channels={params.out_channels}")
    elif bias is not None:
        raise ShapeError("bias: conv declares has_bias=False but a bias was given")
    if pad_value is not None and np.asarray(pad_value).reshape(-1).shape != (c,):
        raise ShapeError(f"pad_value length must equal input channels {c}")

    ph, pw = params.pad
    oh, ow = params.output_hw(h, w)
    if oh < 1 or ow < 1:
        raise ShapeError(f"height/width: input {h}x{w} too small for kernel {params.kernel_h}x{params.kernel_w}")
    xp = _pad_input(x, ph, pw, pad_value)

    g = params.groups
    cin_g = c // g
    cout_g = params.out_channels // g
    s, d = params.stride, params.dilation
    wg = weight.reshape(g, cout_g, cin_g, params.kernel_h, params.kernel_w)

    # float64 accumulator, rounded to float32 once at the end
    out = np.zeros((n, g, cout_g, oh, ow), np.float64)
    if bias is not None:
        out += bias.reshape(1, g, cout_g, 1, 1)

    if fast:
        return _conv_gemm(xp, wg, out, params, oh, ow)

    wg = wg.astype(np.float64)

    for u in range(params.kernel_h):
        r0 = u * d
        for v in range(params.kernel_w):
            c0 = v * d
            patch = xp[:, :, r0 : r0 + s * (oh - 1) + 1 : s, c0 : c0 + s * (ow - 1) + 1 : s]
            patch = patch.reshape(n, g, cin_g, oh, ow).astype(np.float64)
            for ci in range(cin_g):
                out += wg[None, :, :, ci, u, v, None, None] * patch[:, :, None, ci]
    return out.reshape(n, params.out_channels, oh, ow).astype(np.float32)


def _conv_gemm(xp, wg, out, params: ConvParams, oh: int, ow: int) -> np.ndarray:
    n = xp.shape[0]
    g, cout_g, cin_g, kh, kw = wg.shape
    s, d = params.stride, params.dilation
    cols = np.empty((n, g, cin_g, kh, kw, oh, ow), np.float64)
    xg = xp.reshape(n, g, cin_g, xp.shape[2], xp.shape[3])
    for u in range(kh):
        for v in range(kw):
            cols[:, :, :, u, v] = xg[:, :, :, u * d : u * d + s * (oh - 1) + 1 : s, v * d : v * d + s * (ow - 1) + 1 : s]
    cols = cols.reshape(n, g, cin_g * kh * kw, oh * ow)
    res = np.matmul(wg.reshape(g, cout_g, cin_g * kh * kw).astype(np.float64), cols)
    out += res.reshape(n, g, cout_g, oh, ow)
    return out.reshape(n, g * cout_g, oh, ow).astype(np.float32)


def pixel_shuffle(x, s: int) -> np.ndarray:
    """Rearrange ``(n, c*s*s, h, w)`` into ``(n, c, h*s, w*s)``."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    if s < 1 or c % (s * s):
        raise ShapeError(f"channels: {c} not divisible by scale^2={s * s}")
    co = c // (s * s)
    y = x.reshape(n, co, s, s, h, w).transpose(0, 1, 4, 2, 5, 3)
    return np.ascontiguousarray(y.reshape(n, co, h * s, w * s))


def pixel_unshuffle(x, s: int) -> np.ndarray:
    """Inverse of :func:`pixel_shuffle`."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    if s < 1 or h % s or w % s:
        raise ShapeError(f"height/width {h}x{w} not divisible by {s}")
    y = x.reshape(n, c, h // s, s, w // s, s).transpose(0, 1, 3, 5, 2, 4)
    return np.ascontiguousarray(y.reshape(n, c * s * s, h // s, w // s))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def activation(x, kind: str, slope=None) -> np.ndarray:
    """Apply an elementwise nonlinearity.

    ``slope`` is the negative slope for ``leaky_relu`` (default 0.01) or the
    per-channel slope vector for ``prelu``.
    """
    x = as_tensor(x)
    if kind == "relu":
        return np.maximum(x, np.float32(0))
    if kind == "leaky_relu":
        a = np.float32(0.01 if slope is None else slope)
        return np.where(x >= 0, x, x * a)
    if kind == "prelu":
        a = np.asarray(slope, np.float32).reshape(-1)
        if a.shape[0] != x.shape[1]:
            raise ShapeError(f"prelu slope length {a.shape[0]} != channels {x.shape[1]}")
        return np.where(x >= 0, x, x * a.reshape(1, -1, 1, 1))
    if kind == "sigmoid":
        return _sigmoid(x.astype(np.float64)).astype(np.float32)
    if kind == "silu":
        x64 = x.astype(np.float64)
        return (x64 * _sigmoid(x64)).astype(np.float32)
    if kind == "gelu":
        x64 = x.astype(np.float64)
        return (0.5 * x64 * (1.0 + erf(x64 / np.sqrt(2.0)))).astype(np.float32)
    raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def batchnorm_inference(x, bn: BnParams) -> np.ndarray:
    x = as_tensor(x)
    if x.shape[1] != bn.channels:
        raise ShapeError(f"channels: input has {x.shape[1]}, bn has {bn.channels}")
    mean = np.asarray(bn.running_mean, np.float32).reshape(1, -1, 1, 1)
    std = np.sqrt(np.asarray(bn.running_var, np.float32) + np.float32(bn.epsilon)).reshape(1, -1, 1, 1)
    gamma = np.asarray(bn.gamma, np.float32).reshape(1, -1, 1, 1)
    beta = np.asarray(bn.beta, np.float32).reshape(1, -1, 1, 1)
    return ((x - mean) / std * gamma + beta).astype(np.float32)


def _bilinear_axis(n_in: int, n_out: int):
    # align_corners=False: src = (dst + 0.5) * n_in / n_out - 0.5, clamped below at 0
    scale = n_in / n_out
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5
    src = np.maximum(src, 0.0)
    i0 = np.minimum(np.floor(src).astype(np.int64), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    lam = src - i0
    return i0, i1, lam


def resize(x, mode: str, out_h: int, out_w: int) -> np.ndarray:
    """Resize spatially with ``nearest`` (floor mapping) or ``bilinear``.

    Bilinear uses the half-pixel (align-corners-false) convention with source
    coordinates clamped at 0 and the last index.
    """
    x = as_tensor(x)
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"output size must be positive, got {out_h}x{out_w}")
    n, c, h, w = x.shape
    if mode == "nearest":
        ri = np.minimum((np.arange(out_h) * h) // out_h, h - 1)
        ci = np.minimum((np.arange(out_w) * w) // out_w, w - 1)
        return np.ascontiguousarray(x[:, :, ri][:, :, :, ci])
    if mode == "bilinear":
        y0, y1, ly = _bilinear_axis(h, out_h)
        x0, x1, lx = _bilinear_axis(w, out_w)
        xd = x.astype(np.float64)
        rows = xd[:, :, y0] * (1 - ly)[:, None] + xd[:, :, y1] * ly[:, None]
        out = rows[:, :, :, x0] * (1 - lx) + rows[:, :, :, x1] * lx
        return out.astype(np.float32)
    raise ValueError(f"unknown resize mode {mode!r}")


def pool(x, kind: str, k: int = 2, stride: int | None = None, padding: int = 0) -> np.ndarray:
    """Window reduction.  ``global_avg`` ignores ``k``/``stride`` and yields 1x1 maps.

    Padded positions never enter a window: they are ``-inf`` for max and are
    excluded from the denominator for avg.
    """
    x = as_tensor(x)
    n, c, h, w = x.shape
    if kind == "global_avg":
        return x.astype(np.float64).mean(axis=(2, 3), keepdims=True).astype(np.float32)
    if kind not in ("max", "avg"):
        raise ValueError(f"unknown pool kind {kind!r}")
    stride = k if stride is None else stride
    if k < 1 or stride < 1 or padding < 0:
        raise ShapeError("pool window, stride must be positive and padding nonnegative")
    if k > h + 2 * padding or k > w + 2 * padding:
        raise ShapeError(f"pool window {k} larger than input {h}x{w} (padding {padding})")
    oh = (h + 2 * padding - k) // stride + 1
    ow = (w + 2 * padding - k) // stride + 1
    fill = -np.inf if kind == "max" else 0.0
    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=fill)
    valid = np.pad(np.ones((h, w)), padding)
    acc = np.full((n, c, oh, ow), fill)
    cnt = np.zeros((oh, ow))
    for u in range(k):
        for v in range(k):
            win = xp[:, :, u : u + stride * (oh - 1) + 1 : stride, v : v + stride * (ow - 1) + 1 : stride]
            if kind == "max":
                np.maximum(acc, win, out=acc)
            else:
                acc += win
                cnt += valid[u : u + stride * (oh - 1) + 1 : stride, v : v + stride * (ow - 1) + 1 : stride]
    if kind == "avg":
        acc = acc / cnt
    return acc.astype(np.float32)
