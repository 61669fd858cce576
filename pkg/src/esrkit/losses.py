"""Loss evaluators (forward values only, no gradients)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import fixed_kernel
from .image import rgb_to_gray
from .tensor import ConvParams, ShapeError, activation, as_tensor, conv2d

__all__ = [
    "l1",
    "l2",
    "RandomFeatureExtractor",
    "contrastive",
    "GvConfig",
    "gradient_maps",
    "patch_variance",
    "gv_loss",
    "eg_loss",
    "hfen",
]


def _pair(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a.astype(np.float64), b.astype(np.float64)


def l1(pred, target) -> float:
    a, b = _pair(pred, target)
    return float(np.mean(np.abs(a - b)))


def l2(pred, target) -> float:
    a, b = _pair(pred, target)
    return float(np.mean((a - b) ** 2))


class RandomFeatureExtractor:
    """Two fixed, randomly initialised conv layers with a leaky ReLU between.

    Weights come from ``numpy.random.default_rng(seed)``, uniform in
    ``±1/sqrt(fan_in)``; the convs have no bias.
    """

    def __init__(self, seed: int, channels: int = 16, k: int = 3, in_channels: int = 3, slope: float = 0.2):
        self.seed = seed
        self.channels = channels
        self.slope = slope
        rng = np.random.default_rng(seed)
        self.p1 = ConvParams.square(in_channels, channels, k, has_bias=False)
        self.p2 = ConvParams.square(channels, channels, k, has_bias=False)
        w1 = rng.uniform(-1, 1, self.p1.weight_shape) / np.sqrt(in_channels * k * k)
        w2 = rng.uniform(-1, 1, self.p2.weight_shape) / np.sqrt(channels * k * k)
        self.w1 = w1.astype(np.float32)
        self.w2 = w2.astype(np.float32)
        self.w1.setflags(write=False)
        self.w2.setflags(write=False)

    def __call__(self, x) -> np.ndarray:
        h = conv2d(x, self.p1, self.w1, fast=True)
        h = activation(h, "leaky_relu", self.slope)
        return conv2d(h, self.p2, self.w2, fast=True)


def contrastive(sr, hr, lr_up, extractor: RandomFeatureExtractor, eps: float = 1e-8) -> float:
    """``|phi(sr) - phi(hr)|_1 / (|phi(sr) - phi(lr_up)|_1 + eps)`` with mean-reduced L1."""
    sr, hr = _pair(sr, hr)
    _, lr_up = _pair(sr, lr_up)
    fs = extractor(sr).astype(np.float64)
    num = np.mean(np.abs(fs - extractor(hr)))
    den = np.mean(np.abs(fs - extractor(lr_up)))
    return float(num / (den + eps))


@dataclass(frozen=True)
class GvConfig:
    n: int = 8
    lambda_x: float = 0.01
    lambda_y: float = 0.01
    lambda_l: float = 0.01

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("patch size n must be at least 2")
        if min(self.lambda_x, self.lambda_y, self.lambda_l) < 0:
            raise ValueError("loss weights must be nonnegative")


def _filter_valid(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Per-channel 'valid' correlation with a 3x3 kernel, float64."""
    h, w = x.shape[2:]
    if h < 3 or w < 3:
        raise ShapeError(f"image {h}x{w} too small for a 3x3 filter")
    out = np.zeros(x.shape[:2] + (h - 2, w - 2))
    for u in range(3):
        for v in range(3):
            if kernel[u, v]:
                out += kernel[u, v] * x[:, :, u : u + h - 2, v : v + w - 2]
    return out


def gradient_maps(t) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sobel-x, Sobel-y and Laplacian responses of the grayscale image."""
    g = rgb_to_gray(t).astype(np.float64)
    return tuple(_filter_valid(g, fixed_kernel(k)) for k in ("sobel_x", "sobel_y", "laplacian"))


def patch_variance(m: np.ndarray, n: int) -> np.ndarray:
    """Unbiased variance of each non-overlapping ``n x n`` patch (top-left crop to multiples of n)."""
    b, c, h, w = m.shape
    if h < n or w < n:
        raise ShapeError(f"gradient map {h}x{w} smaller than patch size {n}")
    hh, ww = h - h % n, w - w % n
    p = m[:, :, :hh, :ww].reshape(b, c, hh // n, n, ww // n, n).transpose(0, 1, 2, 4, 3, 5)
    return p.reshape(b, c, hh // n, ww // n, n * n).var(axis=-1, ddof=1)


def gv_loss(sr, hr, cfg: GvConfig = GvConfig()) -> tuple[float, float, float]:
    """Gradient-variance distances ``(L_x, L_y, L_l)``, each a mean squared difference."""
    sr, hr = _pair(sr, hr)
    out = []
    for ms, mh in zip(gradient_maps(sr), gradient_maps(hr)):
        vs, vh = patch_variance(ms, cfg.n), patch_variance(mh, cfg.n)
        out.append(float(np.mean((vs - vh) ** 2)))
    return tuple(out)


def eg_loss(sr, hr, cfg: GvConfig = GvConfig()) -> float:
    lx, ly, ll = gv_loss(sr, hr, cfg)
    return l1(sr, hr) + cfg.lambda_x * lx + cfg.lambda_y * ly + cfg.lambda_l * ll


def hfen(sr, hr) -> float:
    """Mean absolute difference of per-channel Laplacian responses."""
    sr, hr = _pair(sr, hr)
    k = fixed_kernel("laplacian")
    return float(np.mean(np.abs(_filter_valid(sr, k) - _filter_valid(hr, k))))
