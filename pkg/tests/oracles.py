"""Independent scalar-loop reference implementations used by the tests.

Nothing here imports the package; every value is recomputed from the
defining formulas with plain Python loops in float64.
"""

from __future__ import annotations

import math

import numpy as np


def conv2d_loops(x, w, b=None, stride=1, pad=(0, 0), dil=1, groups=1, pad_value=None):
    x = np.asarray(x, np.float64)
    w = np.asarray(w, np.float64)
    n, c, h, wd = x.shape
    co, cig, kh, kw = w.shape
    ph, pw = pad
    oh = (h + 2 * ph - dil * (kh - 1) - 1) // stride + 1
    ow = (wd + 2 * pw - dil * (kw - 1) - 1) // stride + 1
    cog = co // groups
    out = np.zeros((n, co, oh, ow))
    for bn in range(n):
        for o in range(co):
            g = o // cog
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0 if b is None else float(b[o])
                    for ci in range(cig):
                        cin = g * cig + ci
                        for u in range(kh):
                            for v in range(kw):
                                r = i * stride + u * dil - ph
                                s = j * stride + v * dil - pw
                                if 0 <= r < h and 0 <= s < wd:
                                    val = x[bn, cin, r, s]
                                elif pad_value is not None:
                                    val = float(pad_value[cin])
                                else:
                                    val = 0.0
                                acc += w[o, ci, u, v] * val
                    out[bn, o, i, j] = acc
    return out


def pool_loops(x, kind, k, stride, pad=0):
    n, c, h, w = x.shape
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    out = np.zeros((n, c, oh, ow))
    for a in range(n):
        for ch in range(c):
            for i in range(oh):
                for j in range(ow):
                    vals = []
                    for u in range(k):
                        for v in range(k):
                            r, s = i * stride + u - pad, j * stride + v - pad
                            if 0 <= r < h and 0 <= s < w:
                                vals.append(float(x[a, ch, r, s]))
                    out[a, ch, i, j] = max(vals) if kind == "max" else sum(vals) / len(vals)
    return out


def pixel_shuffle_loops(x, s):
    n, c, h, w = x.shape
    out = np.zeros((n, c // (s * s), h * s, w * s), x.dtype)
    for a in range(n):
        for cc in range(c // (s * s)):
            for y in range(h):
                for z in range(w):
                    for i in range(s):
                        for j in range(s):
                            out[a, cc, y * s + i, z * s + j] = x[a, cc * s * s + i * s + j, y, z]
    return out


def bilinear_loops(x, oh, ow):
    """Align-corners-false bilinear: src = (dst + 0.5) * in/out - 0.5, clamped below at 0."""
    n, c, h, w = x.shape
    out = np.zeros((n, c, oh, ow))

    def coord(d, n_in, n_out):
        src = max((d + 0.5) * n_in / n_out - 0.5, 0.0)
        i0 = min(int(math.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        return i0, i1, src - i0

    for i in range(oh):
        y0, y1, fy = coord(i, h, oh)
        for j in range(ow):
            x0, x1, fx = coord(j, w, ow)
            top = x[:, :, y0, x0] * (1 - fx) + x[:, :, y0, x1] * fx
            bot = x[:, :, y1, x0] * (1 - fx) + x[:, :, y1, x1] * fx
            out[:, :, i, j] = top * (1 - fy) + bot * fy
    return out


def keys_cubic(t, a=-0.5):
    t = abs(t)
    if t <= 1:
        return (a + 2) * t**3 - (a + 3) * t**2 + 1
    if t <= 2:
        return a * t**3 - 5 * a * t**2 + 8 * a * t - 4 * a
    return 0.0


def cubic_resize_1d(seq, out_len, antialias=True):
    """Scalar antialiased cubic resampling of one line, symmetric boundary."""
    n = len(seq)
    scale = out_len / n
    shrink = antialias and scale < 1
    width = 4 / scale if shrink else 4
    res = []
    for j in range(1, out_len + 1):
        u = j / scale + 0.5 * (1 - 1 / scale)
        left = math.floor(u - width / 2)
        taps = []
        for p in range(math.ceil(width) + 2):
            idx = left + p
            d = u - idx
            wt = scale * keys_cubic(scale * d) if shrink else keys_cubic(d)
            # 1-based idx mirrored into [1, n]
            m = idx
            while m < 1 or m > n:
                m = 1 - m if m < 1 else 2 * n + 1 - m
            taps.append((wt, m - 1))
        total = sum(t[0] for t in taps)
        res.append(sum(wt * seq[m] for wt, m in taps) / total)
    return res


SOBEL_X = [[1, 0, -1], [2, 0, -2], [1, 0, -1]]
SOBEL_Y = [list(r) for r in zip(*SOBEL_X)]
LAPLACE = [[0, 1, 0], [1, -4, 1], [0, 1, 0]]


def filter_valid_loops(img, k):
    h, w = len(img), len(img[0])
    return [[sum(k[u][v] * img[i + u][j + v] for u in range(3) for v in range(3)) for j in range(w - 2)] for i in range(h - 2)]


def patch_variance_loops(m, n):
    """Unbiased variance of each n x n patch, scanning from the top-left corner."""
    rows, cols = len(m) // n, len(m[0]) // n
    out = []
    for pi in range(rows):
        row = []
        for pj in range(cols):
            vals = [m[pi * n + a][pj * n + b] for a in range(n) for b in range(n)]
            mu = sum(vals) / len(vals)
            row.append(sum((v - mu) ** 2 for v in vals) / (len(vals) - 1))
        out.append(row)
    return out


def gv_loops(gray_sr, gray_hr, n):
    """Mean squared difference of patch-variance maps for the x, y and laplacian responses."""
    res = []
    for k in (SOBEL_X, SOBEL_Y, LAPLACE):
        vs = patch_variance_loops(filter_valid_loops(gray_sr, k), n)
        vh = patch_variance_loops(filter_valid_loops(gray_hr, k), n)
        diffs = [(a - b) ** 2 for ra, rb in zip(vs, vh) for a, b in zip(ra, rb)]
        res.append(sum(diffs) / len(diffs))
    return res


def two_conv_features(x, w1, w2, slope):
    h = conv2d_loops(x, w1, pad=(1, 1))
    h = np.where(h >= 0, h, slope * h)
    return conv2d_loops(h, w2, pad=(1, 1))
