"""Low-level raster helpers shared by the compositing, mask, and control modules.

Everything works on float64 numpy arrays, images shaped (H, W, C) or (H, W).
"""

from __future__ import annotations

import math

import numpy as np


def bilinear_resize(img: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Resize with bilinear filtering and half-pixel sample alignment.

    Interpolation is evaluated in lerp form ``a + t*(b - a)`` so a constant
    input resizes to exactly the same constant, which the control-weight
    path relies on for scalar recovery.
    """
    squeeze = img.ndim == 2
    if squeeze:
        img = img[:, :, None]
    h, w, c = img.shape
    oh, ow = out_hw
    if (oh, ow) == (h, w):
        out = img.copy()
        return out[:, :, 0] if squeeze else out

    # Half-pixel centers: output pixel i samples source coordinate
    # (i + 0.5) * scale - 0.5, clamped to the valid range.
    ys = (np.arange(oh, dtype=np.float64) + 0.5) * (h / oh) - 0.5
    xs = (np.arange(ow, dtype=np.float64) + 0.5) * (w / ow) - 0.5
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)

    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]

    img = img.astype(np.float64, copy=False)
    tl = img[y0][:, x0]
    tr = img[y0][:, x1]
    bl = img[y1][:, x0]
    br = img[y1][:, x1]

    top = tl + fx * (tr - tl)
    bot = bl + fx * (br - bl)
    out = top + fy * (bot - top)
    return out[:, :, 0] if squeeze else out


def block_mean(img: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Area-average downsample. Output dims must divide the input dims."""
    squeeze = img.ndim == 2
    if squeeze:
        img = img[:, :, None]
    h, w, c = img.shape
    oh, ow = out_hw
    if h % oh or w % ow:
        raise ValueError(f"block_mean: {(h, w)} not divisible by {(oh, ow)}")
    by, bx = h // oh, w // ow
    out = img.astype(np.float64, copy=False).reshape(oh, by, ow, bx, c).mean(axis=(1, 3))
    return out[:, :, 0] if squeeze else out


def gaussian_kernel_1d(sigma: float) -> np.ndarray:
    """Normalized 1-D Gaussian, truncated at 4 sigma."""
    if sigma <= 0:
        return np.array([1.0])
    radius = max(1, int(math.ceil(4.0 * sigma)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with reflect padding.

    Reflect boundaries keep every output a convex combination of inputs, so
    blurred values never leave the input range.
    """
    if sigma <= 0:
        return img.astype(np.float64).copy()
    k = gaussian_kernel_1d(sigma)
    r = (len(k) - 1) // 2
    out = img.astype(np.float64, copy=False)
    padded = np.pad(out, ((r, r), (0, 0)), mode="reflect")
    out = sum(k[i] * padded[i : i + out.shape[0]] for i in range(len(k)))
    padded = np.pad(out, ((0, 0), (r, r)), mode="reflect")
    out = sum(k[i] * padded[:, i : i + img.shape[1]] for i in range(len(k)))
    return out


def to_uint8(img: np.ndarray) -> np.ndarray:
    """[0,1] float image to uint8 with round-half-away like PIL."""
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def from_uint8(img: np.ndarray) -> np.ndarray:
    return img.astype(np.float64) / 255.0
