"""Separable image resampling and Gaussian blur on float CHW arrays.

Resampling builds a per-axis weight matrix whose rows are normalized to
sum to one, so constant images are mapped to constants exactly and border
handling (index clamping) cannot introduce gain. Downsampling stretches
the kernel by the scale factor (antialiasing); upsampling does not.

The bicubic kernel is Catmull-Rom (a = -0.5). Pixel centers follow the
half-pixel convention: output pixel j samples input coordinate
(j + 0.5) * in/out - 0.5.
"""

import math

import numpy as np
from scipy import ndimage

from .errors import InvalidArgument

RESAMPLE_METHODS = ("bicubic", "bilinear", "nearest")


def _catmull_rom(t: np.ndarray) -> np.ndarray:
    a = -0.5
    t = np.abs(t)
    out = np.zeros_like(t)
    near = t <= 1
    far = (t > 1) & (t < 2)
    out[near] = (a + 2) * t[near] ** 3 - (a + 3) * t[near] ** 2 + 1
    out[far] = a * t[far] ** 3 - 5 * a * t[far] ** 2 + 8 * a * t[far] - 4 * a
    return out


def _triangle(t: np.ndarray) -> np.ndarray:
    return np.maximum(0.0, 1.0 - np.abs(t))


_KERNELS = {"bicubic": (_catmull_rom, 2.0), "bilinear": (_triangle, 1.0)}


def _axis_weights(n_in: int, n_out: int, method: str) -> np.ndarray:
    """Dense (n_out, n_in) row-normalized resampling matrix for one axis."""
    if method not in RESAMPLE_METHODS:
        raise InvalidArgument(f"unknown resample method {method!r}")
    w = np.zeros((n_out, n_in), dtype=np.float64)
    ratio = n_in / n_out
    centers = (np.arange(n_out) + 0.5) * ratio - 0.5
    if method == "nearest":
        idx = np.clip(np.floor(centers + 0.5).astype(int), 0, n_in - 1)
        w[np.arange(n_out), idx] = 1.0
        return w
    kernel, support = _KERNELS[method]
    stretch = max(1.0, ratio)  # widen kernel when shrinking (antialias)
    radius = support * stretch
    for j in range(n_out):
        c = centers[j]
        lo = int(math.floor(c - radius)) + 1
        hi = int(math.floor(c + radius)) + 1
        taps = np.arange(lo, hi)
        vals = kernel((c - taps) / stretch)
        idx = np.clip(taps, 0, n_in - 1)
        np.add.at(w[j], idx, vals)
        w[j] /= w[j].sum()
    return w


def resize(img: np.ndarray, out_hw: tuple[int, int], method: str = "bicubic") -> np.ndarray:
    """Resize a (C, H, W) float array to (C, out_h, out_w)."""
    if img.ndim != 3:
        raise InvalidArgument(f"expected (C, H, W) array, got shape {img.shape}")
    _, h, w = img.shape
    out_h, out_w = out_hw
    if out_h < 1 or out_w < 1:
        raise InvalidArgument("output dimensions must be positive")
    wy = _axis_weights(h, out_h, method)
    wx = _axis_weights(w, out_w, method)
    tmp = np.einsum("oh,chw->cow", wy, img.astype(np.float64))
    return np.einsum("pw,cow->cop", wx, tmp)


def downsample(img: np.ndarray, scale: int, method: str = "bicubic") -> np.ndarray:
    """Shrink a (C, H, W) array by an integer factor (antialiased)."""
    if scale < 1:
        raise InvalidArgument("scale must be >= 1")
    c, h, w = img.shape
    if h % scale or w % scale:
        raise InvalidArgument(f"dimensions {h}x{w} not divisible by scale {scale}")
    if scale == 1:
        return img.astype(np.float64).copy()
    return resize(img, (h // scale, w // scale), method)


def upsample(img: np.ndarray, scale: int, method: str = "bicubic") -> np.ndarray:
    """Enlarge a (C, H, W) array by an integer factor."""
    if scale < 1:
        raise InvalidArgument("scale must be >= 1")
    if scale == 1:
        return img.astype(np.float64).copy()
    c, h, w = img.shape
    return resize(img, (h * scale, w * scale), method)


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with reflect padding; sigma <= 0 is identity."""
    if img.ndim != 3:
        raise InvalidArgument(f"expected (C, H, W) array, got shape {img.shape}")
    out = img.astype(np.float64).copy()
    if sigma <= 0:
        return out
    radius = max(1, int(math.ceil(3.0 * sigma)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(x**2) / (2.0 * sigma**2))
    k /= k.sum()
    out = ndimage.correlate1d(out, k, axis=1, mode="reflect")
    out = ndimage.correlate1d(out, k, axis=2, mode="reflect")
    return out
