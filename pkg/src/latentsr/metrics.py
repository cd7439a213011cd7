"""Reference-based image quality metrics (PSNR, SSIM).

Both operate on float CHW images in [0,1] (evaluation happens after
decoding, before 8-bit quantization) and average over RGB channels.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import InvalidArgument

PSNR_CAP_DB = 99.0

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; zero MSE reports the 99 dB cap."""
    if a.shape != b.shape:
        raise InvalidArgument(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(peak**2 / mse))


def _window() -> np.ndarray:
    r = SSIM_WINDOW // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-(x**2) / (2.0 * SSIM_SIGMA**2))
    return k / k.sum()


def _filter_valid(img: np.ndarray, k: np.ndarray) -> np.ndarray:
    r = len(k) // 2
    out = ndimage.correlate1d(img, k, axis=-2, mode="constant")
    out = ndimage.correlate1d(out, k, axis=-1, mode="constant")
    return out[..., r:-r, r:-r]


def ssim(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """Mean local structural similarity over valid 11x11 window positions."""
    if a.shape != b.shape:
        raise InvalidArgument(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim != 3:
        raise InvalidArgument("expected (C, H, W) images")
    if min(a.shape[-2:]) < SSIM_WINDOW:
        raise InvalidArgument(
            f"image sides must be >= {SSIM_WINDOW}, got {a.shape[-2:]}")
    x = a.astype(np.float64)
    y = b.astype(np.float64)
    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2
    k = _window()
    mu_x = _filter_valid(x, k)
    mu_y = _filter_valid(y, k)
    var_x = _filter_valid(x * x, k) - mu_x**2
    var_y = _filter_valid(y * y, k) - mu_y**2
    cov = _filter_valid(x * y, k) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))


@dataclass
class MetricReport:
    """Per-image PSNR/SSIM values with their dataset means."""

    psnr_values: list = field(default_factory=list)
    ssim_values: list = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.psnr_values)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr_values))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim_values))

    def add(self, output: np.ndarray, reference: np.ndarray, peak: float = 1.0):
        self.psnr_values.append(psnr(output, reference, peak))
        self.ssim_values.append(ssim(output, reference, peak))

    def to_tsv(self) -> str:
        lines = ["index\tpsnr_db\tssim"]
        for i, (p, s) in enumerate(zip(self.psnr_values, self.ssim_values)):
            lines.append(f"{i}\t{p:.4f}\t{s:.6f}")
        lines.append(f"mean\t{self.mean_psnr:.4f}\t{self.mean_ssim:.6f}"
                     f"\tcount={self.count}")
        return "\n".join(lines) + "\n"
