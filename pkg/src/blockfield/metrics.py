"""Image quality metrics: PSNR and single-scale SSIM.

Both run on the linear [0, 1] float images, before any 8-bit
quantization, with a signal range of 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ImageBuffer

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def _pixels(img) -> np.ndarray:
    if isinstance(img, ImageBuffer):
        return img.pixels.astype(np.float64)
    return np.asarray(img, dtype=np.float64)


def psnr(img, ref) -> float:
    """Peak signal-to-noise ratio in dB; +inf for identical images."""
    a, b = _pixels(img), _pixels(ref)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return np.inf
    return -10.0 * np.log10(mse)


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-(x**2) / (2 * sigma**2))
    return k / k.sum()


def _filter_valid(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Separable valid-mode filtering of a 2D array."""
    win = kernel.size
    v = np.lib.stride_tricks.sliding_window_view(img, win, axis=0) @ kernel
    return np.lib.stride_tricks.sliding_window_view(v, win, axis=1) @ kernel


def ssim(img, ref) -> float:
    """Single-scale SSIM with an 11x11 Gaussian window (sigma 1.5),
    averaged over all valid window positions and the three channels."""
    a, b = _pixels(img), _pixels(ref)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if min(a.shape[0], a.shape[1]) < SSIM_WINDOW:
        raise ValueError(f"image smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    kernel = _gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA)
    values = []
    for ch in range(a.shape[2]):
        x, y = a[:, :, ch], b[:, :, ch]
        mu_x = _filter_valid(x, kernel)
        mu_y = _filter_valid(y, kernel)
        var_x = _filter_valid(x * x, kernel) - mu_x**2
        var_y = _filter_valid(y * y, kernel) - mu_y**2
        cov = _filter_valid(x * y, kernel) - mu_x * mu_y
        num = (2 * mu_x * mu_y + SSIM_C1) * (2 * cov + SSIM_C2)
        den = (mu_x**2 + mu_y**2 + SSIM_C1) * (var_x + var_y + SSIM_C2)
        values.append(np.mean(num / den))
    return float(np.mean(values))


@dataclass(frozen=True)
class MetricReport:
    """Per-image PSNR/SSIM plus their dataset means."""

    per_image_psnr: list[float]
    per_image_ssim: list[float]
    labels: list[str] | None = None

    def __post_init__(self):
        if len(self.per_image_psnr) != len(self.per_image_ssim):
            raise ValueError("psnr and ssim lists must parallel each other")
        if self.labels is not None and len(self.labels) != len(self.per_image_psnr):
            raise ValueError("labels must parallel the metric lists")

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.per_image_psnr))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.per_image_ssim))


def compare_images(pairs: list[tuple[ImageBuffer, ImageBuffer]], labels=None) -> MetricReport:
    return MetricReport(
        per_image_psnr=[psnr(a, b) for a, b in pairs],
        per_image_ssim=[ssim(a, b) for a, b in pairs],
        labels=labels,
    )
