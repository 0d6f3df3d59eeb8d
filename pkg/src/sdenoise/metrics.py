"""Image-quality metrics: PSNR and windowed SSIM."""

import math
from dataclasses import dataclass, field

import numpy as np

SSIM_WINDOW = 7
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def psnr(ref, test, peak=1.0):
    """10 log10(peak^2 / MSE); identical images report +inf."""
    ref = np.asarray(ref, dtype=float)
    test = np.asarray(test, dtype=float)
    if ref.shape != test.shape:
        raise ValueError(f"shape mismatch: {ref.shape} vs {test.shape}")
    if peak <= 0:
        raise ValueError("peak must be positive")
    mse = float(np.mean((ref - test) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def ssim(ref, test):
    """Mean structural similarity over 7x7 uniform windows, dynamic range 1.

    Inputs are 2-D images with values in [0, 1] and must be at least as
    large as the window.
    """
    ref = np.asarray(ref, dtype=float)
    test = np.asarray(test, dtype=float)
    if ref.shape != test.shape:
        raise ValueError(f"shape mismatch: {ref.shape} vs {test.shape}")
    if ref.ndim != 2:
        raise ValueError("ssim expects 2-D images")
    if min(ref.shape) < SSIM_WINDOW:
        raise ValueError(f"image {ref.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    for name, img in (("ref", ref), ("test", test)):
        if img.min() < -1e-9 or img.max() > 1.0 + 1e-9:
            raise ValueError(f"{name} image values outside [0, 1]")

    def window_mean(img):
        views = np.lib.stride_tricks.sliding_window_view(img, (SSIM_WINDOW, SSIM_WINDOW))
        return views.mean(axis=(2, 3))

    mu_r = window_mean(ref)
    mu_t = window_mean(test)
    var_r = window_mean(ref * ref) - mu_r * mu_r
    var_t = window_mean(test * test) - mu_t * mu_t
    cov = window_mean(ref * test) - mu_r * mu_t
    c1 = SSIM_K1**2
    c2 = SSIM_K2**2
    ssim_map = ((2 * mu_r * mu_t + c1) * (2 * cov + c2)) / (
        (mu_r * mu_r + mu_t * mu_t + c1) * (var_r + var_t + c2)
    )
    return float(ssim_map.mean())


@dataclass
class MetricReport:
    """Per-sample PSNR/SSIM values plus their mean and std aggregates."""

    psnr_values: list = field(default_factory=list)
    ssim_values: list = field(default_factory=list)
    meta: dict = field(
        default_factory=lambda: {
            "ssim_window": SSIM_WINDOW,
            "ssim_k1": SSIM_K1,
            "ssim_k2": SSIM_K2,
            "peak": 1.0,
        }
    )

    def add(self, psnr_value, ssim_value):
        self.psnr_values.append(float(psnr_value))
        self.ssim_values.append(float(ssim_value))

    @staticmethod
    def _mean_std(values):
        finite = [v for v in values if math.isfinite(v)]
        if not finite:
            return math.inf if values else math.nan, 0.0
        return float(np.mean(finite)), float(np.std(finite))

    @property
    def psnr_mean(self):
        return self._mean_std(self.psnr_values)[0]

    @property
    def psnr_std(self):
        return self._mean_std(self.psnr_values)[1]

    @property
    def ssim_mean(self):
        return self._mean_std(self.ssim_values)[0]

    @property
    def ssim_std(self):
        return self._mean_std(self.ssim_values)[1]


def evaluate_pairs(refs, tests, peak=1.0):
    """PSNR/SSIM for matched (ref, test) image pairs."""
    report = MetricReport()
    report.meta["peak"] = peak
    for ref, test in zip(refs, tests):
        report.add(psnr(ref, test, peak=peak), ssim(ref, test))
    return report
