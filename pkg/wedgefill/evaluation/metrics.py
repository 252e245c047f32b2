import logging
import math
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np
from scipy import ndimage

from wedgefill.core.errors import InvalidInputError
from wedgefill.core.validation import array_guard
from wedgefill.neural.losses import perceptual_proxy

logger = logging.getLogger(__name__)

SSIM_SIGMA = 1.5
SSIM_TRUNCATE = 3.5  # radius int(3.5 * 1.5 + 0.5) = 5, an 11x11 window
SSIM_RADIUS = 5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
PROXY_GAMMA = 0.5


def _metric_pair(a: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    array_guard.require_same_shape(a, b, names=("a", "b"))
    if a.ndim != 2:
        raise InvalidInputError(f"metrics take single 2-D images, got shape {a.shape}")
    array_guard.require_finite(a, "a")
    array_guard.require_finite(b, "b")
    return a, b


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """
    Peak signal-to-noise ratio for images in [0, 1]

    Returns:
        float: 10 log10(1 / MSE) in dB, +inf for identical images
    """
    a, b = _metric_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def capped_psnr(value: float, cap_db: float = 99.0) -> float:
    return min(value, cap_db)


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """
    Single-scale SSIM with an 11x11 Gaussian window (sigma 1.5), K1 = 0.01,
    K2 = 0.03 and a dynamic range of 1, averaged over the positions where the
    whole window lies inside the image.
    """
    a, b = _metric_pair(a, b)
    window = 2 * SSIM_RADIUS + 1
    if min(a.shape) < window:
        raise InvalidInputError(f"image {a.shape} smaller than the {window}x{window} SSIM window")

    def blur(x: np.ndarray) -> np.ndarray:
        return ndimage.gaussian_filter(x, SSIM_SIGMA, truncate=SSIM_TRUNCATE, mode="reflect")

    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    mu_a, mu_b = blur(a), blur(b)
    var_a = blur(a * a) - mu_a * mu_a
    var_b = blur(b * b) - mu_b * mu_b
    cov = blur(a * b) - mu_a * mu_b
    ssim_map = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    r = SSIM_RADIUS
    return float(ssim_map[r:-r, r:-r].mean())


@dataclass(frozen=True)
class MetricReport:
    """Quality of one reconstruction; proxy stands in for a learned perceptual metric"""

    psnr: float
    ssim: float
    proxy: float


def evaluate(image: np.ndarray, ground_truth: np.ndarray) -> MetricReport:
    """Score a reconstruction after clipping it to the [0, 1] display range"""
    estimate = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    return MetricReport(
        psnr=psnr(estimate, ground_truth),
        ssim=ssim(estimate, ground_truth),
        proxy=perceptual_proxy(estimate, ground_truth, PROXY_GAMMA),
    )


def mean_report(reports: Sequence[MetricReport], cap_db: float = 99.0) -> MetricReport:
    """Average over images or runs; PSNR is capped before averaging so one exact match stays finite"""
    if not reports:
        raise InvalidInputError("cannot average an empty list of metric reports")
    return MetricReport(
        psnr=float(np.mean([capped_psnr(r.psnr, cap_db) for r in reports])),
        ssim=float(np.mean([r.ssim for r in reports])),
        proxy=float(np.mean([r.proxy for r in reports])),
    )
