import logging
from typing import Iterable, Sequence, Tuple

import numpy as np

from wedgefill.core.validation import array_guard
from wedgefill.tomo.geometry import Image

logger = logging.getLogger(__name__)

# (intensity, semi-axis a, semi-axis b, center x, center y, rotation deg) on [-1, 1]^2
SHEPP_LOGAN_ELLIPSES: Tuple[Tuple[float, float, float, float, float, float], ...] = (
    (2.00, 0.6900, 0.920, 0.00, 0.0000, 0.0),
    (-0.98, 0.6624, 0.874, 0.00, -0.0184, 0.0),
    (-0.02, 0.1100, 0.310, 0.22, 0.0000, -18.0),
    (-0.02, 0.1600, 0.410, -0.22, 0.0000, 18.0),
    (0.01, 0.2100, 0.250, 0.00, 0.3500, 0.0),
    (0.01, 0.0460, 0.046, 0.00, 0.1000, 0.0),
    (0.01, 0.0460, 0.046, 0.00, -0.1000, 0.0),
    (0.01, 0.0460, 0.023, -0.08, -0.6050, 0.0),
    (0.01, 0.0230, 0.023, 0.00, -0.6060, 0.0),
    (0.01, 0.0230, 0.046, 0.06, -0.6050, 0.0),
)


def _unit_grid(size: int) -> Tuple[np.ndarray, np.ndarray]:
    """Pixel-center coordinates on [-1, 1]; row 0 is the top (y = +1 side)"""
    coords = (2.0 * np.arange(size) - (size - 1)) / size
    return coords[None, :], -coords[:, None]


def ellipse_image(size: int, ellipses: Iterable[Sequence[float]]) -> Image:
    """Sum of constant-intensity ellipses sampled at pixel centers"""
    x, y = _unit_grid(size)
    image = np.zeros((size, size), dtype=np.float64)
    for intensity, a, b, x0, y0, phi_deg in ellipses:
        phi = np.deg2rad(phi_deg)
        dx, dy = x - x0, y - y0
        u = dx * np.cos(phi) + dy * np.sin(phi)
        v = -dx * np.sin(phi) + dy * np.cos(phi)
        image += intensity * ((u / a) ** 2 + (v / b) ** 2 <= 1.0)
    return image


def _rescale(image: Image) -> Image:
    low, high = float(image.min()), float(image.max())
    if high - low <= 0:
        return np.zeros_like(image)
    return (image - low) / (high - low)


def shepp_logan(size: int) -> Image:
    """Classical ten-ellipse head phantom, min-max rescaled to [0, 1]"""
    array_guard.require_image(np.zeros((size, size)), size, "phantom")
    return _rescale(ellipse_image(size, SHEPP_LOGAN_ELLIPSES))


def random_ellipse_phantom(size: int, seed: int) -> Image:
    """
    Random phantom: a body ellipse plus 4-11 inner ellipses, clipped to [0, 1]

    Inner centers lie within 0.8 of the half-width, intensities are drawn from
    [-0.5, 1]. Everything outside the inscribed circle is zero.

    Args:
        size: pixels per side (>= 16)
        seed: generator seed; equal seeds give bit-identical phantoms

    Returns:
        Image: size x size array in [0, 1]
    """
    array_guard.require_image(np.zeros((size, size)), size, "phantom")
    rng = np.random.default_rng(seed)
    count = int(rng.integers(5, 13))

    ellipses = [(
        rng.uniform(0.2, 0.5),
        rng.uniform(0.55, 0.8),
        rng.uniform(0.55, 0.8),
        0.0,
        0.0,
        rng.uniform(0.0, 180.0),
    )]
    for _ in range(count - 1):
        radius = 0.8 * np.sqrt(rng.uniform())
        angle = rng.uniform(0.0, 2.0 * np.pi)
        ellipses.append((
            rng.uniform(-0.5, 1.0),
            rng.uniform(0.04, 0.3),
            rng.uniform(0.04, 0.3),
            radius * np.cos(angle),
            radius * np.sin(angle),
            rng.uniform(0.0, 180.0),
        ))

    image = np.clip(ellipse_image(size, ellipses), 0.0, 1.0)
    x, y = _unit_grid(size)
    image[x ** 2 + y ** 2 > 1.0] = 0.0
    return image


def phantom_set(size: int, count: int, seed: int, start: int = 0) -> np.ndarray:
    """count random phantoms, member i seeded with (seed, start + i)"""
    logger.info(f"Synthesizing {count} phantoms of size {size} (seed {seed}, first index {start})")
    phantoms = np.empty((count, size, size), dtype=np.float64)
    for index in range(count):
        member_seed = int(np.random.SeedSequence([seed, start + index]).generate_state(1)[0])
        phantoms[index] = random_ellipse_phantom(size, member_seed)
    return phantoms
