"""
Parallel-beam projector pair, filtered back-projection and the limited-angle mask.

The projector is distance-driven along a driving axis: for every angle the
rays step through the image one row (or column, whichever axis they cross
fastest) at a time, the two edges of each detector bin are mapped onto that
row, and a pixel's weight is the length of its overlap with the mapped bin
divided by the bin width. Every pixel therefore spreads exactly 1 / spacing
over the detector at every angle, so all angle rows carry the same mass.
The operator is assembled once per geometry as a sparse matrix, so the
back-projection is its exact transpose.
"""

import logging
from functools import lru_cache
from typing import List, Literal, Tuple

import numpy as np
import scipy.sparse

from wedgefill.core.errors import InvalidInputError
from wedgefill.core.validation import array_guard
from wedgefill.tomo.geometry import AngleMask, Image, ScanGeometry, Sinogram

logger = logging.getLogger(__name__)

Apodization = Literal["none", "hann"]


def _angle_block(geo: ScanGeometry, angle_index: int, theta: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sparse (ray, pixel, weight) triplets for one projection angle"""
    n = geo.image_size
    center = (n - 1) / 2.0
    t = geo.detector_positions()[:, None]
    axis = np.arange(n, dtype=np.float64)[None, :]
    cos_t, sin_t = np.cos(theta), np.sin(theta)

    row_major = abs(cos_t) >= abs(sin_t)
    if row_major:
        # bin center on each row: x = (t - y sin) / cos
        pos = (t - (axis - center) * sin_t) / cos_t + center
        half = 0.5 * geo.detector_spacing / abs(cos_t)
    else:
        # bin center on each column: y = (t - x cos) / sin
        pos = (t - (axis - center) * cos_t) / sin_t + center
        half = 0.5 * geo.detector_spacing / abs(sin_t)
    low, high = pos - half, pos + half
    driving = np.broadcast_to(np.arange(n)[None, :], pos.shape)

    first = np.floor(low + 0.5).astype(np.int64)
    rays = np.broadcast_to(np.arange(geo.detector_bins)[:, None], pos.shape) + angle_index * geo.detector_bins

    rows: List[np.ndarray] = []
    cols: List[np.ndarray] = []
    vals: List[np.ndarray] = []
    for offset in range(int(np.ceil(2.0 * half)) + 2):
        idx = first + offset
        overlap = np.minimum(high, idx + 0.5) - np.maximum(low, idx - 0.5)
        valid = (idx >= 0) & (idx < n) & (overlap > 0)
        pixel = driving * n + idx if row_major else idx * n + driving
        rows.append(rays[valid])
        cols.append(pixel[valid])
        vals.append(overlap[valid] / geo.detector_spacing)
    return np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)


@lru_cache(maxsize=8)
def system_matrix(geo: ScanGeometry) -> Tuple[scipy.sparse.csr_matrix, scipy.sparse.csr_matrix]:
    """Projection matrix (rays x pixels) and its transpose, cached per geometry"""
    blocks = [_angle_block(geo, index, theta) for index, theta in enumerate(geo.angles_rad())]
    rows = np.concatenate([b[0] for b in blocks])
    cols = np.concatenate([b[1] for b in blocks])
    vals = np.concatenate([b[2] for b in blocks])
    shape = (geo.num_angles * geo.detector_bins, geo.image_size * geo.image_size)
    matrix = scipy.sparse.coo_matrix((vals, (rows, cols)), shape=shape).tocsr()
    matrix.sum_duplicates()
    logger.info(
        f"Built projector {geo.num_angles}x{geo.detector_bins} for {geo.image_size}^2 images "
        f"({matrix.nnz} non-zeros)"
    )
    return matrix, matrix.T.tocsr()


def radon_forward(img: Image, geo: ScanGeometry) -> Sinogram:
    """Discrete line integrals of img for every (angle, detector bin); leading axes are batch axes"""
    n = geo.image_size
    img = array_guard.require_shape(img, (n, n), "image")
    array_guard.require_finite(img, "image")
    forward, _ = system_matrix(geo)
    batch_shape = img.shape[:-2]
    flat = np.asarray(img, dtype=np.float64).reshape(-1, n * n)
    out = (forward @ flat.T).T
    return out.reshape(batch_shape + geo.sinogram_shape)


def backproject(sino: Sinogram, geo: ScanGeometry) -> Image:
    """Exact adjoint of radon_forward"""
    sino = array_guard.require_shape(sino, geo.sinogram_shape, "sinogram")
    array_guard.require_finite(sino, "sinogram")
    _, adjoint = system_matrix(geo)
    batch_shape = sino.shape[:-2]
    flat = np.asarray(sino, dtype=np.float64).reshape(-1, geo.num_angles * geo.detector_bins)
    out = (adjoint @ flat.T).T
    return out.reshape(batch_shape + geo.image_shape)


def ramp_filter(num_bins: int, apodization: Apodization = "none") -> Tuple[np.ndarray, int]:
    """Ram-Lak response on the rfft grid of the padded length; DC is zero"""
    padded = 1 << int(np.ceil(np.log2(max(2 * num_bins, 2))))
    freqs = np.fft.rfftfreq(padded)
    response = 2.0 * np.abs(freqs)
    if apodization == "hann":
        response *= 0.5 * (1.0 + np.cos(2.0 * np.pi * freqs))
    elif apodization != "none":
        raise InvalidInputError(f"Unknown apodization '{apodization}'")
    response[0] = 0.0
    return response, padded


def filter_projections(sino: Sinogram, geo: ScanGeometry, apodization: Apodization = "none") -> Sinogram:
    """Ramp-filter every angle row in the frequency domain"""
    response, padded = ramp_filter(geo.detector_bins, apodization)
    spectrum = np.fft.rfft(np.asarray(sino, dtype=np.float64), n=padded, axis=-1)
    return np.fft.irfft(spectrum * response, n=padded, axis=-1)[..., :geo.detector_bins]


def fbp(sino: Sinogram, geo: ScanGeometry, apodization: Apodization = "none") -> Image:
    """Filtered back-projection"""
    sino = array_guard.require_shape(sino, geo.sinogram_shape, "sinogram")
    array_guard.require_finite(sino, "sinogram")
    filtered = filter_projections(sino, geo, apodization)
    # detector_spacing * adjoint averages the filtered rows over each pixel footprint
    smeared = geo.detector_spacing * backproject(filtered, geo)
    step_rad = np.deg2rad(geo.angle_step_deg)
    return smeared * (step_rad / (2.0 * geo.detector_spacing))


def _check_mask(sino: Sinogram, mask: AngleMask) -> np.ndarray:
    sino = np.asarray(sino)
    if sino.ndim < 2 or sino.shape[-2:] != mask.geometry.sinogram_shape:
        raise InvalidInputError(
            f"Sinogram shape {sino.shape} does not match mask geometry {mask.geometry.sinogram_shape}"
        )
    return sino


def apply_mask(sino: Sinogram, mask: AngleMask) -> Sinogram:
    """Kept rows copied verbatim, missing rows zeroed (the operator A, equal to its pseudo-inverse)"""
    sino = _check_mask(sino, mask)
    return np.where(mask.kept[:, None], sino, np.zeros((), dtype=sino.dtype))


def null_space_part(sino: Sinogram, mask: AngleMask) -> Sinogram:
    """(I - A^+ A) sino: kept rows zeroed, missing rows copied"""
    sino = _check_mask(sino, mask)
    return np.where(mask.kept[:, None], np.zeros((), dtype=sino.dtype), sino)
