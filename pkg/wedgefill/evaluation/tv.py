"""
Total-variation reconstruction baseline.

Solves  min_{0 <= x <= 1}  1/2 ||M R x - y||^2 + lambda_tv * TV(x)
(isotropic TV, M the angle mask) with the first-order primal-dual iteration of
Chambolle and Pock on K = [M R; s grad]. The TV term is written as
(lambda_tv / s) ||s grad x||_{2,1}, so scaling the gradient block by
s = ||M R|| / sqrt(8) leaves the objective unchanged and gives both blocks the
same operator norm.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np

from wedgefill.core.errors import InvalidInputError
from wedgefill.core.validation import array_guard
from wedgefill.tomo.geometry import AngleMask, Image, ScanGeometry, Sinogram
from wedgefill.tomo.operators import apply_mask, fbp, system_matrix

logger = logging.getLogger(__name__)

POWER_ITERATIONS = 50
GAP_CHECK_EVERY = 10
GAP_INCREASE_LIMIT = 10
STEP_SAFETY = 0.99


def gradient(x: np.ndarray) -> np.ndarray:
    """Forward differences with a zero last difference; (..., n, n) -> (..., 2, n, n)"""
    grad = np.zeros(x.shape[:-2] + (2,) + x.shape[-2:], dtype=np.float64)
    grad[..., 0, :-1, :] = x[..., 1:, :] - x[..., :-1, :]
    grad[..., 1, :, :-1] = x[..., :, 1:] - x[..., :, :-1]
    return grad


def divergence(p: np.ndarray) -> np.ndarray:
    """Negative adjoint of gradient"""
    py, px = p[..., 0, :, :], p[..., 1, :, :]
    div = np.zeros(py.shape, dtype=np.float64)
    div[..., :-1, :] += py[..., :-1, :]
    div[..., 1:, :] -= py[..., :-1, :]
    div[..., :, :-1] += px[..., :, :-1]
    div[..., :, 1:] -= px[..., :, :-1]
    return div


def total_variation(x: np.ndarray) -> np.ndarray:
    """Isotropic TV per image"""
    grad = gradient(x)
    return np.sqrt(np.sum(grad ** 2, axis=-3)).sum(axis=(-2, -1))


class _MaskedProjector:
    """M R on flattened batches, with the matched adjoint"""

    def __init__(self, geometry: ScanGeometry, mask: AngleMask):
        self.geometry = geometry
        forward, adjoint = system_matrix(geometry)
        row_kept = np.repeat(mask.kept, geometry.detector_bins).astype(np.float64)
        self.forward = forward
        self.adjoint = adjoint
        self.row_kept = row_kept

    def apply(self, x: np.ndarray) -> np.ndarray:
        n = self.geometry.image_size
        flat = x.reshape(-1, n * n)
        out = (self.forward @ flat.T).T * self.row_kept
        return out.reshape(x.shape[:-2] + self.geometry.sinogram_shape)

    def adjoint_apply(self, sino: np.ndarray) -> np.ndarray:
        flat = sino.reshape(-1, self.geometry.num_angles * self.geometry.detector_bins) * self.row_kept
        out = (self.adjoint @ flat.T).T
        return out.reshape(sino.shape[:-2] + self.geometry.image_shape)


def operator_norm(normal: Callable[[np.ndarray], np.ndarray], shape: Tuple[int, ...],
                  iterations: int = POWER_ITERATIONS) -> float:
    """Largest singular value of A from power iteration on normal = A^T A"""
    x = np.random.default_rng(0).standard_normal(shape)
    x /= np.linalg.norm(x)
    value = 0.0
    for _ in range(iterations):
        y = normal(x)
        value = float(np.linalg.norm(y))
        if value == 0.0:
            return 0.0
        x = y / value
    return float(np.sqrt(value))


@dataclass(frozen=True)
class TVCheckpoint:
    """Diagnostics recorded every GAP_CHECK_EVERY iterations (per image)"""

    iteration: int
    objective: np.ndarray  # at the ergodic average
    residual: np.ndarray  # ||M R x - y|| at the ergodic average
    gap: np.ndarray  # primal-dual gap at the ergodic averages


@dataclass
class TVResult:
    image: Image
    history: List[TVCheckpoint] = field(default_factory=list)
    stalled: bool = False
    operator_norm: float = 0.0


def tv_objective(x: np.ndarray, y: np.ndarray, projector: _MaskedProjector, lambda_tv: float) -> np.ndarray:
    residual = projector.apply(x) - y
    return 0.5 * np.sum(residual ** 2, axis=(-2, -1)) + lambda_tv * total_variation(x)


def tv_reconstruct(y: Sinogram, mask: AngleMask, lambda_tv: float, iters: int,
                   geometry: Optional[ScanGeometry] = None, warm_start: bool = True) -> TVResult:
    """
    Box-constrained TV reconstruction of one sinogram or a batch

    Args:
        y: (A, bins) or (B, A, bins) measured sinogram; missing rows are ignored
        mask: which angle rows were measured
        lambda_tv: TV weight, 0 gives box-constrained least squares
        iters: number of primal-dual iterations
        geometry: defaults to the mask's geometry
        warm_start: start from the clipped masked FBP instead of zeros

    Returns:
        TVResult: the ergodic average of the primal iterates plus the
        gap/objective history; stalled is set when the gap grew at
        GAP_INCREASE_LIMIT consecutive checks
    """
    geometry = geometry or mask.geometry
    if lambda_tv < 0:
        raise InvalidInputError(f"lambda_tv must be >= 0, got {lambda_tv}")
    if iters < 1:
        raise InvalidInputError(f"iters must be >= 1, got {iters}")
    y = array_guard.require_shape(y, geometry.sinogram_shape, "sinogram")
    array_guard.require_finite(y, "sinogram")
    single = y.ndim == 2
    y = apply_mask(np.asarray(y, dtype=np.float64).reshape((-1,) + geometry.sinogram_shape), mask)
    batch = y.shape[0]

    projector = _MaskedProjector(geometry, mask)
    image_shape = (1,) + geometry.image_shape
    projector_norm = operator_norm(lambda x: projector.adjoint_apply(projector.apply(x)), image_shape)
    scale = projector_norm / np.sqrt(8.0) if projector_norm > 0 else 1.0

    def k_apply(x):
        return projector.apply(x), scale * gradient(x)

    def k_adjoint(p, q):
        return projector.adjoint_apply(p) - scale * divergence(q)

    # power iteration approaches ||K|| from below
    norm = operator_norm(lambda x: k_adjoint(*k_apply(x)), image_shape) * 1.01
    tau = sigma = STEP_SAFETY / norm
    bound = lambda_tv / scale

    if warm_start:
        x = np.clip(fbp(y, geometry), 0.0, 1.0)
    else:
        x = np.zeros((batch,) + geometry.image_shape)
    x_bar = x.copy()
    p = np.zeros_like(y)
    q = np.zeros((batch, 2) + geometry.image_shape)
    x_sum, p_sum, q_sum = np.zeros_like(x), np.zeros_like(p), np.zeros_like(q)

    history: List[TVCheckpoint] = []
    last_gap: Optional[np.ndarray] = None
    increases = 0
    stalled = False
    for it in range(1, iters + 1):
        kp, kq = k_apply(x_bar)
        p = (p + sigma * (kp - y)) / (1.0 + sigma)
        q = q + sigma * kq
        if bound > 0:
            magnitude = np.sqrt(np.sum(q ** 2, axis=1, keepdims=True))
            q = q / np.maximum(1.0, magnitude / bound)
        else:
            q = np.zeros_like(q)
        x_new = np.clip(x - tau * k_adjoint(p, q), 0.0, 1.0)
        x_bar = 2.0 * x_new - x
        x = x_new
        x_sum += x
        p_sum += p
        q_sum += q

        if it % GAP_CHECK_EVERY == 0 or it == iters:
            x_avg, p_avg, q_avg = x_sum / it, p_sum / it, q_sum / it
            primal = tv_objective(x_avg, y, projector, lambda_tv)
            # dual of the box-constrained problem: -1/2|p|^2 - <p, y> - sum max(0, -K^T(p, q))
            dual = (-0.5 * np.sum(p_avg ** 2, axis=(-2, -1)) - np.sum(p_avg * y, axis=(-2, -1))
                    - np.maximum(0.0, -k_adjoint(p_avg, q_avg)).sum(axis=(-2, -1)))
            gap = primal - dual
            residual = np.linalg.norm((projector.apply(x_avg) - y).reshape(batch, -1), axis=1)
            history.append(TVCheckpoint(it, primal, residual, gap))
            if last_gap is not None and np.any(gap > last_gap):
                increases += 1
            else:
                increases = 0
            last_gap = gap
            if increases >= GAP_INCREASE_LIMIT and not stalled:
                stalled = True
                logger.warning(f"TV solver: primal-dual gap grew at {increases} consecutive checks (iteration {it})")

    logger.debug(f"TV solver: {iters} iterations, ||K|| ~ {norm:.3e}, final gap {history[-1].gap.max():.3e}")
    x_avg = x_sum / iters
    return TVResult(image=x_avg[0] if single else x_avg, history=history, stalled=stalled, operator_norm=float(norm))
