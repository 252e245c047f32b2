"""
Losses on (..., H, W) grids, each returned with its gradient w.r.t. the first argument.

perceptual_proxy stands in for a learned perceptual metric: plain MSE plus a
gamma-weighted MSE between the forward-difference images, which makes it
sensitive to blurred or displaced edges.
"""

import logging
from typing import Tuple

import numpy as np

from wedgefill.core.errors import InvalidInputError

logger = logging.getLogger(__name__)


def _check_pair(a: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidInputError(f"loss operands differ in shape: {a.shape} vs {b.shape}")
    if a.ndim < 2:
        raise InvalidInputError(f"loss operands need two spatial axes, got shape {a.shape}")
    return a, b


def forward_differences(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Vertical and horizontal forward differences over the last two axes"""
    return x[..., 1:, :] - x[..., :-1, :], x[..., :, 1:] - x[..., :, :-1]


def mse(a: np.ndarray, b: np.ndarray) -> float:
    a, b = _check_pair(a, b)
    return float(np.mean((a - b) ** 2))


def mse_and_grad(a: np.ndarray, b: np.ndarray) -> Tuple[float, np.ndarray]:
    a, b = _check_pair(a, b)
    diff = a - b
    return float(np.mean(diff ** 2)), 2.0 * diff / diff.size


def gradient_mse_and_grad(a: np.ndarray, b: np.ndarray) -> Tuple[float, np.ndarray]:
    """MSE between the concatenated forward differences of a and b"""
    a, b = _check_pair(a, b)
    dy, dx = forward_differences(a - b)
    count = dy.size + dx.size
    if count == 0:
        return 0.0, np.zeros_like(a)
    value = float((np.sum(dy ** 2) + np.sum(dx ** 2)) / count)

    grad = np.zeros_like(a)
    gy = 2.0 * dy / count
    gx = 2.0 * dx / count
    grad[..., 1:, :] += gy
    grad[..., :-1, :] -= gy
    grad[..., :, 1:] += gx
    grad[..., :, :-1] -= gx
    return value, grad


def perceptual_proxy_and_grad(a: np.ndarray, b: np.ndarray, gamma: float = 0.5) -> Tuple[float, np.ndarray]:
    value, grad = mse_and_grad(a, b)
    if gamma:
        edge_value, edge_grad = gradient_mse_and_grad(a, b)
        value += gamma * edge_value
        grad = grad + gamma * edge_grad
    return value, grad


def perceptual_proxy(a: np.ndarray, b: np.ndarray, gamma: float = 0.5) -> float:
    """MSE(a, b) + gamma * MSE(grad a, grad b); symmetric, zero iff a == b"""
    return perceptual_proxy_and_grad(a, b, gamma)[0]
