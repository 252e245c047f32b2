import logging
import math
from typing import Mapping, Tuple

import numpy as np

from wedgefill.core.errors import TrainingDivergedError
from wedgefill.neural.network import ModelParams

logger = logging.getLogger(__name__)


def adam_step(params: ModelParams, grads: Mapping[str, np.ndarray], lr: float,
              betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
              weight_decay: float = 0.0) -> ModelParams:
    """
    One Adam update with bias correction, in place

    weight_decay > 0 gives the decoupled (AdamW) variant. Moments are stored
    on params next to the entries they belong to.

    Raises:
        TrainingDivergedError: if any gradient is NaN or infinite; params are left untouched
    """
    for name, grad in grads.items():
        if name not in params.entries:
            raise KeyError(f"gradient for unknown parameter '{name}'")
        if not np.all(np.isfinite(grad)):
            bad = int(np.count_nonzero(~np.isfinite(grad)))
            logger.error(f"Non-finite gradient in {name} ({bad} values) at step {params.step_count + 1}")
            raise TrainingDivergedError(
                f"non-finite gradient for '{name}' at optimizer step {params.step_count + 1}"
            )

    beta1, beta2 = betas
    params.step_count += 1
    k = params.step_count
    correction1 = 1.0 - beta1 ** k
    correction2 = 1.0 - beta2 ** k

    for name, grad in grads.items():
        value = params.entries[name]
        grad = np.asarray(grad, dtype=value.dtype)
        m = params.first_moments.get(name)
        v = params.second_moments.get(name)
        if m is None:
            m = np.zeros_like(value)
            v = np.zeros_like(value)
        m = beta1 * m + (1.0 - beta1) * grad
        v = beta2 * v + (1.0 - beta2) * grad * grad
        update = (m / correction1) / (np.sqrt(v / correction2) + eps)
        if weight_decay:
            update = update + weight_decay * value
        params.entries[name] = (value - lr * update).astype(value.dtype, copy=False)
        params.first_moments[name] = m.astype(value.dtype, copy=False)
        params.second_moments[name] = v.astype(value.dtype, copy=False)
    return params


def cosine_lr(step: int, total_steps: int, lr: float, lr_min: float) -> float:
    """Cosine decay from lr at step 0 to lr_min at total_steps"""
    if total_steps <= 1:
        return lr
    progress = min(max(step / (total_steps - 1), 0.0), 1.0)
    return lr_min + 0.5 * (lr - lr_min) * (1.0 + math.cos(math.pi * progress))
