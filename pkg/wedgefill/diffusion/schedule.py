"""
Mean-reverting noise schedule.

The forward process drifts toward the terminal mean mu at rate zeta_t with
noise power sigma_t^2 = 2 * lambda^2 * zeta_t, which makes the transition
kernel Gaussian in closed form with stationary variance lambda^2. All
per-step arrays are indexed by the step number, index 0 is the clean state.
"""

import logging
from dataclasses import dataclass
from typing import Tuple, Union

import numpy as np

from wedgefill.core.config import ScheduleConfig
from wedgefill.core.errors import ConfigError, InvalidInputError

logger = logging.getLogger(__name__)

StepLike = Union[int, np.ndarray]


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step drift rates and their cumulative integrals for steps 0..T"""

    T: int
    zeta: np.ndarray
    sigma2: np.ndarray
    lambda2: float
    zeta_bar: np.ndarray
    zeta_prime: np.ndarray

    @property
    def stationary_std(self) -> float:
        return float(np.sqrt(self.lambda2))

    def check(self) -> None:
        """Assert the invariants the closed-form kernel relies on"""
        if np.any(self.zeta[1:] <= 0):
            raise ConfigError("schedule has non-positive drift rates")
        if not np.allclose(self.sigma2, 2.0 * self.lambda2 * self.zeta, rtol=1e-12, atol=0.0):
            raise ConfigError("schedule violates sigma_t^2 = 2 lambda^2 zeta_t")
        if not np.allclose(np.diff(self.zeta_bar), self.zeta_prime[1:], rtol=1e-12, atol=1e-15):
            raise ConfigError("zeta_bar is not the running sum of zeta_prime")


def _linear_shape(config: ScheduleConfig) -> np.ndarray:
    return np.linspace(config.zeta_start, config.zeta_end, config.T)


def _cosine_shape(config: ScheduleConfig, s: float = 0.008) -> np.ndarray:
    # 1 - alpha_bar of the cosine schedule, truncated at both ends
    steps = config.T + 2
    x = np.linspace(0.0, steps, steps + 1)
    alphas_cumprod = np.cos(((x / steps) + s) / (1 + s) * np.pi * 0.5) ** 2
    alphas_cumprod = alphas_cumprod / alphas_cumprod[0]
    return 1.0 - alphas_cumprod[1:-2]


def _constant_shape(config: ScheduleConfig) -> np.ndarray:
    return np.full(config.T, config.zeta_start)


_SHAPES = {
    "linear": _linear_shape,
    "cosine": _cosine_shape,
    "constant": _constant_shape,
}


def build_schedule(config: ScheduleConfig) -> NoiseSchedule:
    """
    Build the schedule described by a [schedule] section

    The raw rate shape is rescaled so that exp(-zeta_bar_T) equals
    terminal_mean_coeff (0.01 by default, i.e. zeta_bar_T = ln 100).

    Raises:
        ConfigError: if the resulting schedule breaks an invariant
    """
    shape = np.asarray(_SHAPES[config.kind](config), dtype=np.float64)
    if shape.shape != (config.T,) or np.any(shape <= 0):
        raise ConfigError(f"{config.kind} schedule produced non-positive rates")

    target = -np.log(config.terminal_mean_coeff)
    rates = shape * (target / shape.sum())

    zeta = np.concatenate([[0.0], rates])
    lambda2 = float(config.stationary_std) ** 2
    schedule = NoiseSchedule(
        T=config.T,
        zeta=zeta,
        sigma2=2.0 * lambda2 * zeta,
        lambda2=lambda2,
        zeta_bar=np.cumsum(zeta),
        # unit-step integral of a piecewise-constant rate
        zeta_prime=zeta.copy(),
    )
    schedule.check()
    logger.info(
        f"Built {config.kind} schedule: T={config.T}, lambda={config.stationary_std}, "
        f"zeta_bar_T={schedule.zeta_bar[-1]:.4f}"
    )
    return schedule


def _steps(s: NoiseSchedule, t: StepLike, low: int) -> np.ndarray:
    steps = np.asarray(t)
    if steps.dtype.kind not in "iu":
        if not np.all(np.equal(np.mod(steps, 1), 0)):
            raise InvalidInputError(f"step index must be an integer, got {t}")
        steps = steps.astype(np.int64)
    if np.any(steps < low) or np.any(steps > s.T):
        raise InvalidInputError(f"step {t} outside [{low}, {s.T}]")
    return steps


def _one_minus_exp(x: np.ndarray) -> np.ndarray:
    """1 - exp(-x), accurate for small x"""
    return -np.expm1(-x)


def marginal_params(s: NoiseSchedule, t: StepLike) -> Tuple[np.ndarray, np.ndarray]:
    """
    Coefficients of x_t | x_0 ~ N(mu + (x_0 - mu) * mean_coeff, std^2)

    Args:
        s: schedule
        t: step in [0, T], scalar or array of per-sample steps

    Returns:
        (mean_coeff, std) with the shape of t
    """
    steps = _steps(s, t, 0)
    zeta_bar = s.zeta_bar[steps]
    mean_coeff = np.exp(-zeta_bar)
    std = np.sqrt(s.lambda2 * _one_minus_exp(2.0 * zeta_bar))
    return mean_coeff, std


def posterior_params(s: NoiseSchedule, t: StepLike) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Coefficients of p(x_{t-1} | x_t, x_0)

    Mean is mu + a * (x_t - mu) + b * (x_0 - mu), variance is v. At t = 1
    the previous state is x_0 itself, so a = 0, b = 1, v = 0.
    """
    steps = _steps(s, t, 1)
    prev_bar = s.zeta_bar[steps - 1]
    bar = s.zeta_bar[steps]
    step = s.zeta_prime[steps]

    denom = _one_minus_exp(2.0 * bar)
    prev_var = _one_minus_exp(2.0 * prev_bar)
    step_var = _one_minus_exp(2.0 * step)

    a = np.exp(-step) * prev_var / denom
    b = np.exp(-prev_bar) * step_var / denom
    v = s.lambda2 * prev_var * step_var / denom
    return a, b, v


def step_kernel(s: NoiseSchedule, t: StepLike) -> Tuple[np.ndarray, np.ndarray]:
    """x_t | x_{t-1} ~ N(mu + (x_{t-1} - mu) * coeff, var)"""
    steps = _steps(s, t, 1)
    step = s.zeta_prime[steps]
    return np.exp(-step), s.lambda2 * _one_minus_exp(2.0 * step)
