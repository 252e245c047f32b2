import logging
from dataclasses import dataclass
from typing import Callable, Literal, Optional

import numpy as np

from wedgefill.core.errors import InvalidInputError
from wedgefill.core.validation import array_guard
from wedgefill.diffusion.schedule import NoiseSchedule, StepLike, marginal_params, posterior_params
from wedgefill.tomo.geometry import Sinogram

logger = logging.getLogger(__name__)

OdeSolver = Literal["euler", "ddim"]


def make_rng(seed: int, *counters: int) -> np.random.Generator:
    """
    Counter-based generator for the stream (seed, *counters)

    Every (seed, counters) tuple gets an independent Philox stream, so a
    training step or an ensemble member can be replayed without consuming
    the streams before it.
    """
    if int(seed) < 0 or any(int(c) < 0 for c in counters):
        raise InvalidInputError(f"seed and stream counters must be non-negative, got {(seed, *counters)}")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, counters)])))


def derive_seed(*parts: int) -> int:
    """A 32-bit integer seed derived from a tuple of non-negative integers"""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def _expand(coeff: np.ndarray, ndim: int) -> np.ndarray:
    """Per-sample coefficients (B,) -> (B, 1, ..., 1) for broadcasting against (B, ...)"""
    coeff = np.asarray(coeff, dtype=np.float64)
    return coeff.reshape(coeff.shape + (1,) * (ndim - coeff.ndim))


@dataclass
class DiffusionState:
    """Current state x_t of a chain that reverts toward mu"""

    t: int
    x: Sinogram
    mu: Sinogram

    def __post_init__(self):
        array_guard.require_same_shape(self.x, self.mu, names=("x", "mu"))
        if int(self.t) < 0:
            raise InvalidInputError(f"state step {self.t} is negative")


def forward_sample(s: NoiseSchedule, t: StepLike, x0: Sinogram, mu: Sinogram,
                   rng: np.random.Generator) -> Sinogram:
    """Draw x_t ~ N(mu + (x0 - mu) * mean_coeff, std^2); t may hold one step per batch entry"""
    array_guard.require_same_shape(x0, mu, names=("x0", "mu"))
    mean_coeff, std = marginal_params(s, t)
    x0 = np.asarray(x0, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    noise = rng.standard_normal(x0.shape)
    return mu + (x0 - mu) * _expand(mean_coeff, x0.ndim) + _expand(std, x0.ndim) * noise


def normalized_noise(s: NoiseSchedule, t: StepLike, x_t: Sinogram, x0: Sinogram, mu: Sinogram) -> Sinogram:
    """The standard-normal draw that produced x_t from x0 (the noise-prediction target)"""
    mean_coeff, std = marginal_params(s, t)
    if np.any(std <= 0):
        raise InvalidInputError("normalized noise is undefined at t = 0")
    x_t = np.asarray(x_t, dtype=np.float64)
    mean = mu + (np.asarray(x0) - mu) * _expand(mean_coeff, x_t.ndim)
    return (x_t - mean) / _expand(std, x_t.ndim)


def score_from_eps(s: NoiseSchedule, t: StepLike, eps_hat: Sinogram) -> Sinogram:
    """score = -eps_hat / std(t)"""
    _, std = marginal_params(s, t)
    if np.any(std <= 0):
        raise InvalidInputError("score is undefined at t = 0 (std = 0)")
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    return -eps_hat / _expand(std, eps_hat.ndim)


def conditional_score(s: NoiseSchedule, t: StepLike, x_t: Sinogram, x0: Sinogram, mu: Sinogram) -> Sinogram:
    """Analytic gradient of log p(x_t | x_0): -(x_t - mean) / std^2"""
    mean_coeff, std = marginal_params(s, t)
    if np.any(std <= 0):
        raise InvalidInputError("score is undefined at t = 0 (std = 0)")
    x_t = np.asarray(x_t, dtype=np.float64)
    mean = mu + (np.asarray(x0) - mu) * _expand(mean_coeff, x_t.ndim)
    return -(x_t - mean) / _expand(std, x_t.ndim) ** 2


def x0_from_eps(s: NoiseSchedule, t: StepLike, x_t: Sinogram, mu: Sinogram, eps_hat: Sinogram) -> Sinogram:
    """Invert the marginal relation: x0 = mu + (x_t - mu - std * eps) / mean_coeff"""
    mean_coeff, std = marginal_params(s, t)
    x_t = np.asarray(x_t, dtype=np.float64)
    ndim = x_t.ndim
    return mu + (x_t - mu - _expand(std, ndim) * eps_hat) / _expand(mean_coeff, ndim)


def terminal_sample(s: NoiseSchedule, mu: Sinogram, rng: np.random.Generator) -> Sinogram:
    """x_T = mu + std_T * z, the starting point of every reverse chain"""
    _, std = marginal_params(s, s.T)
    mu = np.asarray(mu, dtype=np.float64)
    return mu + float(std) * rng.standard_normal(mu.shape)


def _check_step(s: NoiseSchedule, state: DiffusionState, t: int, other: np.ndarray, name: str) -> int:
    t = array_guard.require_step(t, 1, s.T)
    if state.t != t:
        raise InvalidInputError(f"state is at step {state.t}, asked to step from {t}")
    array_guard.require_same_shape(state.x, other, names=("x_t", name))
    return t


def reverse_sde_step(s: NoiseSchedule, t: int, state: DiffusionState, x0_hat: Sinogram,
                     rng: np.random.Generator) -> Sinogram:
    """
    Sample x_{t-1} from the Gaussian posterior with x_0 replaced by x0_hat

    Posterior sampling is the exact discretization of the reverse SDE for
    this kernel family; at t = 1 the variance vanishes and the output is
    x0_hat's posterior mean.
    """
    t = _check_step(s, state, t, x0_hat, "x0_hat")
    a, b, v = posterior_params(s, t)
    mu = state.mu
    mean = mu + a * (state.x - mu) + b * (np.asarray(x0_hat) - mu)
    noise = rng.standard_normal(np.shape(state.x))
    return mean + np.sqrt(v) * noise


def reverse_ode_step(s: NoiseSchedule, t: int, state: DiffusionState, score: Sinogram,
                     solver: OdeSolver = "euler") -> Sinogram:
    """
    Deterministic probability-flow step x_t -> x_{t-1}

    euler: unit-step Euler, x_{t-1} = x_t - [zeta_t (mu - x_t) - 0.5 sigma_t^2 score]
    ddim:  exact one-step solution with the noise estimate held fixed
    """
    t = _check_step(s, state, t, score, "score")
    x, mu = state.x, state.mu
    if solver == "euler":
        return x - (s.zeta[t] * (mu - x) - 0.5 * s.sigma2[t] * np.asarray(score))
    if solver == "ddim":
        mean_coeff, std = marginal_params(s, t)
        prev_coeff, prev_std = marginal_params(s, t - 1)
        eps = -np.asarray(score) * std
        x0_hat = mu + (x - mu - std * eps) / mean_coeff
        return mu + (x0_hat - mu) * prev_coeff + prev_std * eps
    raise InvalidInputError(f"Unknown ODE solver '{solver}'")


ScoreFn = Callable[[int, np.ndarray], np.ndarray]


def run_reverse_ode(s: NoiseSchedule, x_T: Sinogram, mu: Sinogram, score_fn: ScoreFn,
                    solver: OdeSolver = "euler", stop: int = 0) -> Sinogram:
    """Integrate the probability-flow ODE from T down to stop; score_fn(t, x_t) supplies the score"""
    state = DiffusionState(t=s.T, x=np.asarray(x_T, dtype=np.float64), mu=np.asarray(mu, dtype=np.float64))
    for t in range(s.T, stop, -1):
        x_prev = reverse_ode_step(s, t, state, score_fn(t, state.x), solver)
        state = DiffusionState(t=t - 1, x=x_prev, mu=state.mu)
    return state.x


X0Fn = Callable[[int, np.ndarray], np.ndarray]


def run_reverse_sde(s: NoiseSchedule, x_T: Sinogram, mu: Sinogram, x0_fn: X0Fn,
                    seed: int, stream: Optional[int] = None) -> Sinogram:
    """Posterior-sampling chain from T to 0; step t draws from make_rng(seed, [stream,] t)"""
    state = DiffusionState(t=s.T, x=np.asarray(x_T, dtype=np.float64), mu=np.asarray(mu, dtype=np.float64))
    prefix = () if stream is None else (stream,)
    for t in range(s.T, 0, -1):
        x_prev = reverse_sde_step(s, t, state, x0_fn(t, state.x), make_rng(seed, *prefix, t))
        state = DiffusionState(t=t - 1, x=x_prev, mu=state.mu)
    return state.x
