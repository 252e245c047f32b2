"""
Teacher restorations, distillation pairs and the one-step student.

The student predicts the residual r = x_T - x0, so its restoration is
x_T - r. Rectification then copies the observed rows back in, which makes
every restoration consistent with the measurement by construction.
"""

import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np

from wedgefill.core.config import TrainingConfig
from wedgefill.core.errors import InvalidInputError, TensorFormatError
from wedgefill.core.validation import array_guard
from wedgefill.diffusion.sampling import (
    OdeSolver,
    make_rng,
    run_reverse_ode,
    run_reverse_sde,
    score_from_eps,
    terminal_sample,
    x0_from_eps,
)
from wedgefill.diffusion.schedule import NoiseSchedule, marginal_params
from wedgefill.neural.losses import mse_and_grad, perceptual_proxy_and_grad
from wedgefill.neural.network import ModelParams, net_forward, net_value_and_grad
from wedgefill.pipeline.data import (
    SinogramDataset,
    low_fidelity_batch,
    low_fidelity_inpaint,
    masked_rows,
    sample_scenarios,
    scenario_key,
)
from wedgefill.pipeline.models import DirectModel, ScoreModel, StudentModel, channels_last, student_spec
from wedgefill.pipeline.training import STAGE_STREAMS, LossRows, fresh_params, run_training
from wedgefill.tomo.geometry import AngleMask, Sinogram

logger = logging.getLogger(__name__)

PairSampler = Literal["ode", "sde"]


def _as_batch(array: np.ndarray) -> Tuple[np.ndarray, bool]:
    array = np.asarray(array, dtype=np.float64)
    if array.ndim == 2:
        return array[None], True
    if array.ndim != 3:
        raise InvalidInputError(f"expected a sinogram or a batch of sinograms, got shape {array.shape}")
    return array, False


def _unbatch(array: np.ndarray, single: bool) -> np.ndarray:
    return array[0] if single else array


def teacher_restore_from(score: ScoreModel, x_T: np.ndarray, mu: np.ndarray, masks: Sequence[AngleMask],
                         solver: OdeSolver = "ddim", sampler: PairSampler = "ode",
                         seed: int = 0, stream: Optional[int] = None) -> np.ndarray:
    """
    Run the reverse chain from a given x_T for a batch of masked sinograms

    ode: deterministic probability-flow integration (one restoration per x_T)
    sde: posterior sampling, step t drawing from make_rng(seed, stream, t)
    """
    schedule = score.schedule
    low = low_fidelity_batch(mu, masks)
    batch = mu.shape[0]

    def eps_at(t: int, x: np.ndarray) -> np.ndarray:
        return score.predict_eps(x, mu, low, np.full(batch, t))

    if sampler == "ode":
        return run_reverse_ode(schedule, x_T, mu, lambda t, x: score_from_eps(schedule, t, eps_at(t, x)), solver)
    if sampler == "sde":
        return run_reverse_sde(schedule, x_T, mu, lambda t, x: x0_from_eps(schedule, t, x, mu, eps_at(t, x)),
                               seed, stream)
    raise InvalidInputError(f"Unknown pair sampler '{sampler}'")


def teacher_restore_ode(score: ScoreModel, mu: Sinogram, mask: AngleMask, seed: int,
                        solver: OdeSolver = "ddim") -> Sinogram:
    """Draw x_T = mu + std_T * z from make_rng(seed, 0) and integrate the ODE down to x0_hat"""
    mu, single = _as_batch(mu)
    x_T = terminal_sample(score.schedule, mu, make_rng(seed, 0))
    x0_hat = teacher_restore_from(score, x_T, mu, [mask] * len(mu), solver)
    return _unbatch(x0_hat, single)


@dataclass
class PairRecord:
    """One distillation example"""

    x_T: np.ndarray
    x0_hat: np.ndarray
    mu: np.ndarray
    mask: AngleMask
    ground_truth: np.ndarray


@dataclass
class PairSet:
    """Stacked distillation pairs (normalized sinogram units, float32)"""

    x_T: np.ndarray
    x0_hat: np.ndarray
    mu: np.ndarray
    ground_truth: np.ndarray
    scenarios: List[str]
    masks: Dict[str, AngleMask] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.x_T)

    def __getitem__(self, index: int) -> PairRecord:
        return PairRecord(self.x_T[index], self.x0_hat[index], self.mu[index],
                          self.masks[self.scenarios[index]], self.ground_truth[index])

    def kept(self, indices: np.ndarray) -> np.ndarray:
        return np.stack([self.masks[self.scenarios[int(i)]].kept for i in indices])

    def to_tensors(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict([
            ("pairs/x_T", self.x_T),
            ("pairs/x0_hat", self.x0_hat),
            ("pairs/mu", self.mu),
            ("pairs/ground_truth", self.ground_truth),
            ("pairs/missing_deg", np.array([float(key) for key in self.scenarios])),
        ])

    @classmethod
    def from_tensors(cls, tensors: Dict[str, np.ndarray], dataset: SinogramDataset) -> "PairSet":
        try:
            pairs = cls(
                x_T=np.asarray(tensors["pairs/x_T"]),
                x0_hat=np.asarray(tensors["pairs/x0_hat"]),
                mu=np.asarray(tensors["pairs/mu"]),
                ground_truth=np.asarray(tensors["pairs/ground_truth"]),
                scenarios=[scenario_key(d) for d in np.asarray(tensors["pairs/missing_deg"])],
            )
        except KeyError as e:
            raise TensorFormatError(f"pair container lacks entry {e}") from e
        pairs.masks = {key: dataset.mask_for(float(key)) for key in set(pairs.scenarios)}
        return pairs


def _epoch_order(count: int, available: int, seed: int) -> np.ndarray:
    """Training indices for count pairs, reshuffled every pass over the set"""
    order: List[np.ndarray] = []
    epoch = 0
    while sum(len(o) for o in order) < count:
        order.append(make_rng(seed, STAGE_STREAMS["pairs"], 0, epoch).permutation(available))
        epoch += 1
    if epoch > 1:
        logger.info(f"{count} pairs requested from {available} sinograms: {epoch} reshuffled passes")
    return np.concatenate(order)[:count]


def generate_pairs(score: ScoreModel, dataset: SinogramDataset, count: int, seed: int,
                   scenario_keys: Sequence[str], batch_size: int = 8, solver: OdeSolver = "ddim",
                   sampler: PairSampler = "ode") -> PairSet:
    """
    Teacher restorations (x_T, x0_hat) for count training sinograms

    x_T and mu are rounded to float32 before the teacher runs, so a stored
    pair replays bit-identically from its stored x_T and mu (batch by batch).
    """
    if count < 1:
        raise InvalidInputError("pair count must be at least 1")
    sinograms = dataset.normalize(dataset.train_sinograms)
    order = _epoch_order(count, len(sinograms), seed)
    _, std_T = marginal_params(score.schedule, score.schedule.T)
    stream = STAGE_STREAMS["pairs"]

    x_T_all, x0_all, mu_all, gt_all, picks_all = [], [], [], [], []
    for batch_index, begin in enumerate(range(0, count, batch_size)):
        idx = order[begin:begin + batch_size]
        rng = make_rng(seed, stream, 1, batch_index)
        picks, kept = sample_scenarios(dataset, scenario_keys, len(idx), rng)
        x0 = sinograms[idx]
        mu = masked_rows(x0, kept).astype(np.float32).astype(np.float64)
        x_T = (mu + float(std_T) * rng.standard_normal(mu.shape)).astype(np.float32).astype(np.float64)
        x0_hat = teacher_restore_from(score, x_T, mu, [dataset.masks[key] for key in picks], solver, sampler,
                                      seed, stream=batch_index)
        x_T_all.append(x_T)
        x0_all.append(x0_hat)
        mu_all.append(mu)
        gt_all.append(x0)
        picks_all.extend(picks)
        logger.info(f"Generated pairs {begin + len(idx)}/{count}")

    pairs = PairSet(
        x_T=np.concatenate(x_T_all).astype(np.float32),
        x0_hat=np.concatenate(x0_all).astype(np.float32),
        mu=np.concatenate(mu_all).astype(np.float32),
        ground_truth=np.concatenate(gt_all).astype(np.float32),
        scenarios=picks_all,
        masks={key: dataset.masks[key] for key in set(picks_all)},
    )
    return pairs


def student_input(x_T: np.ndarray, mu: np.ndarray) -> np.ndarray:
    """(state = 0, x_T, mu); the second stacked pass replaces the state with the first residual"""
    return channels_last(np.zeros_like(x_T), x_T, mu)


def student_predict(student: StudentModel, x_T: Sinogram, mu: Sinogram) -> Sinogram:
    """Residual r_hat; the student's restoration is x_T - r_hat"""
    x_T, single = _as_batch(x_T)
    mu, _ = _as_batch(mu)
    array_guard.require_same_shape(x_T, mu, names=("x_T", "mu"))
    out = net_forward(student.params, student.spec, student_input(x_T, mu), 1.0)
    return _unbatch(out[..., 0].astype(np.float64), single)


def rectify_rnsd(x0_hat: Sinogram, y: Sinogram, mask: AngleMask) -> Sinogram:
    """y + (I - A^+ A) x0_hat: observed rows from y (bit-exact), missing rows from x0_hat"""
    x0_hat = np.asarray(x0_hat)
    y = np.asarray(y)
    array_guard.require_same_shape(x0_hat, y, names=("x0_hat", "y"))
    if y.shape[-2:] != mask.geometry.sinogram_shape:
        raise InvalidInputError(f"sinogram shape {y.shape} does not match mask geometry {mask.geometry.sinogram_shape}")
    dtype = np.result_type(x0_hat.dtype, y.dtype)
    return np.where(mask.kept[:, None], y.astype(dtype, copy=False), x0_hat.astype(dtype, copy=False))


def distill_loss_and_grad(r_hat: np.ndarray, x_T: np.ndarray, x0_hat: np.ndarray, y: np.ndarray,
                          kept: np.ndarray, ground_truth: np.ndarray, boundary_weight: float,
                          gamma: float) -> Tuple[float, np.ndarray]:
    """
    D(x_T - x0_hat, r_hat) + w * D(rectified student restoration, ground truth)

    D is the perceptual proxy. The second term scores the seam between the
    observed rows and the generated wedge. Gradient is w.r.t. r_hat.
    """
    loss, grad = perceptual_proxy_and_grad(r_hat, x_T - x0_hat, gamma)
    if boundary_weight:
        missing = ~kept[:, :, None]
        restored = np.where(missing, x_T - r_hat, y)
        boundary, boundary_grad = perceptual_proxy_and_grad(restored, ground_truth, gamma)
        loss += boundary_weight * boundary
        grad = grad - boundary_weight * boundary_grad * missing
    return loss, grad


def distill_student(pairs: PairSet, cfg: TrainingConfig, schedule: NoiseSchedule,
                    params: Optional[ModelParams] = None,
                    previous_rows: Sequence[Tuple[int, float]] = ()) -> Tuple[ModelParams, LossRows]:
    """Fit the one-step student to the teacher pairs with the boundary-weighted objective"""
    section = cfg.section
    spec = student_spec(section.hidden_channels)
    params = params or fresh_params("distill", spec, cfg.seed)
    omega = cfg.boundary_weight
    gamma = section.proxy_gamma
    x_T_all = pairs.x_T.astype(np.float64)
    x0_all = pairs.x0_hat.astype(np.float64)
    mu_all = pairs.mu.astype(np.float64)
    gt_all = pairs.ground_truth.astype(np.float64)

    def step_fn(current: ModelParams, rng: np.random.Generator):
        idx = rng.integers(0, len(pairs), size=section.batch_size)
        x_T, x0_hat, mu, gt = x_T_all[idx], x0_all[idx], mu_all[idx], gt_all[idx]
        kept = pairs.kept(idx)

        def loss_grad(out: np.ndarray):
            loss, grad = distill_loss_and_grad(out[..., 0].astype(np.float64), x_T, x0_hat, mu, kept, gt, omega, gamma)
            return loss, grad[..., None]

        loss, _, grads = net_value_and_grad(current, spec, student_input(x_T, mu), 1.0, loss_grad)
        return loss, grads

    rows = run_training("distill", params, section, section.iterations, cfg.seed, step_fn, previous_rows)
    return params, rows


def direct_input(mu: np.ndarray, low: np.ndarray) -> np.ndarray:
    return channels_last(np.zeros_like(mu), mu, low)


def direct_predict(direct: DirectModel, mu: Sinogram, mask: AngleMask) -> Sinogram:
    """Low-fidelity fill plus the learned correction (normalized units)"""
    mu, single = _as_batch(mu)
    low = low_fidelity_inpaint(mu, mask)
    out = net_forward(direct.params, direct.spec, direct_input(mu, low), 1.0)
    return _unbatch(low + out[..., 0].astype(np.float64), single)


def train_direct(dataset: SinogramDataset, cfg: TrainingConfig, scenario_keys: Sequence[str],
                 params: Optional[ModelParams] = None,
                 previous_rows: Sequence[Tuple[int, float]] = ()) -> Tuple[ModelParams, LossRows]:
    """Regress the full sinogram from (mu, low-fidelity fill) with plain MSE"""
    section = cfg.section
    spec = student_spec(section.hidden_channels)
    params = params or fresh_params("direct", spec, cfg.seed)
    sinograms = dataset.normalize(dataset.train_sinograms)
    iterations = getattr(section, "direct_iterations", section.iterations)

    def step_fn(current: ModelParams, rng: np.random.Generator):
        idx = rng.integers(0, len(sinograms), size=section.batch_size)
        picks, kept = sample_scenarios(dataset, scenario_keys, section.batch_size, rng)
        x0 = sinograms[idx]
        mu = masked_rows(x0, kept)
        low = low_fidelity_batch(mu, [dataset.masks[key] for key in picks])

        def loss_grad(out: np.ndarray):
            loss, grad = mse_and_grad(low + out[..., 0].astype(np.float64), x0)
            return loss, grad[..., None]

        loss, _, grads = net_value_and_grad(current, spec, direct_input(mu, low), 1.0, loss_grad)
        return loss, grads

    rows = run_training("direct", params, section, iterations, cfg.seed, step_fn, previous_rows)
    return params, rows
