import logging
import math
import time
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from wedgefill.core.config import StageTrainingConfig, TrainingConfig
from wedgefill.core.errors import TrainingDivergedError
from wedgefill.diffusion.sampling import forward_sample, make_rng, normalized_noise
from wedgefill.diffusion.schedule import NoiseSchedule
from wedgefill.neural.losses import mse_and_grad
from wedgefill.neural.network import ModelParams, NetSpec, init_params, net_value_and_grad
from wedgefill.neural.optim import adam_step, cosine_lr
from wedgefill.pipeline.data import SinogramDataset, low_fidelity_batch, masked_rows, sample_scenarios
from wedgefill.pipeline.models import channels_last, score_spec

logger = logging.getLogger(__name__)

# random stream id of each stage, so stages sharing a seed never share draws
STAGE_STREAMS: Dict[str, int] = {
    "score": 1,
    "pairs": 2,
    "distill": 3,
    "direct": 4,
    "postproc": 5,
    "postproc-noproxy": 6,
    "postproc-nosino": 7,
}

LossRows = List[Tuple[int, float]]
StepFn = Callable[[ModelParams, np.random.Generator], Tuple[float, Dict[str, np.ndarray]]]


def fresh_params(stage: str, spec: NetSpec, seed: int) -> ModelParams:
    """Initial weights of a stage, drawn from the stage's step-independent stream"""
    return init_params(spec, make_rng(seed, STAGE_STREAMS[stage], 0, 0))


def run_training(stage: str, params: ModelParams, section: StageTrainingConfig, iterations: int,
                 seed: int, step_fn: StepFn, previous_rows: Sequence[Tuple[int, float]] = ()) -> LossRows:
    """
    Optimize params for steps params.step_count .. iterations - 1

    Step k draws all of its randomness from make_rng(seed, stage stream, 1, k),
    so a run resumed from a checkpoint continues the same sequence of batches.

    Args:
        stage: stage name (selects the random stream and labels log lines)
        params: parameters to update in place; step_count is the resume point
        section: optimizer settings
        iterations: total number of optimizer steps
        seed: stage seed
        step_fn: (params, rng) -> (loss, gradients)
        previous_rows: loss log of the run being resumed

    Returns:
        list of (step, loss) rows, one per completed step

    Raises:
        TrainingDivergedError: on a non-finite loss or gradient
    """
    rows: LossRows = [row for row in previous_rows if row[0] <= params.step_count]
    start = params.step_count
    if start >= iterations:
        logger.info(f"[{stage}] already at step {start} of {iterations}, nothing to do")
        return rows
    if start:
        logger.info(f"[{stage}] resuming at step {start}")

    stream = STAGE_STREAMS[stage]
    started = time.perf_counter()
    for step in range(start, iterations):
        loss, grads = step_fn(params, make_rng(seed, stream, 1, step))
        if not math.isfinite(loss):
            logger.error(f"[{stage}] loss became {loss} at step {step + 1}")
            raise TrainingDivergedError(f"{stage}: non-finite loss {loss} at step {step + 1}")
        lr = cosine_lr(step, iterations, section.lr, section.lr_min)
        adam_step(params, grads, lr, (section.beta1, section.beta2), section.eps, section.weight_decay)
        rows.append((step + 1, loss))
        if (step + 1) % section.log_every == 0 or step + 1 == iterations:
            logger.info(f"[{stage}] step {step + 1}/{iterations} loss {loss:.6f} lr {lr:.2e}")
    logger.info(f"[{stage}] {iterations - start} steps in {time.perf_counter() - started:.1f}s")
    return rows


def train_score(dataset: SinogramDataset, cfg: TrainingConfig, schedule: NoiseSchedule,
                scenario_keys: Sequence[str], params: Optional[ModelParams] = None,
                previous_rows: Sequence[Tuple[int, float]] = ()) -> Tuple[ModelParams, LossRows]:
    """
    Train the noise-prediction network of the teacher

    Each step draws training sinograms, a missing-wedge scenario and a step
    t ~ U{1..T} per sample, noises x_0 toward mu = masked x_0 and regresses
    the normalized noise from (x_t, mu, low-fidelity fill, t/T).
    """
    section = cfg.section
    spec = score_spec(section.hidden_channels)
    params = params or fresh_params("score", spec, cfg.seed)
    sinograms = dataset.normalize(dataset.train_sinograms)

    def step_fn(current: ModelParams, rng: np.random.Generator):
        idx = rng.integers(0, len(sinograms), size=section.batch_size)
        picks, kept = sample_scenarios(dataset, scenario_keys, section.batch_size, rng)
        x0 = sinograms[idx]
        mu = masked_rows(x0, kept)
        low = low_fidelity_batch(mu, [dataset.masks[key] for key in picks])
        t = rng.integers(1, schedule.T + 1, size=section.batch_size)
        x_t = forward_sample(schedule, t, x0, mu, rng)
        eps = normalized_noise(schedule, t, x_t, x0, mu)

        def loss_grad(out: np.ndarray):
            loss, grad = mse_and_grad(out[..., 0], eps)
            return loss, grad[..., None]

        loss, _, grads = net_value_and_grad(current, spec, channels_last(x_t, mu, low), t / schedule.T, loss_grad)
        return loss, grads

    rows = run_training("score", params, section, section.iterations, cfg.seed, step_fn, previous_rows)
    return params, rows
