import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

from wedgefill.core.config import TrainingConfig
from wedgefill.core.errors import InvalidInputError
from wedgefill.diffusion.sampling import derive_seed, make_rng, terminal_sample
from wedgefill.neural.losses import mse_and_grad, perceptual_proxy_and_grad
from wedgefill.neural.network import ModelParams, net_forward, net_value_and_grad
from wedgefill.pipeline.data import SinogramDataset
from wedgefill.pipeline.distill import rectify_rnsd, student_predict
from wedgefill.pipeline.models import PostprocModel, RestorationModels, StudentModel, channels_last, postproc_spec
from wedgefill.pipeline.training import STAGE_STREAMS, LossRows, fresh_params, run_training
from wedgefill.tomo.geometry import AngleMask, Image, ScanGeometry, Sinogram
from wedgefill.tomo.operators import apply_mask, fbp

logger = logging.getLogger(__name__)


def ensemble_sample(student: StudentModel, mu: Sinogram, mask: AngleMask, n: int, seed: int,
                    sinogram_scale: float = 1.0) -> np.ndarray:
    """
    n rectified one-step restorations of one observation

    Member i starts from x_T = mu + std_T * z with z drawn from
    make_rng(seed, i). mu is in raw units; the student runs on mu /
    sinogram_scale and its restoration is scaled back before the observed
    rows are copied in, so every member matches mu bit-exactly on kept rows.

    Returns:
        (n, num_angles, detector_bins) array
    """
    if n < 1:
        raise InvalidInputError(f"ensemble size must be at least 1, got {n}")
    mu = np.asarray(mu)
    mu_norm = np.asarray(mu, dtype=np.float64) / sinogram_scale
    x_T = np.stack([terminal_sample(student.schedule, mu_norm, make_rng(seed, member)) for member in range(n)])
    mu_batch = np.broadcast_to(mu_norm, x_T.shape)
    restored = (x_T - student_predict(student, x_T, mu_batch)) * sinogram_scale
    return rectify_rnsd(restored, np.broadcast_to(mu, x_T.shape), mask)


def data_consistency_error(sinograms: np.ndarray, y: Sinogram, mask: AngleMask) -> float:
    """Largest |sinogram - y| over the observed rows of every member; 0 for an empty ensemble"""
    sinograms = np.asarray(sinograms, dtype=np.float64)
    if sinograms.size == 0:
        return 0.0
    kept = mask.kept
    return float(np.max(np.abs(sinograms[..., kept, :] - np.asarray(y, dtype=np.float64)[kept, :])))


def ensemble_statistics(images: np.ndarray) -> Tuple[Image, Image]:
    """Pixel-wise mean and unbiased std over the leading axis; one member gives a zero std"""
    images = np.asarray(images, dtype=np.float64)
    mean = images.mean(axis=0)
    if images.shape[0] < 2:
        return mean, np.zeros_like(mean)
    return mean, images.std(axis=0, ddof=1)


def postproc_refine(tau: PostprocModel, fbp_mean: Image, fbp_std: Image) -> Image:
    """Two-channel (mean, std) input -> refined image; batches allowed"""
    fbp_mean = np.asarray(fbp_mean, dtype=np.float64)
    fbp_std = np.asarray(fbp_std, dtype=np.float64)
    if fbp_mean.shape != fbp_std.shape:
        raise InvalidInputError(f"mean/std shapes differ: {fbp_mean.shape} vs {fbp_std.shape}")
    single = fbp_mean.ndim == 2
    if single:
        fbp_mean, fbp_std = fbp_mean[None], fbp_std[None]
    out = net_forward(tau.params, tau.spec, channels_last(fbp_mean, fbp_std), 0.0)[..., 0].astype(np.float64)
    return out[0] if single else out


@dataclass
class RestorationResult:
    """Final image plus the intermediates of every stage"""

    image: Image
    fbp_mean: Image
    fbp_std: Image
    masked_fbp: Image
    ensemble: np.ndarray = field(default_factory=lambda: np.zeros((0, 0, 0)))
    fbp_images: np.ndarray = field(default_factory=lambda: np.zeros((0, 0, 0)))


def postproc_inputs(models: RestorationModels, geometry: ScanGeometry, y: Sinogram, mask: AngleMask,
                    n: int, seed: int) -> RestorationResult:
    """Everything up to (not including) the post-processor"""
    y = apply_mask(y, mask)
    masked = fbp(y, geometry)
    if not models.postproc.uses_ensemble:
        return RestorationResult(image=masked, fbp_mean=masked, fbp_std=np.zeros_like(masked), masked_fbp=masked)
    ensemble = ensemble_sample(models.student, y, mask, n, seed, models.sinogram_scale)
    images = fbp(ensemble, geometry)
    mean, std = ensemble_statistics(images)
    return RestorationResult(image=mean, fbp_mean=mean, fbp_std=std, masked_fbp=masked,
                             ensemble=ensemble, fbp_images=images)


def full_restore(models: RestorationModels, geometry: ScanGeometry, y: Sinogram, mask: AngleMask,
                 n: int, seed: int) -> RestorationResult:
    """
    Ensemble sampling -> FBP of every member -> mean/std -> post-processing

    With a post-processor trained on masked FBP ("postproc-nosino") the
    ensemble is skipped and the refiner sees (masked FBP, zeros).
    """
    result = postproc_inputs(models, geometry, y, mask, n, seed)
    result.image = postproc_refine(models.postproc, result.fbp_mean, result.fbp_std)
    return result


def _postproc_bank(dataset: SinogramDataset, student: Optional[StudentModel], variant: str,
                   scenario_keys: Sequence[str], ensemble_size: int, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """Post-processor inputs for every (training image, scenario), computed once"""
    geometry = dataset.geometry
    stream = STAGE_STREAMS[variant]
    inputs, targets = [], []
    for index, sinogram in enumerate(dataset.train_sinograms):
        for s_index, key in enumerate(scenario_keys):
            mask = dataset.masks[key]
            y = apply_mask(sinogram, mask)
            if variant == "postproc-nosino":
                mean = fbp(y, geometry)
                std = np.zeros_like(mean)
            else:
                members = ensemble_sample(student, y, mask, ensemble_size,
                                          derive_seed(seed, stream, index, s_index), dataset.sinogram_scale)
                mean, std = ensemble_statistics(fbp(members, geometry))
            inputs.append(channels_last(mean[None], std[None])[0])
            targets.append(dataset.train_images[index])
        if (index + 1) % 50 == 0:
            logger.info(f"[{variant}] prepared inputs for {index + 1}/{len(dataset.train_sinograms)} images")
    return np.stack(inputs).astype(np.float32), np.stack(targets).astype(np.float64)


def train_postproc(dataset: SinogramDataset, cfg: TrainingConfig, scenario_keys: Sequence[str],
                   student: Optional[StudentModel] = None, params: Optional[ModelParams] = None,
                   previous_rows: Sequence[Tuple[int, float]] = ()) -> Tuple[ModelParams, LossRows]:
    """
    Train the refiner on (FBP mean, FBP std) -> ground-truth image

    Loss is mse_weight * MSE + proxy_weight * perceptual proxy; the
    "postproc-noproxy" variant drops the proxy term and "postproc-nosino"
    feeds masked FBP with a zero std channel instead of the ensemble.
    """
    variant = cfg.stage
    section = cfg.section
    if variant != "postproc-nosino" and student is None:
        raise InvalidInputError(f"{variant} needs the distilled student")
    spec = postproc_spec(section.hidden_channels)
    params = params or fresh_params(variant, spec, cfg.seed)
    proxy_weight = 0.0 if variant == "postproc-noproxy" else section.proxy_weight
    inputs, targets = _postproc_bank(dataset, student, variant, scenario_keys, section.ensemble_size, cfg.seed)

    def step_fn(current: ModelParams, rng: np.random.Generator):
        idx = rng.integers(0, len(inputs), size=section.batch_size)
        target = targets[idx]

        def loss_grad(out: np.ndarray):
            image = out[..., 0].astype(np.float64)
            loss, grad = mse_and_grad(image, target)
            loss, grad = section.mse_weight * loss, section.mse_weight * grad
            if proxy_weight:
                proxy, proxy_grad = perceptual_proxy_and_grad(image, target, section.proxy_gamma)
                loss += proxy_weight * proxy
                grad = grad + proxy_weight * proxy_grad
            return loss, grad[..., None]

        loss, _, grads = net_value_and_grad(current, spec, inputs[idx], 0.0, loss_grad)
        return loss, grads

    rows = run_training(variant, params, section, section.iterations, cfg.seed, step_fn, previous_rows)
    return params, rows
