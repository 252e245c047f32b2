"""
Network heads of the pipeline and their checkpoints.

  score     inputs (x_t, mu, low-fidelity fill) + t/T      -> predicted noise
  student   inputs (state, x_T, mu) + 1, stacked twice     -> residual x_T - x0
  direct    inputs (state, mu, low-fidelity fill), stacked -> correction to the fill
  postproc  inputs (FBP mean, FBP std)                     -> refined image
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from wedgefill.core.config import RunConfig
from wedgefill.core.errors import ConfigError, InvalidInputError
from wedgefill.core.tensor_store import ArtifactStore, format_loss_log, parse_loss_log, read_tensors, write_tensors
from wedgefill.diffusion.schedule import NoiseSchedule
from wedgefill.neural.network import ModelParams, NetSpec, net_forward

logger = logging.getLogger(__name__)

# bump when a stage's checkpoint layout or input channels change
STAGE_VERSION = 1


def score_spec(hidden_channels: int) -> NetSpec:
    return NetSpec(in_channels=3, out_channels=1, hidden_channels=hidden_channels)


def student_spec(hidden_channels: int) -> NetSpec:
    return NetSpec(in_channels=3, out_channels=1, hidden_channels=hidden_channels,
                   stacking_depth=2, state_channels=1)


def postproc_spec(hidden_channels: int) -> NetSpec:
    return NetSpec(in_channels=2, out_channels=1, hidden_channels=hidden_channels)


def stage_spec(stage: str, config: RunConfig) -> NetSpec:
    """Architecture trained by a stage"""
    hidden = config.training_config(stage).section.hidden_channels
    if stage == "score":
        return score_spec(hidden)
    if stage in ("distill", "direct"):
        return student_spec(hidden)
    if stage.startswith("postproc"):
        return postproc_spec(hidden)
    raise ConfigError(f"stage '{stage}' has no network")


def channels_last(*grids: np.ndarray) -> np.ndarray:
    """Stack (B, H, W) grids into a (B, H, W, C) network input"""
    return np.stack(grids, axis=-1)


@dataclass
class ScoreModel:
    """Noise-prediction network of the teacher"""

    params: ModelParams
    spec: NetSpec
    schedule: NoiseSchedule

    def predict_eps(self, x_t: np.ndarray, mu: np.ndarray, low_fidelity: np.ndarray, t) -> np.ndarray:
        t_norm = np.asarray(t, dtype=np.float64) / self.schedule.T
        out = net_forward(self.params, self.spec, channels_last(x_t, mu, low_fidelity), t_norm)
        return out[..., 0].astype(np.float64)


@dataclass
class StudentModel:
    """One-step distilled inpainter (residual convention)"""

    params: ModelParams
    spec: NetSpec
    schedule: NoiseSchedule


@dataclass
class DirectModel:
    """Plain-MSE inpainter used by the distillation ablation"""

    params: ModelParams
    spec: NetSpec


@dataclass
class PostprocModel:
    params: ModelParams
    spec: NetSpec
    variant: str = "postproc"

    @property
    def uses_ensemble(self) -> bool:
        return self.variant != "postproc-nosino"


@dataclass
class RestorationModels:
    """Everything inference needs: the student, one post-processor and the normalization"""

    student: Optional[StudentModel]
    postproc: PostprocModel
    sinogram_scale: float


def save_checkpoint(store: ArtifactStore, stage: str, params: ModelParams, loss_rows: List[Tuple[int, float]],
                    config: RunConfig, seed: int, extra: Optional[Dict[str, object]] = None) -> None:
    """Write checkpoint, loss log and manifest of a stage"""
    artifact = store.stage(stage)
    write_tensors(artifact.checkpoint, params.to_tensors())
    store.write_text(artifact.loss_log, format_loss_log(loss_rows))
    fields: Dict[str, object] = {
        "stage": stage,
        "stage_version": STAGE_VERSION,
        "config_hash": config.config_hash,
        "seed": seed,
        "step_count": params.step_count,
        "parameters": params.num_parameters,
    }
    fields.update(extra or {})
    store.write_manifest(artifact.manifest, fields)
    logger.info(f"Saved {stage} checkpoint at step {params.step_count} to {artifact.checkpoint}")


def check_config_hash(store: ArtifactStore, stage: str, config: RunConfig, ignore_mismatch: bool) -> None:
    """Compare the config hash recorded by a stage with the current one"""
    recorded = store.read_manifest(store.stage(stage).manifest).get("config_hash")
    if recorded is None or recorded == config.config_hash:
        return
    message = f"{stage} artifacts were produced with config {recorded}, current config is {config.config_hash}"
    if not ignore_mismatch:
        logger.warning(f"Config hash mismatch: {message}; pass --ignore-config-hash to override")
        raise ConfigError(f"{message} (pass --ignore-config-hash to use them anyway)")
    logger.warning(f"Config hash mismatch: {message}; continuing because of --ignore-config-hash")


def load_checkpoint(store: ArtifactStore, stage: str, config: RunConfig,
                    ignore_mismatch: bool = False, produced_by: Optional[str] = None) -> ModelParams:
    """Load a stage's parameters, checking that they fit the configured architecture"""
    artifact = store.stage(stage)
    store.require(artifact.checkpoint, produced_by or stage)
    check_config_hash(store, stage, config, ignore_mismatch)
    params = ModelParams.from_tensors(read_tensors(artifact.checkpoint))
    if stage != "pairs":
        expected = stage_spec(stage, config).parameter_count()
        if params.num_parameters != expected:
            raise InvalidInputError(
                f"{stage} checkpoint holds {params.num_parameters} parameters, "
                f"the configured network has {expected}"
            )
    return params


def load_loss_log(store: ArtifactStore, stage: str) -> List[Tuple[int, float]]:
    path = store.stage(stage).loss_log
    if not path.is_file():
        return []
    return parse_loss_log(path.read_text(encoding="utf-8"))
