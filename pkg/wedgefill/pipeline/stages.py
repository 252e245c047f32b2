import logging
from typing import Dict, List, Optional

from wedgefill.core.config import RunConfig
from wedgefill.core.errors import ConfigError
from wedgefill.core.tensor_store import ArtifactStore, read_tensors, write_tensors
from wedgefill.diffusion.schedule import NoiseSchedule, build_schedule
from wedgefill.neural.network import ModelParams
from wedgefill.pipeline.data import SinogramDataset, build_dataset, scenario_key
from wedgefill.pipeline.distill import PairSet, distill_student, generate_pairs, train_direct
from wedgefill.pipeline.models import (
    STAGE_VERSION,
    DirectModel,
    PostprocModel,
    RestorationModels,
    ScoreModel,
    StudentModel,
    load_checkpoint,
    load_loss_log,
    save_checkpoint,
    stage_spec,
)
from wedgefill.pipeline.restore import train_postproc
from wedgefill.pipeline.training import train_score

logger = logging.getLogger(__name__)

# stage -> stages whose artifacts it reads
PREREQUISITES: Dict[str, List[str]] = {
    "score": [],
    "pairs": ["score"],
    "distill": ["score", "pairs"],
    "direct": [],
    "postproc": ["distill"],
    "postproc-noproxy": ["distill"],
    "postproc-nosino": [],
}


class PipelineRunner:
    """Loads and produces the artifacts of one run directory"""

    def __init__(self, config: RunConfig, store: ArtifactStore, ignore_config_hash: bool = False):
        self.config = config
        self.store = store
        self.ignore_config_hash = ignore_config_hash
        self._schedule: Optional[NoiseSchedule] = None
        self._dataset: Optional[SinogramDataset] = None

    @property
    def schedule(self) -> NoiseSchedule:
        if self._schedule is None:
            self._schedule = build_schedule(self.config.schedule)
        return self._schedule

    @property
    def training_scenarios(self) -> List[str]:
        return [scenario_key(deg) for deg in self.config.dataset.scenarios_deg]

    def _check_hash(self, manifest_fields: Dict[str, str], label: str) -> None:
        recorded = manifest_fields.get("config_hash")
        if recorded is None or recorded == self.config.config_hash:
            return
        message = f"{label} was produced with config {recorded}, current config is {self.config.config_hash}"
        if not self.ignore_config_hash:
            logger.warning(f"Config hash mismatch: {message}; pass --ignore-config-hash to override")
            raise ConfigError(f"{message} (pass --ignore-config-hash to use it anyway)")
        logger.warning(f"Config hash mismatch: {message}; continuing because of --ignore-config-hash")

    # Dataset

    def generate_dataset(self, seed: Optional[int] = None) -> SinogramDataset:
        seed = self.config.dataset.seed if seed is None else seed
        dataset = build_dataset(self.config, seed)
        write_tensors(self.store.dataset_path, dataset.to_tensors())
        self.store.write_manifest(self.store.dataset_manifest_path, {
            "stage": "gen-dataset",
            "stage_version": STAGE_VERSION,
            "config_hash": self.config.config_hash,
            "seed": seed,
            "train_count": len(dataset.train_images),
            "test_count": len(dataset.test_images),
            "image_size": dataset.geometry.image_size,
            "sinogram_shape": "x".join(map(str, dataset.geometry.sinogram_shape)),
            "sinogram_scale": repr(dataset.sinogram_scale),
            "scenarios_deg": ",".join(dataset.masks),
        })
        self._dataset = dataset
        return dataset

    def load_dataset(self) -> SinogramDataset:
        if self._dataset is None:
            self.store.require(self.store.dataset_path, "gen-dataset")
            self._check_hash(self.store.read_manifest(self.store.dataset_manifest_path), "dataset")
            self._dataset = SinogramDataset.from_tensors(read_tensors(self.store.dataset_path), self.config)
            for key in self.training_scenarios:
                if key not in self._dataset.masks:
                    raise ConfigError(f"dataset has no mask for training scenario {key} deg; regenerate it")
        return self._dataset

    # Trained models

    def _params(self, stage: str) -> ModelParams:
        return load_checkpoint(self.store, stage, self.config, self.ignore_config_hash)

    def score_model(self) -> ScoreModel:
        return ScoreModel(self._params("score"), stage_spec("score", self.config), self.schedule)

    def student_model(self) -> StudentModel:
        return StudentModel(self._params("distill"), stage_spec("distill", self.config), self.schedule)

    def direct_model(self) -> DirectModel:
        return DirectModel(self._params("direct"), stage_spec("direct", self.config))

    def postproc_model(self, variant: str = "postproc") -> PostprocModel:
        return PostprocModel(self._params(variant), stage_spec(variant, self.config), variant)

    def restoration_models(self, variant: str = "postproc") -> RestorationModels:
        dataset = self.load_dataset()
        postproc = self.postproc_model(variant)
        student = self.student_model() if postproc.uses_ensemble else None
        return RestorationModels(student=student, postproc=postproc, sinogram_scale=dataset.sinogram_scale)

    def load_pairs(self) -> PairSet:
        artifact = self.store.stage("pairs")
        self.store.require(artifact.checkpoint, "pairs")
        self._check_hash(self.store.read_manifest(artifact.manifest), "pairs")
        return PairSet.from_tensors(read_tensors(artifact.checkpoint), self.load_dataset())

    # Training

    def train(self, stage: str, seed: Optional[int] = None, resume: bool = False) -> None:
        """
        Run one training stage and write its artifacts

        Args:
            stage: one of ArtifactStore.STAGES
            seed: overrides the stage's configured seed
            resume: continue from an existing checkpoint of this stage

        Raises:
            MissingArtifactError: if a prerequisite stage has not been run
        """
        if stage not in PREREQUISITES:
            raise ConfigError(f"Unknown training stage '{stage}'")
        cfg = self.config.training_config(stage)
        seed = cfg.seed if seed is None else seed
        cfg = cfg.model_copy(update={"seed": seed})

        for required in PREREQUISITES[stage]:
            self.store.require(self.store.stage(required).checkpoint, required)
        dataset = self.load_dataset()
        logger.info(f"Training stage '{stage}' (seed {seed}, config {self.config.config_hash})")

        if stage == "pairs":
            self._generate_pairs(dataset, seed)
            return

        params: Optional[ModelParams] = None
        previous = []
        artifact = self.store.stage(stage)
        if resume:
            if self.store.has(artifact.checkpoint):
                params = self._params(stage)
                previous = load_loss_log(self.store, stage)
            else:
                logger.warning(f"--resume given but {artifact.checkpoint} does not exist, starting fresh")

        scenarios = self.training_scenarios
        if stage == "score":
            params, rows = train_score(dataset, cfg, self.schedule, scenarios, params, previous)
        elif stage == "distill":
            params, rows = distill_student(self.load_pairs(), cfg, self.schedule, params, previous)
        elif stage == "direct":
            params, rows = train_direct(dataset, cfg, scenarios, params, previous)
        else:
            student = self.student_model() if stage != "postproc-nosino" else None
            params, rows = train_postproc(dataset, cfg, scenarios, student, params, previous)

        save_checkpoint(self.store, stage, params, rows, self.config, seed,
                        {"hidden_channels": cfg.section.hidden_channels, "iterations": params.step_count})

    def _generate_pairs(self, dataset: SinogramDataset, seed: int) -> None:
        section = self.config.train_distill
        pairs = generate_pairs(
            self.score_model(), dataset, section.pair_count, seed, self.training_scenarios,
            batch_size=section.pair_batch, solver=self.config.schedule.ode_solver, sampler=section.pair_sampler,
        )
        artifact = self.store.stage("pairs")
        write_tensors(artifact.checkpoint, pairs.to_tensors())
        self.store.write_manifest(artifact.manifest, {
            "stage": "pairs",
            "stage_version": STAGE_VERSION,
            "config_hash": self.config.config_hash,
            "seed": seed,
            "pair_count": len(pairs),
            "sampler": section.pair_sampler,
            "ode_solver": self.config.schedule.ode_solver,
        })
