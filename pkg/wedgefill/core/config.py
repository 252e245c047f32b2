import logging
from pathlib import Path
from typing import ClassVar, Dict, List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from wedgefill.core.errors import ConfigError

logger = logging.getLogger(__name__)


class Settings(BaseSettings):
    # Parallelism cap for independent evaluation cells and ensemble members
    WEDGEFILL_THREADS: int = Field(default=1, ge=1)

    # Application Settings
    WEDGEFILL_LOG_LEVEL: str = "INFO"
    WEDGEFILL_RUN_DIR: str = "runs/default"

    model_config = SettingsConfigDict(env_file=".env", case_sensitive=True, extra="ignore")


settings = Settings()


def _split_list(value):
    """Accept '60, 90,120' as well as real sequences"""
    if isinstance(value, str):
        return [item.strip() for item in value.split(",") if item.strip()]
    return value


class _Section(BaseModel):
    """Base for one [section] of the run configuration"""

    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class DatasetConfig(_Section):
    """[dataset] phantom synthesis and optional raw-slice import"""

    train_count: int = Field(default=200, ge=1)
    test_count: int = Field(default=20, ge=1)
    seed: int = 7
    scenarios_deg: Tuple[float, ...] = (60.0, 90.0, 120.0)
    raw_slices_dir: str = ""
    raw_slice_size: int = Field(default=512, ge=16)

    @field_validator("scenarios_deg", mode="before")
    @classmethod
    def split_lists(cls, value):
        return _split_list(value)


class GeometryConfig(_Section):
    """[geometry] parallel-beam scan description"""

    image_size: int = Field(default=128, ge=16)
    num_angles: int = Field(default=180, ge=2)
    angle_step_deg: float = Field(default=1.0, gt=0)
    detector_bins: int = Field(default=192, ge=1)
    detector_spacing: float = Field(default=1.0, gt=0)
    missing_start_deg: Union[float, Literal["trailing"]] = "trailing"


class ScheduleConfig(_Section):
    """[schedule] mean-reverting noise schedule"""

    T: int = Field(default=100, ge=1)
    kind: Literal["linear", "cosine", "constant"] = "linear"
    zeta_start: float = Field(default=0.002, gt=0)
    zeta_end: float = Field(default=0.04, gt=0)
    stationary_std: float = 0.5
    terminal_mean_coeff: float = Field(default=0.01, gt=0, lt=1)
    ode_solver: Literal["euler", "ddim"] = "ddim"

    @field_validator("stationary_std")
    @classmethod
    def check_positive_std(cls, value: float) -> float:
        if not value > 0:
            raise ValueError("stationary_std (lambda) must be > 0, the noise target is undefined otherwise")
        return value


class StageTrainingConfig(_Section):
    """Optimizer and loop settings shared by every training stage"""

    iterations: int = Field(default=5000, ge=1)
    batch_size: int = Field(default=8, ge=1)
    lr: float = Field(default=5e-4, gt=0)
    lr_min: float = Field(default=1e-5, ge=0)
    beta1: float = Field(default=0.9, ge=0, lt=1)
    beta2: float = Field(default=0.999, ge=0, lt=1)
    eps: float = Field(default=1e-8, gt=0)
    weight_decay: float = Field(default=0.0, ge=0)
    hidden_channels: int = Field(default=32, ge=1)
    seed: int = 0
    log_every: int = Field(default=100, ge=1)


class ScoreTrainingConfig(StageTrainingConfig):
    """[train.score]"""

    iterations: int = Field(default=20000, ge=1)
    batch_size: int = Field(default=4, ge=1)


class DistillTrainingConfig(StageTrainingConfig):
    """[train.distill] pair generation, distillation and the direct-MSE ablation"""

    boundary_weight: float = Field(default=0.01, ge=0)
    proxy_gamma: float = Field(default=0.5, ge=0)
    pair_count: int = Field(default=2000, ge=1)
    pair_batch: int = Field(default=8, ge=1)
    pair_sampler: Literal["ode", "sde"] = "ode"
    direct_iterations: int = Field(default=5000, ge=1)


class PostprocTrainingConfig(StageTrainingConfig):
    """[train.postproc]"""

    mse_weight: float = Field(default=1.0, ge=0)
    proxy_weight: float = Field(default=0.5, ge=0)
    proxy_gamma: float = Field(default=0.5, ge=0)
    ensemble_size: int = Field(default=4, ge=1)


class EvalConfig(_Section):
    """[eval] comparison and ablation harness"""

    scenarios_deg: Tuple[float, ...] = (60.0, 90.0, 120.0)
    methods: Tuple[Literal["fbp", "tv", "pipeline"], ...] = ("fbp", "tv", "pipeline")
    runs: int = Field(default=10, ge=1)
    ensemble_size: int = Field(default=10, ge=1)
    tv_lambda: float = Field(default=0.1, ge=0)
    tv_iterations: int = Field(default=500, ge=1)
    test_limit: int = Field(default=0, ge=0)
    psnr_cap_db: float = Field(default=99.0, gt=0)
    seed: int = 1234

    @field_validator("scenarios_deg", "methods", mode="before")
    @classmethod
    def split_lists(cls, value):
        return _split_list(value)


class RunConfig(BaseModel):
    """Complete run configuration, one attribute per [section]"""

    model_config = ConfigDict(extra="forbid")

    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    geometry: GeometryConfig = Field(default_factory=GeometryConfig)
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    train_score: ScoreTrainingConfig = Field(default_factory=ScoreTrainingConfig)
    train_distill: DistillTrainingConfig = Field(default_factory=DistillTrainingConfig)
    train_postproc: PostprocTrainingConfig = Field(default_factory=PostprocTrainingConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)

    # file section name -> attribute
    SECTIONS: ClassVar[Dict[str, str]] = {
        "dataset": "dataset",
        "geometry": "geometry",
        "schedule": "schedule",
        "train.score": "train_score",
        "train.distill": "train_distill",
        "train.postproc": "train_postproc",
        "eval": "eval",
    }

    @model_validator(mode="after")
    def check_geometry(self) -> "RunConfig":
        geo = self.geometry
        if geo.num_angles * geo.angle_step_deg > 180.0 + 1e-9:
            raise ValueError("num_angles * angle_step_deg must not exceed 180 degrees")
        return self

    def training_config(self, stage: str) -> "TrainingConfig":
        """Assemble the TrainingConfig view for one stage"""
        section = {
            "score": self.train_score,
            "pairs": self.train_distill,
            "distill": self.train_distill,
            "direct": self.train_distill,
            "postproc": self.train_postproc,
            "postproc-noproxy": self.train_postproc,
            "postproc-nosino": self.train_postproc,
        }.get(stage)
        if section is None:
            raise ConfigError(f"Unknown training stage '{stage}'")
        return TrainingConfig(stage=stage, schedule=self.schedule, section=section,
                              n_ensemble=self.eval.ensemble_size, seed=section.seed)

    @property
    def config_hash(self) -> str:
        return config_hash(self)


class TrainingConfig(BaseModel):
    """Per-stage training view: schedule, loop settings, loss weights, ensemble size"""

    model_config = ConfigDict(extra="forbid")

    stage: str
    schedule: ScheduleConfig
    section: StageTrainingConfig
    n_ensemble: int = Field(default=10, ge=1)
    seed: int = 0

    @property
    def boundary_weight(self) -> float:
        return getattr(self.section, "boundary_weight", 0.0)


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(_format_value(item) for item in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def serialize_config(config: RunConfig) -> str:
    """Canonical text form: every section and key in declaration order"""
    lines: List[str] = []
    for section_name, attribute in RunConfig.SECTIONS.items():
        section = getattr(config, attribute)
        lines.append(f"[{section_name}]")
        for key in type(section).model_fields:
            lines.append(f"{key} = {_format_value(getattr(section, key))}")
        lines.append("")
    return "\n".join(lines)


def parse_config(text: str, source: str = "<string>") -> RunConfig:
    """Parse key = value sections; unknown sections or keys are rejected"""
    raw: Dict[str, Dict[str, str]] = {}
    current: Optional[str] = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#") or stripped.startswith(";"):
            continue
        if stripped.startswith("[") and stripped.endswith("]"):
            current = stripped[1:-1].strip()
            if current not in RunConfig.SECTIONS:
                raise ConfigError(f"{source}:{lineno}: unknown section [{current}]")
            raw.setdefault(current, {})
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got '{stripped}'")
        if current is None:
            raise ConfigError(f"{source}:{lineno}: key outside of any section")
        key, value = (part.strip() for part in stripped.split("=", 1))
        if key in raw[current]:
            raise ConfigError(f"{source}:{lineno}: duplicate key '{key}' in [{current}]")
        raw[current][key] = value

    payload = {RunConfig.SECTIONS[name]: values for name, values in raw.items()}
    try:
        return RunConfig.model_validate(payload)
    except ValidationError as e:
        raise ConfigError(f"{source}: invalid configuration: {e}") from e


def load_config(path: Optional[Union[str, Path]]) -> RunConfig:
    """Load a run configuration file; no path means all defaults"""
    if path is None:
        logger.info("No config file given, using defaults")
        return RunConfig()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"Config file not found: {path}")
    return parse_config(path.read_text(encoding="utf-8"), source=str(path))


def fnv1a_64(data: bytes) -> int:
    """64-bit FNV-1a"""
    value = 0xCBF29CE484222325
    for byte in data:
        value ^= byte
        value = (value * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return value


def config_hash(config: RunConfig) -> str:
    return f"{fnv1a_64(serialize_config(config).encode('utf-8')):016x}"

