"""Configuration management for Mask Volume Synth."""

import logging
from pathlib import Path
from typing import List, Literal, Optional, Tuple

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .exceptions import ConfigError
from .models import PhantomSpec, Stage

logger = logging.getLogger(__name__)


class _StrictModel(BaseModel):
    """Base for config sections: unknown keys are rejected."""

    model_config = ConfigDict(extra="forbid")


class ScheduleConfig(_StrictModel):
    """Noise schedule parameters."""

    kind: Literal["linear"] = Field(default="linear", description="Beta schedule kind")
    T: int = Field(default=1000, ge=2, description="Number of diffusion steps")
    beta_start: float = Field(default=1e-4, gt=0.0, lt=1.0)
    beta_end: float = Field(default=2e-2, gt=0.0, lt=1.0)
    sigma_kind: Literal["beta", "posterior"] = Field(
        default="beta", description="Reverse-step noise: sqrt(beta_t) or posterior variance"
    )

    @model_validator(mode="after")
    def validate_order(self) -> "ScheduleConfig":
        """beta_start must not exceed beta_end."""
        if self.beta_start > self.beta_end:
            raise ValueError("beta_start must be <= beta_end")
        return self


class ArchitectureConfig(_StrictModel):
    """Denoiser topology."""

    widths: List[int] = Field(default=[32, 64], min_length=1, max_length=4)
    time_embed_dim: int = Field(default=64, ge=4)
    groups: int = Field(default=8, ge=1, description="GroupNorm groups")
    target_channels: int = Field(default=1, ge=1)
    mask_channels: int = Field(default=1, ge=1)
    informed_channels: int = Field(default=1, ge=1)
    position_embed_dim: int = Field(default=64, ge=4, description="Slice model position width")
    volumetric_placements: Optional[List[str]] = Field(
        default=None, description="Sites that get a depth-axis layer (default: after every stage)"
    )

    @model_validator(mode="after")
    def validate_descriptor(self) -> "ArchitectureConfig":
        """Widths must be divisible by the group count; placements must exist."""
        for width in self.widths:
            if width % self.groups != 0:
                raise ValueError(f"width {width} not divisible by groups={self.groups}")
        if self.time_embed_dim % 2 or self.position_embed_dim % 2:
            raise ValueError("embedding widths must be even")
        if self.volumetric_placements is not None:
            valid = set(self.sites())
            unknown = [p for p in self.volumetric_placements if p not in valid]
            if unknown:
                raise ValueError(f"unknown volumetric placements {unknown}; valid: {sorted(valid)}")
        return self

    def sites(self) -> List[str]:
        """All sites a volumetric layer may follow."""
        stages = range(len(self.widths))
        return [f"enc{i}" for i in stages] + ["mid"] + [f"dec{i}" for i in stages]

    def placements(self) -> List[str]:
        """Resolved volumetric placements."""
        if self.volumetric_placements is not None:
            return list(self.volumetric_placements)
        stages = range(len(self.widths))
        return [f"enc{i}" for i in stages] + [f"dec{i}" for i in stages]

    @property
    def condition_channels(self) -> int:
        """Mask plus informed channels."""
        return self.mask_channels + self.informed_channels


class ConditioningConfig(_StrictModel):
    """Condition encoding."""

    encoder: Literal["identity"] = Field(default="identity")
    mask_encoding: Literal["scalar", "onehot"] = Field(
        default="scalar", description="One normalized label channel or one channel per label"
    )
    label_max: int = Field(default=5, ge=1, description="Largest mask label L")

    @property
    def mask_channels(self) -> int:
        """Channels produced by the mask encoding."""
        return 1 if self.mask_encoding == "scalar" else self.label_max + 1


class TrainConfig(_StrictModel):
    """One training run (slice stage, volumetric stage or position slice model)."""

    iterations: int = Field(default=5000, ge=1)
    batch_volumes: int = Field(default=4, ge=1, description="Volume batch b_v")
    window_length: int = Field(default=8, ge=2, description="Window length n")
    learning_rate: float = Field(default=1e-2, gt=0.0)
    stage: Stage = Field(default=Stage.SLICE)
    optimizer: Literal["sgd", "adamw"] = Field(default="sgd")
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0)
    weight_decay: float = Field(default=0.0, ge=0.0)
    grad_clip: Optional[float] = Field(default=1.0, gt=0.0)
    log_every: int = Field(default=100, ge=1)
    seed: int = Field(default=0, ge=0)

    @property
    def slice_batch(self) -> int:
        """Slice batch b_s = b_v * n."""
        return self.batch_volumes * self.window_length


class SamplerConfig(_StrictModel):
    """Reverse-process and assembly settings."""

    method: Literal["ddpm", "ddim"] = Field(default="ddim")
    ddim_steps: int = Field(default=200, ge=1)
    eta: float = Field(default=0.0, ge=0.0)
    window_length: int = Field(default=8, ge=2, description="Window length n")
    overlap: int = Field(default=1, ge=1, description="Overlapped slices h")
    overlapped_inpainting: bool = Field(default=True)
    volumetric: bool = Field(default=True, description="Run depth-axis layers while sampling")
    seed: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def validate_overlap(self) -> "SamplerConfig":
        """1 <= h < n."""
        if self.overlap >= self.window_length:
            raise ValueError("overlap must be smaller than window_length")
        return self


class AugmentParams(_StrictModel):
    """3D mask augmentation parameters."""

    flip_axes: List[Literal["x", "y", "z"]] = Field(default_factory=list)
    flip_probability: float = Field(default=0.5, ge=0.0, le=1.0)
    max_rotation_deg: Tuple[float, float, float] = Field(
        default=(2.5, 2.5, 2.5), description="Per-axis bound (x, y, z) in degrees"
    )
    translate_label: Optional[int] = Field(default=None, ge=1)
    max_translation_vox: int = Field(default=5, ge=0)
    mode: Literal["full", "rotation_only"] = Field(default="full")

    @field_validator("max_rotation_deg")
    @classmethod
    def validate_rotation(cls, v: Tuple[float, float, float]) -> Tuple[float, float, float]:
        """Rotation bounds are non-negative."""
        if any(a < 0 for a in v):
            raise ValueError("max_rotation_deg must be >= 0")
        return v


class EnhancementConfig(_StrictModel):
    """Enhancement / de-enhancement sampling campaign."""

    informed: str = Field(default="ic", description="ic | ig | self | file:PATH")
    mask_augment: bool = Field(default=False)
    repeats: int = Field(default=1, ge=1)
    split: Literal["train", "test", "all"] = Field(default="test")
    de_enhance: bool = Field(default=False)
    jobs: int = Field(default=1, ge=1, description="Volumes assembled concurrently")
    augment: AugmentParams = Field(default_factory=AugmentParams)

    @field_validator("informed")
    @classmethod
    def validate_informed(cls, v: str) -> str:
        """Validate informed slice policy."""
        if v in {"ic", "ig", "self"} or (v.startswith("file:") and len(v) > 5):
            return v
        raise ValueError("informed must be ic, ig, self or file:PATH")


class DatasetConfig(_StrictModel):
    """Phantom dataset generation and split."""

    path: Path = Field(default=Path("runs/dataset"))
    count: int = Field(default=80, ge=2)
    train_fraction: float = Field(default=0.8, gt=0.0, lt=1.0)
    seed: int = Field(default=0, ge=0)
    phantom: PhantomSpec = Field(default_factory=PhantomSpec)


class EvaluationConfig(_StrictModel):
    """Evaluation settings."""

    reference: Optional[Path] = Field(default=None, description="Reference dataset directory")
    generated: Optional[Path] = Field(default=None, description="Generated dataset directory")
    reference_split: Literal["train", "test", "all"] = Field(default="test")
    projector_seed: int = Field(default=0, ge=0)
    ms_ssim_scales: int = Field(default=2, ge=1)
    paired: bool = Field(default=True, description="Compute MS-SSIM against source volumes")


class CheckpointConfig(_StrictModel):
    """Checkpoint locations per training stage."""

    slice_model: Path = Field(default=Path("runs/checkpoints/slice.gemv"))
    volume_model: Path = Field(default=Path("runs/checkpoints/volume.gemv"))
    position_model: Path = Field(default=Path("runs/checkpoints/position.gemv"))


class LoggingConfig(_StrictModel):
    """Logging configuration settings."""

    level: str = Field(default="INFO", description="Logging level")
    file: Optional[Path] = Field(default=None, description="Optional log file path")
    format: str = Field(
        default="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        description="Log message format",
    )
    console_output: bool = Field(default=True, description="Enable console output")

    @field_validator("level")
    @classmethod
    def validate_level(cls, v: str) -> str:
        """Validate logging level."""
        valid_levels = ["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"]
        if v.upper() not in valid_levels:
            raise ValueError(f"Level must be one of {valid_levels}")
        return v.upper()


def _default_volume_train() -> TrainConfig:
    return TrainConfig(iterations=2000, stage=Stage.VOLUMETRIC, seed=1)


def _default_position_train() -> TrainConfig:
    return TrainConfig(iterations=3000, seed=2)


class RunConfig(_StrictModel):
    """Root run configuration shared by every command."""

    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    architecture: ArchitectureConfig = Field(default_factory=ArchitectureConfig)
    conditioning: ConditioningConfig = Field(default_factory=ConditioningConfig)
    train_slice: TrainConfig = Field(default_factory=TrainConfig)
    train_volume: TrainConfig = Field(default_factory=_default_volume_train)
    train_position: TrainConfig = Field(default_factory=_default_position_train)
    sampler: SamplerConfig = Field(default_factory=SamplerConfig)
    enhancement: EnhancementConfig = Field(default_factory=EnhancementConfig)
    evaluation: EvaluationConfig = Field(default_factory=EvaluationConfig)
    checkpoints: CheckpointConfig = Field(default_factory=CheckpointConfig)
    logging: LoggingConfig = Field(default_factory=LoggingConfig)
    output_dir: Path = Field(default=Path("runs/output"))
    seed: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def validate_cross_section(self) -> "RunConfig":
        """Checks that span several sections."""
        min_depth = self.dataset.phantom.depth_range[0]
        for name, n in (
            ("sampler", self.sampler.window_length),
            ("train_slice", self.train_slice.window_length),
            ("train_volume", self.train_volume.window_length),
        ):
            if min_depth < n:
                raise ValueError(
                    f"dataset.phantom.depth_range min ({min_depth}) is shorter than "
                    f"{name}.window_length ({n})"
                )
        if self.sampler.method == "ddim" and self.sampler.ddim_steps > self.schedule.T:
            raise ValueError("sampler.ddim_steps must not exceed schedule.T")
        if self.architecture.mask_channels != self.conditioning.mask_channels:
            raise ValueError(
                f"architecture.mask_channels ({self.architecture.mask_channels}) does not match "
                f"the {self.conditioning.mask_encoding} mask encoding "
                f"({self.conditioning.mask_channels})"
            )
        if self.conditioning.label_max < self.dataset.phantom.label_max:
            raise ValueError("conditioning.label_max is smaller than the phantom label range")
        if self.train_volume.stage != Stage.VOLUMETRIC:
            raise ValueError("train_volume.stage must be 'volumetric'")
        return self


def load_config(config_path: Path) -> RunConfig:
    """Load and validate a run configuration from YAML or JSON.

    Args:
        config_path: Path to configuration file

    Returns:
        Validated RunConfig

    Raises:
        ConfigError: If the file is missing, unparsable or fails validation
    """
    if not config_path.exists():
        raise ConfigError(f"Configuration file not found: {config_path}")

    logger.debug(f"Loading configuration from {config_path}")

    try:
        with open(config_path, "r", encoding="utf-8") as f:
            config_data = yaml.safe_load(f) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"Invalid configuration file {config_path}: {e}") from e

    if not isinstance(config_data, dict):
        raise ConfigError(f"Configuration root must be a mapping: {config_path}")

    try:
        return RunConfig(**config_data)
    except ValidationError as e:
        raise ConfigError(f"Invalid configuration in {config_path}:\n{e}") from e


def save_config(config: RunConfig, config_path: Path) -> None:
    """Save a run configuration to YAML.

    Args:
        config: Configuration to write
        config_path: Path to save configuration file
    """
    config_path.parent.mkdir(parents=True, exist_ok=True)

    logger.debug(f"Saving configuration to {config_path}")

    with open(config_path, "w", encoding="utf-8") as f:
        yaml.safe_dump(config.model_dump(mode="json"), f, default_flow_style=False, sort_keys=False)

    logger.info(f"Configuration saved to {config_path}")
