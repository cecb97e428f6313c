"""
Validation module for run specifications.
Checks architecture/activation/task/α-initialization combinations and
reports each rejected combination as the results-grid cell it would fill.
"""
import logging
from dataclasses import dataclass, field
from typing import List, Literal, Optional, Tuple

from pydantic import BaseModel, Field, field_validator

from .activations import ActivationConfig, ActivationConfigError, NormMode
from .constants import (
    CHECKPOINT_EVERY_EPOCHS,
    CIFAR_FILES,
    CONV_CHANNELS,
    DEFAULT_BATCH_SIZE,
    DEFAULT_STEPS,
    DENSE_UNITS,
    IMAGE_SIZE,
    PREFETCH_CAPACITY,
    RECORD_EVERY_STEPS,
    SMOOTHING_WINDOW,
    SYNTHETIC_CLASSES,
    VAL_EVAL_EVERY_STEPS,
)
from .data import TASKS
from .network import Variant
from .training import AlphaInitConfig, TrainConfig
from .utils import generate_slug

logger = logging.getLogger(__name__)

# (arch, optimizer, task) columns of the published activation comparison
PUBLISHED_COLUMNS: Tuple[Tuple[str, str, str], ...] = (
    ("smcn", "adam", "cifar10"),
    ("smcn10", "adam", "cifar10"),
    ("smcn_s", "adam", "cifar10"),
    ("smcn_bn", "adam", "cifar10"),
    ("smcn", "momentum", "cifar10"),
    ("smcn", "adam", "cifar100"),
)


@dataclass
class ValidationResult:
    """Result of run specification validation."""
    is_valid: bool
    errors: List[str] = field(default_factory=list)
    warnings: List[str] = field(default_factory=list)


class ConfigError(Exception):
    """Custom exception for rejected run configurations."""
    def __init__(self, message: str, validation_result: Optional[ValidationResult] = None):
        super().__init__(message)
        self.validation_result = validation_result


class RunSpec(BaseModel):
    """Everything that identifies one training run; written to config.json."""
    arch: str = Field("smcn", description="smcn | smcn10 | smcn_s | smcn_bn")
    activation: str = Field("abu", description="Activation config string")
    task: str = Field("cifar10", description="cifar10 | cifar100 | synthetic")
    optimizer: Literal["adam", "momentum"] = "adam"
    steps: int = Field(DEFAULT_STEPS, ge=0)
    seed: int = 0
    batch_size: int = Field(DEFAULT_BATCH_SIZE, gt=0)
    conv_channels: int = Field(CONV_CHANNELS, gt=0)
    dense_units: Tuple[int, int] = DENSE_UNITS
    image_size: int = Field(IMAGE_SIZE, gt=0)
    subset: Optional[int] = Field(None, gt=0, description="Number of training images to use")
    bn_placement: Literal["before", "after"] = "before"
    precision: Literal["float32", "float64"] = "float32"
    alpha_init: str = Field("default", description="default | pretrained:PATH")
    alpha_trainable: bool = True
    alpha_normalize_first: bool = False
    checkpoint_every_epochs: int = Field(CHECKPOINT_EVERY_EPOCHS, gt=0)
    val_eval_every_steps: int = Field(VAL_EVAL_EVERY_STEPS, gt=0)
    record_every_steps: int = Field(RECORD_EVERY_STEPS, gt=0)
    smoothing_window: int = Field(SMOOTHING_WINDOW, gt=0)
    prefetch: int = Field(PREFETCH_CAPACITY, ge=0)

    @field_validator("arch", "activation", "task")
    @classmethod
    def _lowercase(cls, value: str) -> str:
        return value.strip().lower()

    @property
    def num_classes(self) -> int:
        if self.task in CIFAR_FILES:
            return CIFAR_FILES[self.task]["num_classes"]
        return SYNTHETIC_CLASSES

    @property
    def is_pretrained(self) -> bool:
        return self.alpha_init.startswith("pretrained:")

    @property
    def alpha_treatment(self) -> str:
        """Row qualifier for α-initialization experiments ('' for default initialization)."""
        if not self.is_pretrained:
            return ""
        parts = ["pretrained"]
        if self.alpha_normalize_first:
            parts.append("norm")
        parts.append("adaptive" if self.alpha_trainable else "fixed")
        return "-".join(parts)

    def run_id(self) -> str:
        return generate_slug(self.arch, self.activation, self.task, self.optimizer, self.alpha_treatment,
                             f"s{self.seed}")

    def grid_cell(self) -> str:
        cell = f"arch={self.arch}, optimizer={self.optimizer}, task={self.task}, activation={self.activation}"
        if self.is_pretrained:
            cell += f", alpha_init={self.alpha_treatment}"
        return f"({cell})"

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            steps=self.steps,
            batch_size=self.batch_size,
            optimizer=self.optimizer,
            checkpoint_every_epochs=self.checkpoint_every_epochs,
            val_eval_every_steps=self.val_eval_every_steps,
            record_every_steps=self.record_every_steps,
            smoothing_window=self.smoothing_window,
            prefetch=self.prefetch,
            seed=self.seed,
            precision=self.precision,
            alpha_init=AlphaInitConfig.parse(self.alpha_init, self.alpha_trainable, self.alpha_normalize_first),
        )


def validate_run_spec(spec: RunSpec) -> ValidationResult:
    """
    Validate a run specification.

    Args:
        spec: Run to check

    Returns:
        ValidationResult with validation status and messages
    """
    errors = []
    warnings = []
    cell = spec.grid_cell()

    config = None
    try:
        config = ActivationConfig.parse(spec.activation)
    except ActivationConfigError as e:
        errors.append(f"{cell}: {str(e)}")
    if spec.arch not in {v.value for v in Variant}:
        errors.append(f"{cell}: unknown architecture '{spec.arch}'")
    if spec.task not in TASKS:
        errors.append(f"{cell}: unknown task '{spec.task}'")
    elif spec.task != "synthetic" and spec.image_size != IMAGE_SIZE:
        errors.append(f"{cell}: CIFAR images are {IMAGE_SIZE}x{IMAGE_SIZE}, got image_size={spec.image_size}")

    if spec.alpha_init != "default" and not spec.is_pretrained:
        errors.append(f"{cell}: alpha_init must be 'default' or 'pretrained:PATH'")
    if spec.is_pretrained and config is not None and not config.is_adaptive:
        errors.append(f"{cell}: pre-trained initialization needs scaling or blending weights; "
                      f"'{spec.activation}' has none")
    if not spec.is_pretrained and not spec.alpha_trainable:
        errors.append(f"{cell}: alpha_trainable=false only applies to pre-trained initialization")
    if spec.alpha_normalize_first:
        if not spec.is_pretrained:
            errors.append(f"{cell}: alpha_normalize_first only applies to pre-trained initialization")
        elif config is not None and not (config.family == "abu" and config.norm_mode is NormMode.NONE):
            errors.append(f"{cell}: alpha_normalize_first only applies to the unconstrained ABU")

    if spec.bn_placement == "after" and spec.arch != "smcn_bn":
        warnings.append(f"{cell}: bn_placement has no effect without batch normalization")
    if spec.subset is not None and spec.subset < spec.batch_size:
        errors.append(f"{cell}: subset of {spec.subset} images is smaller than batch_size {spec.batch_size}")
    if spec.task != "synthetic" and (spec.arch, spec.optimizer, spec.task) not in PUBLISHED_COLUMNS:
        warnings.append(f"{cell}: outside the published architecture/optimizer/task grid")

    return ValidationResult(is_valid=len(errors) == 0, errors=errors, warnings=warnings)


def ensure_valid(spec: RunSpec) -> ValidationResult:
    """Validate and raise ConfigError listing every problem; warnings are logged."""
    result = validate_run_spec(spec)
    for warning in result.warnings:
        logger.warning(warning)
    if not result.is_valid:
        raise ConfigError("Invalid run configuration:\n" + "\n".join(result.errors), result)
    return result
