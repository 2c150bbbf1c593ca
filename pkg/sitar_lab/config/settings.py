"""Experiment configuration and environment settings."""

from __future__ import annotations

import logging
import os
from pathlib import Path
from typing import Any, Final, Literal, Mapping, Sequence

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .presets import get_preset

logger = logging.getLogger(__name__)

LOG_LEVEL_ENV_VAR: Final[str] = "SITAR_LOG_LEVEL"
RUNS_DIR_ENV_VAR: Final[str] = "SITAR_RUNS_DIR"
PRESET_ENV_VAR: Final[str] = "SITAR_PRESET"
DEFAULT_RUNS_DIR: Final[str] = "runs"
DEFAULT_LOG_LEVEL: Final[str] = "INFO"


class ExperimentConfig(BaseModel):
    """Every hyperparameter of one training run.

    Defaults are the ColorMNIST row of the hyperparameter table
    (m=10, alpha=1, beta=2, lambda=10) with Adam at 1e-3, batch 128, 30 epochs.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    alpha: float = Field(default=1.0, ge=0.0)
    beta: float = Field(default=2.0, ge=0.0)
    lambda_cons: float = Field(default=10.0, ge=0.0)
    latent_dim: int = Field(default=10, ge=1)
    epochs: int = Field(default=30, ge=0)
    batch_size: int = Field(default=128, ge=2)
    learning_rate: float = Field(default=1e-3, gt=0.0)
    optimizer: Literal["adam", "sgd"] = "adam"
    seed: int = 0
    isotropic: bool = False
    balanced_correlation: bool = False
    v_momentum: float = Field(default=0.0, ge=0.0, lt=1.0)
    patience: int = Field(default=10, ge=0)
    hidden_units: int = Field(default=128, ge=1)
    conv_channels: tuple[int, ...] = (16, 32)
    dataset_dir: str = "data"
    majority_only: bool = False

    @field_validator("conv_channels", mode="before")
    @classmethod
    def _split_channels(cls, value: Any) -> Any:
        if isinstance(value, str):
            return tuple(int(part) for part in value.split(",") if part.strip())
        return value

    @model_validator(mode="after")
    def _check_channels(self) -> "ExperimentConfig":
        if not self.conv_channels or any(c < 1 for c in self.conv_channels):
            raise ValueError("conv_channels must be a non-empty list of positive widths")
        return self


def get_log_level() -> str:
    return os.getenv(LOG_LEVEL_ENV_VAR, DEFAULT_LOG_LEVEL).upper()


def get_runs_dir() -> Path:
    return Path(os.getenv(RUNS_DIR_ENV_VAR, DEFAULT_RUNS_DIR))


def get_default_preset() -> str | None:
    value = os.getenv(PRESET_ENV_VAR)
    return value.strip() if value and value.strip() else None


def load_config_file(path: str | Path) -> dict[str, str]:
    """Read flat ``key=value`` lines; blank lines and ``#`` comments are skipped."""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ValueError(f"{path}:{lineno}: empty key")
        values[key] = value
        logger.debug("Config file entry %s=%s", key, value)
    return values


def parse_overrides(pairs: Sequence[str]) -> dict[str, str]:
    """Parse repeated ``--set key=value`` style overrides."""
    values: dict[str, str] = {}
    for pair in pairs:
        if "=" not in pair:
            raise ValueError(f"override {pair!r} is not of the form key=value")
        key, value = (part.strip() for part in pair.split("=", 1))
        values[key] = value
    return values


def resolve_experiment_config(
    preset: str | None = None,
    file_values: Mapping[str, Any] | None = None,
    flag_values: Mapping[str, Any] | None = None,
) -> ExperimentConfig:
    """Merge preset < config file < flags; ``None`` flag values are ignored."""
    merged: dict[str, Any] = {}
    if preset:
        merged.update(get_preset(preset))
        logger.debug("Using preset '%s'", preset)
    merged.update(file_values or {})
    merged.update({k: v for k, v in (flag_values or {}).items() if v is not None})
    return ExperimentConfig.model_validate(merged)
