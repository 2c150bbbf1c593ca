"""Experiment configuration: environment settings, presets and sweep grids."""

from .presets import (
    DEFAULT_PRESET,
    PRESETS,
    SWEEP_GRIDS,
    get_preset,
    get_sweep_grid,
    parse_sweep_value,
    sweep_override,
)
from .settings import (
    LOG_LEVEL_ENV_VAR,
    PRESET_ENV_VAR,
    RUNS_DIR_ENV_VAR,
    ExperimentConfig,
    get_default_preset,
    get_log_level,
    get_runs_dir,
    load_config_file,
    parse_overrides,
    resolve_experiment_config,
)

__all__ = [
    "DEFAULT_PRESET",
    "PRESETS",
    "SWEEP_GRIDS",
    "get_preset",
    "get_sweep_grid",
    "parse_sweep_value",
    "sweep_override",
    "LOG_LEVEL_ENV_VAR",
    "PRESET_ENV_VAR",
    "RUNS_DIR_ENV_VAR",
    "ExperimentConfig",
    "get_default_preset",
    "get_log_level",
    "get_runs_dir",
    "load_config_file",
    "parse_overrides",
    "resolve_experiment_config",
]
