"""Named hyperparameter presets and default ablation grids."""

from __future__ import annotations

import logging
from typing import Any, Final

logger = logging.getLogger(__name__)

DEFAULT_PRESET: Final[str] = "cmnist"

# One entry per benchmark row of the hyperparameter table. Only cmnist has an
# in-repo dataset; the rest can be run on the synthetic shapes.
PRESETS: Final[dict[str, dict[str, Any]]] = {
    "cmnist": {"latent_dim": 10, "alpha": 1.0, "beta": 2.0, "lambda_cons": 10.0},
    "celeba": {"latent_dim": 10, "alpha": 0.1, "beta": 2.0, "lambda_cons": 10.0},
    "waterbirds": {"latent_dim": 32, "alpha": 0.01, "beta": 2.0, "lambda_cons": 10.0},
    "camelyon17": {"latent_dim": 10, "alpha": 0.1, "beta": 2.0, "lambda_cons": 50.0},
}

SWEEP_GRIDS: Final[dict[str, tuple[Any, ...]]] = {
    "alpha": (0.0, 0.25, 0.5, 1.0, 2.0),
    "beta": (0.1, 0.5, 1.0, 2.0, 4.0),
    "lambda": (0.0, 0.01, 0.1, 1.0, 5.0, 10.0),
    "targeting": ("anisotropic", "isotropic"),
}

# sweep axis -> ExperimentConfig field
SWEEP_FIELDS: Final[dict[str, str]] = {
    "alpha": "alpha",
    "beta": "beta",
    "lambda": "lambda_cons",
    "targeting": "isotropic",
}


def get_preset(name: str) -> dict[str, Any]:
    try:
        return dict(PRESETS[name])
    except KeyError:
        raise ValueError(
            f"unknown preset {name!r}; choose from {', '.join(sorted(PRESETS))}"
        ) from None


def get_sweep_grid(axis: str) -> tuple[Any, ...]:
    if axis not in SWEEP_GRIDS:
        raise ValueError(
            f"unknown sweep axis {axis!r}; choose from {', '.join(SWEEP_GRIDS)}"
        )
    return SWEEP_GRIDS[axis]


def parse_sweep_value(axis: str, raw: str) -> Any:
    """Convert one textual grid value for ``axis``."""
    if axis == "targeting":
        if raw not in ("anisotropic", "isotropic"):
            raise ValueError(f"targeting values are anisotropic|isotropic, got {raw!r}")
        return raw
    get_sweep_grid(axis)
    return float(raw)


def sweep_override(axis: str, value: Any) -> dict[str, Any]:
    """ExperimentConfig fields that realise one grid point."""
    get_sweep_grid(axis)
    field = SWEEP_FIELDS[axis]
    if axis == "targeting":
        return {field: value == "isotropic"}
    return {field: float(value)}
