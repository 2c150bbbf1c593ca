"""Pytest fixtures for sitar-lab tests."""

from pathlib import Path

import numpy as np
import pytest

from sitar_lab.config.settings import ExperimentConfig
from sitar_lab.core.networks import SitarModel, build_model
from sitar_lab.domain.colormnist import ColorMNISTConfig, build_splits
from sitar_lab.domain.container import save_splits
from sitar_lab.domain.grouped import GroupedDataset, SplitKind

TINY_IMAGE = 8


@pytest.fixture
def rng() -> np.random.Generator:
    """Seeded generator for test inputs."""
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config() -> ExperimentConfig:
    """Small enough to train for a couple of epochs in well under a second."""
    return ExperimentConfig(
        latent_dim=3,
        conv_channels=(4, 8),
        hidden_units=8,
        epochs=2,
        batch_size=16,
        learning_rate=1e-3,
        patience=0,
        seed=7,
    )


@pytest.fixture
def tiny_model(tiny_config: ExperimentConfig) -> SitarModel:
    """Randomly initialised model on 3×8×8 images."""
    return build_model(
        np.random.default_rng(0),
        image_shape=(3, TINY_IMAGE, TINY_IMAGE),
        latent_dim=tiny_config.latent_dim,
        conv_channels=tiny_config.conv_channels,
        hidden_units=tiny_config.hidden_units,
    )


@pytest.fixture
def tiny_splits() -> dict[SplitKind, GroupedDataset]:
    """Synthetic colour-shape splits on 8×8 images."""
    return build_splits(96, 32, ColorMNISTConfig(seed=3), size=TINY_IMAGE)


@pytest.fixture
def tiny_data_dir(tmp_path: Path, tiny_splits: dict[SplitKind, GroupedDataset]) -> Path:
    """The tiny splits written as containers."""
    directory = tmp_path / "data"
    save_splits(directory, tiny_splits)
    return directory


def make_grouped(
    y: list[int], c: list[int], split: SplitKind = SplitKind.VAL, size: int = 4
) -> GroupedDataset:
    """Blank images carrying the given labels."""
    n = len(y)
    return GroupedDataset(
        pixels=np.zeros((n, 3, size, size), dtype=np.uint8),
        y=np.asarray(y, dtype=np.int64),
        c=np.asarray(c, dtype=np.int64),
        split=split,
    )
