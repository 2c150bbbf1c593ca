"""Datasets with target labels, shortcut labels and their (y, c) groups."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np
from numpy.typing import NDArray

from ..core.errors import DatasetError, ShapeError

logger = logging.getLogger(__name__)

GROUPS: tuple[tuple[int, int], ...] = ((0, 0), (0, 1), (1, 0), (1, 1))


class SplitKind(str, Enum):
    TRAIN = "train"
    VAL = "val"
    TEST_IN = "test_in"
    TEST_OOD = "test_ood"


@dataclass
class GroupedDataset:
    """Coloured images with target ``y``, shortcut ``c`` and provenance.

    Pixels are kept as bytes (N×C×H×W); ``images`` and ``batch_images`` give
    float64 values in [0, 1].
    """

    pixels: NDArray[np.uint8]
    y: NDArray[np.int64]
    c: NDArray[np.int64]
    split: SplitKind
    p_d: float = 0.0
    p_c: float = 0.0
    seed: int = 0
    source: str = "unknown"
    majority_only: bool = False

    def __post_init__(self) -> None:
        n = self.pixels.shape[0]
        if self.pixels.ndim != 4 or self.y.shape != (n,) or self.c.shape != (n,):
            raise ShapeError("GroupedDataset", self.pixels.shape, self.y.shape, self.c.shape)

    def __len__(self) -> int:
        return int(self.y.shape[0])

    @property
    def image_shape(self) -> tuple[int, int, int]:
        _, ch, h, w = self.pixels.shape
        return (int(ch), int(h), int(w))

    @property
    def images(self) -> NDArray[np.float64]:
        return self.pixels.astype(np.float64) / 255.0

    def batch_images(self, index: NDArray[np.int64]) -> NDArray[np.float64]:
        return self.pixels[index].astype(np.float64) / 255.0

    @property
    def group(self) -> NDArray[np.int64]:
        """(y, c) pair per example, shape N×2."""
        return np.stack([self.y, self.c], axis=1)

    def group_counts(self) -> dict[tuple[int, int], int]:
        return {
            g: int(np.sum((self.y == g[0]) & (self.c == g[1]))) for g in GROUPS
        }

    def subset(self, index: NDArray[np.int64], split: SplitKind | None = None) -> "GroupedDataset":
        return replace(
            self,
            pixels=self.pixels[index],
            y=self.y[index],
            c=self.c[index],
            split=split or self.split,
        )


def majority_only_split(data: GroupedDataset) -> GroupedDataset:
    """Keep only the correlated groups (y == c)."""
    keep = np.flatnonzero(data.y == data.c)
    if keep.size == 0:
        raise DatasetError(f"majority-only filter left no examples in split {data.split.value}")
    logger.debug("Majority-only filter kept %d of %d examples", keep.size, len(data))
    return replace(data.subset(keep), majority_only=True)


def split_train_val(
    data: GroupedDataset, fraction: float = 0.1, seed: int = 0
) -> tuple[GroupedDataset, GroupedDataset]:
    """Hold out a random ``fraction`` of ``data`` as the validation split."""
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"validation fraction must lie in (0, 1), got {fraction}")
    n = len(data)
    n_val = int(round(n * fraction))
    if n_val < 1 or n_val >= n:
        raise DatasetError(f"cannot hold out {fraction:.0%} of {n} examples")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0x5A1])))
    order = rng.permutation(n)
    val_idx = np.sort(order[:n_val])
    train_idx = np.sort(order[n_val:])
    return data.subset(train_idx, SplitKind.TRAIN), data.subset(val_idx, SplitKind.VAL)
