"""
ColorMNIST and its procedural stand-in.

Protocol shared by both builders, per example i:

    ŷ_i  = shape bucket (digits 0-4 -> 0, 5-9 -> 1; bars -> 0, blobs -> 1)
    y_i  = ŷ_i flipped with probability p_d
    c_i  = y_i flipped with probability p_c (p_c_in, or p_c_out for the OOD split)
    image: grey intensity in channel 1 (green) if c_i == 0, channel 0 (red) if c_i == 1

Every random decision comes from a Philox stream keyed by (seed, source,
purpose) and indexed by example, so the in-distribution and OOD test splits
share their label noise and differ only in colour draws.
"""

from __future__ import annotations

import logging
from enum import IntEnum

import numpy as np
from numpy.typing import NDArray
from pydantic import BaseModel, ConfigDict, Field

from .grouped import GroupedDataset, SplitKind, split_train_val
from .idx import RawDigits

logger = logging.getLogger(__name__)

RED_CHANNEL = 0
GREEN_CHANNEL = 1


class ColorMNISTConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    p_d: float = Field(default=0.25, ge=0.0, le=1.0)
    p_c_in: float = Field(default=0.1, ge=0.0, le=1.0)
    p_c_out: float = Field(default=0.9, ge=0.0, le=1.0)
    seed: int = 0
    val_fraction: float = Field(default=0.1, gt=0.0, lt=1.0)


class _Purpose(IntEnum):
    LABEL = 1
    COLOR = 2
    FAMILY = 3
    GLYPH = 4


_SOURCES = {"train": 1, "test": 2}
_SPLIT_CODES = {kind: i for i, kind in enumerate(SplitKind, start=1)}


def _stream(seed: int, source: str, purpose: _Purpose, extra: int = 0) -> np.random.Generator:
    key = np.random.SeedSequence([seed, _SOURCES.get(source, 0), int(purpose), extra])
    return np.random.Generator(np.random.Philox(key))


def p_c_for(config: ColorMNISTConfig, split_kind: SplitKind) -> float:
    return config.p_c_out if split_kind is SplitKind.TEST_OOD else config.p_c_in


def _colourise(gray: NDArray[np.uint8], c: NDArray[np.int64]) -> NDArray[np.uint8]:
    n, h, w = gray.shape
    pixels = np.zeros((n, 3, h, w), dtype=np.uint8)
    channel = np.where(c == 1, RED_CHANNEL, GREEN_CHANNEL)
    pixels[np.arange(n), channel] = gray
    return pixels


def _apply_protocol(
    gray: NDArray[np.uint8],
    bucket: NDArray[np.int64],
    config: ColorMNISTConfig,
    split_kind: SplitKind,
    source: str,
) -> GroupedDataset:
    n = bucket.shape[0]
    label_flip = _stream(config.seed, source, _Purpose.LABEL).random(n) < config.p_d
    y = (bucket ^ label_flip).astype(np.int64)
    p_c = p_c_for(config, split_kind)
    colour_flip = (
        _stream(config.seed, source, _Purpose.COLOR, _SPLIT_CODES[split_kind]).random(n)
        < p_c
    )
    c = (y ^ colour_flip).astype(np.int64)
    return GroupedDataset(
        pixels=_colourise(gray, c),
        y=y,
        c=c,
        split=split_kind,
        p_d=config.p_d,
        p_c=p_c,
        seed=config.seed,
        source=source,
    )


def build_colormnist(
    raw: RawDigits,
    config: ColorMNISTConfig,
    split_kind: SplitKind,
    source: str = "train",
) -> GroupedDataset:
    """Colour MNIST digits for one split kind."""
    bucket = (raw.labels >= 5).astype(np.int64)
    data = _apply_protocol(raw.images, bucket, config, split_kind, source)
    logger.debug(
        "ColorMNIST %s: %d examples, P(y==c)=%.3f",
        split_kind.value,
        len(data),
        float(np.mean(data.y == data.c)),
    )
    return data


def _draw_glyphs(
    n: int, seed: int, source: str, family: NDArray[np.int64], size: int
) -> NDArray[np.uint8]:
    rng = _stream(seed, source, _Purpose.GLYPH)
    params = rng.random((n, 6))
    scale = size / 28.0
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    yy, xx = yy[None], xx[None]
    cy = (10.0 + 8.0 * params[:, 0])[:, None, None] * scale
    cx = (10.0 + 8.0 * params[:, 1])[:, None, None] * scale
    dy, dx = yy - cy, xx - cx

    # bars: a rotated rectangle
    theta = (np.pi * params[:, 2])[:, None, None]
    half_len = (6.0 + 4.0 * params[:, 3])[:, None, None] * scale
    half_thick = (1.0 + 1.0 * params[:, 4])[:, None, None] * scale
    along = dx * np.cos(theta) + dy * np.sin(theta)
    across = -dx * np.sin(theta) + dy * np.cos(theta)
    bars = np.clip(half_thick + 0.5 - np.abs(across), 0.0, 1.0) * np.clip(
        half_len + 0.5 - np.abs(along), 0.0, 1.0
    )

    # blobs: a filled ellipse
    ry = (3.5 + 3.5 * params[:, 3])[:, None, None] * scale
    rx = (3.5 + 3.5 * params[:, 5])[:, None, None] * scale
    radius = np.sqrt((dy / ry) ** 2 + (dx / rx) ** 2)
    blobs = np.clip((1.0 - radius) * np.minimum(rx, ry) + 0.5, 0.0, 1.0)

    intensity = np.where(family[:, None, None] == 1, blobs, bars)
    return np.round(intensity * 255.0).astype(np.uint8)


def synth_colorshapes(
    n: int,
    config: ColorMNISTConfig,
    split_kind: SplitKind = SplitKind.TRAIN,
    source: str = "train",
    size: int = 28,
) -> GroupedDataset:
    """Procedural bars (bucket 0) and blobs (bucket 1) under the ColorMNIST protocol."""
    if n < 1:
        raise ValueError(f"n must be at least 1, got {n}")
    family = (_stream(config.seed, source, _Purpose.FAMILY).random(n) < 0.5).astype(np.int64)
    gray = _draw_glyphs(n, config.seed, source, family, size)
    return _apply_protocol(gray, family, config, split_kind, source)


def build_splits(
    train_gray: RawDigits | int,
    test_gray: RawDigits | int,
    config: ColorMNISTConfig,
    size: int = 28,
) -> dict[SplitKind, GroupedDataset]:
    """train/val/test_in/test_ood from MNIST digits, or synthetic shapes when counts are given."""

    def make(raw: RawDigits | int, kind: SplitKind, source: str) -> GroupedDataset:
        if isinstance(raw, RawDigits):
            return build_colormnist(raw, config, kind, source)
        return synth_colorshapes(raw, config, kind, source, size)

    train, val = split_train_val(
        make(train_gray, SplitKind.TRAIN, "train"), config.val_fraction, config.seed
    )
    return {
        SplitKind.TRAIN: train,
        SplitKind.VAL: val,
        SplitKind.TEST_IN: make(test_gray, SplitKind.TEST_IN, "test"),
        SplitKind.TEST_OOD: make(test_gray, SplitKind.TEST_OOD, "test"),
    }
