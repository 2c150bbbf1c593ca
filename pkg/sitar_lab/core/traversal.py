"""Latent traversals, binary pixmaps and colour-channel analysis of decoded frames."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from ..domain.grouped import GroupedDataset
from .errors import ContainerFormatError, ShapeError
from .networks import SitarModel
from .shortcut_proxy import ShortcutWeights, correlation_weights
from .tensor import Array

logger = logging.getLogger(__name__)


@dataclass
class TraversalStrip:
    """Frames decoded while one latent coordinate sweeps mu_j - k .. mu_j + k."""

    dim: int
    values: Array
    frames: Array  # steps×C×H×W

    def as_image(self) -> Array:
        """Frames side by side: C×H×(steps·W)."""
        return np.concatenate(list(self.frames), axis=-1)


def traverse_latents(
    model: SitarModel, x: Array, k: float = 3.0, steps: int = 7
) -> list[TraversalStrip]:
    """One strip per latent dimension for a single image ``x`` (C×H×W)."""
    if steps < 1:
        raise ValueError(f"steps must be positive, got {steps}")
    image = np.asarray(x, dtype=np.float64)
    if image.ndim == 3:
        image = image[None]
    if image.shape[0] != 1:
        raise ShapeError("traverse_latents", image.shape, detail="expects one image")
    mu, _ = model.encode(image)
    base = mu.data[0]
    offsets = np.linspace(-k, k, steps)
    strips: list[TraversalStrip] = []
    for j in range(model.latent_dim):
        codes = np.repeat(base[None], steps, axis=0)
        codes[:, j] = base[j] + offsets
        frames = model.decode(codes).data
        strips.append(TraversalStrip(dim=j, values=codes[:, j].copy(), frames=frames))
    return strips


def to_bytes_image(image: Array) -> NDArray[np.uint8]:
    """C×H×W values in [0, 1] -> H×W×3 bytes (clipped, rounded)."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise ShapeError("to_bytes_image", image.shape, detail="expects 3×H×W")
    clipped = np.clip(image, 0.0, 1.0)
    return np.round(clipped * 255.0).astype(np.uint8).transpose(1, 2, 0)


def write_pixmap(path: str | Path, image: Array) -> Path:
    """Binary P6 pixmap, max value 255."""
    target = Path(path)
    pixels = to_bytes_image(image) if image.dtype != np.uint8 else image
    height, width, _ = pixels.shape
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_bytes(
        f"P6\n{width} {height}\n255\n".encode("ascii") + np.ascontiguousarray(pixels).tobytes()
    )
    return target


def read_pixmap(path: str | Path) -> NDArray[np.uint8]:
    """Read a P6 pixmap written by ``write_pixmap``; returns H×W×3 bytes."""
    raw = Path(path).read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            newline = raw.find(b"\n", pos)
            if newline < 0:
                raise ContainerFormatError(f"{path}: unterminated pixmap header comment")
            pos = newline + 1
            continue
        end = pos
        while end < len(raw) and not raw[end : end + 1].isspace():
            end += 1
        if end == pos:
            raise ContainerFormatError(f"{path}: truncated pixmap header")
        fields.append(raw[pos:end])
        pos = end
    if fields[0] != b"P6" or fields[3] != b"255":
        raise ContainerFormatError(f"{path}: not an 8-bit P6 pixmap")
    try:
        width, height = int(fields[1]), int(fields[2])
    except ValueError:
        raise ContainerFormatError(
            f"{path}: bad pixmap size {fields[1]!r} x {fields[2]!r}"
        ) from None
    body = raw[pos + 1 :]
    if width < 1 or height < 1 or len(body) != width * height * 3:
        raise ContainerFormatError(f"{path}: pixel data does not match {width}x{height}")
    return np.frombuffer(body, dtype=np.uint8).reshape(height, width, 3).copy()


def channel_energy(frames: Array) -> tuple[NDArray[np.int64], Array]:
    """Dominant colour channel per frame by summed squared positive intensity."""
    data = np.asarray(frames, dtype=np.float64)
    if data.ndim == 3:
        data = data[None]
    energy = (np.clip(data, 0.0, None) ** 2).sum(axis=(2, 3))
    return np.argmax(energy, axis=1).astype(np.int64), energy


def split_weights(model: SitarModel, data: GroupedDataset, batch: int = 256) -> ShortcutWeights:
    """Shortcut scores from the posterior means of a whole split."""
    means = []
    for start in range(0, len(data), batch):
        index = np.arange(start, min(start + batch, len(data)))
        mu, _ = model.encode(data.batch_images(index))
        means.append(mu.data)
    return correlation_weights(np.concatenate(means), data.y)


@dataclass
class ColorProbe:
    dim: int
    probes: int
    color_flip_rate: float
    prediction_stable_rate: float


def probe_color_dimension(
    model: SitarModel, images: Array, dim: int, k: float = 3.0, steps: int = 7
) -> ColorProbe:
    """How often sweeping ``dim`` swaps the dominant red/green channel, and how
    often the classifier's label stays fixed along the sweep."""
    flips = stable = 0
    offsets = np.linspace(-k, k, steps)
    for image in images:
        mu, _ = model.encode(image[None])
        codes = np.repeat(mu.data, steps, axis=0)
        codes[:, dim] += offsets
        dominant, _ = channel_energy(model.decode(codes).data[:, :2])
        flips += int(dominant[0] != dominant[-1])
        labels = np.argmax(model.classify(codes).data, axis=1)
        stable += int(np.all(labels == labels[0]))
    n = max(len(images), 1)
    return ColorProbe(
        dim=dim,
        probes=len(images),
        color_flip_rate=flips / n,
        prediction_stable_rate=stable / n,
    )
