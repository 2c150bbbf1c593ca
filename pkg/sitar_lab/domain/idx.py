"""Reader and writer for the IDX files MNIST is distributed in."""

from __future__ import annotations

import gzip
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Final, Literal

import numpy as np
from numpy.typing import NDArray

from ..core.errors import IdxFormatError

logger = logging.getLogger(__name__)

IMAGES_MAGIC: Final[int] = 0x00000803
LABELS_MAGIC: Final[int] = 0x00000801

IdxKind = Literal["images", "labels"]

_MAGIC_BY_KIND: Final[dict[str, int]] = {"images": IMAGES_MAGIC, "labels": LABELS_MAGIC}

MNIST_FILES: Final[dict[str, tuple[str, str]]] = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _read_bytes(path: Path) -> bytes:
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as fh:
            return fh.read()
    return path.read_bytes()


def read_idx_bytes(path: str | Path, kind: IdxKind | None = None) -> NDArray[np.uint8]:
    """Raw unsigned-byte payload of an IDX file, shaped by its header."""
    source = Path(path)
    raw = _read_bytes(source)
    if len(raw) < 4:
        raise IdxFormatError(f"{source}: truncated before magic number")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic not in (IMAGES_MAGIC, LABELS_MAGIC):
        raise IdxFormatError(f"{source}: bad magic 0x{magic:08x}")
    if kind is not None and magic != _MAGIC_BY_KIND[kind]:
        raise IdxFormatError(
            f"{source}: magic 0x{magic:08x} is not an IDX {kind} file "
            f"(expected 0x{_MAGIC_BY_KIND[kind]:08x})"
        )
    ndim = magic & 0xFF
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise IdxFormatError(f"{source}: truncated inside dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:header_end])
    expected = int(np.prod(dims, dtype=np.int64))
    payload = len(raw) - header_end
    if payload < expected:
        raise IdxFormatError(
            f"{source}: truncated payload ({payload} bytes, header promises {expected})"
        )
    if payload > expected:
        raise IdxFormatError(
            f"{source}: dimension mismatch ({payload} bytes, header promises {expected})"
        )
    return np.frombuffer(raw, dtype=np.uint8, offset=header_end).reshape(dims).copy()


def load_idx(path: str | Path, kind: IdxKind | None = None) -> NDArray[np.generic]:
    """Images as float64 in [0, 1] (byte / 255); labels as int64."""
    data = read_idx_bytes(path, kind)
    if data.ndim == 1:
        return data.astype(np.int64)
    return data.astype(np.float64) / 255.0


def write_idx(path: str | Path, data: NDArray[np.uint8]) -> Path:
    """Write a rank-1 (labels) or rank-3 (images) unsigned-byte array."""
    array = np.asarray(data, dtype=np.uint8)
    if array.ndim == 1:
        magic = LABELS_MAGIC
    elif array.ndim == 3:
        magic = IMAGES_MAGIC
    else:
        raise IdxFormatError(f"cannot write rank-{array.ndim} array as MNIST IDX")
    target = Path(path)
    header = struct.pack(f">I{array.ndim}I", magic, *array.shape)
    payload = header + array.tobytes()
    if target.suffix == ".gz":
        with gzip.open(target, "wb") as fh:
            fh.write(payload)
    else:
        target.write_bytes(payload)
    return target


@dataclass
class RawDigits:
    """MNIST digits as stored on disk: uint8 images N×H×W and labels 0-9."""

    images: NDArray[np.uint8]
    labels: NDArray[np.int64]

    def __post_init__(self) -> None:
        if self.images.shape[0] != self.labels.shape[0]:
            raise IdxFormatError(
                f"{self.images.shape[0]} images but {self.labels.shape[0]} labels"
            )

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def head(self, n: int) -> "RawDigits":
        return RawDigits(self.images[:n], self.labels[:n])


def _find(directory: Path, stem: str) -> Path:
    for candidate in (directory / stem, directory / f"{stem}.gz"):
        if candidate.exists():
            return candidate
    raise FileNotFoundError(f"{stem}(.gz) not found in {directory}")


def load_mnist_split(directory: str | Path, split: Literal["train", "test"]) -> RawDigits:
    images_name, labels_name = MNIST_FILES[split]
    root = Path(directory)
    images = read_idx_bytes(_find(root, images_name), "images")
    labels = read_idx_bytes(_find(root, labels_name), "labels").astype(np.int64)
    logger.info("Loaded %d MNIST %s digits from %s", labels.shape[0], split, root)
    return RawDigits(images, labels)
