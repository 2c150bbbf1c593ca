"""
Self-describing binary dataset files.

Layout (integers little-endian):

    bytes 0..7    magic b"SITARDAT"
    bytes 8..11   uint32 format version (1)
    bytes 12..15  uint32 header length L
    next L bytes  UTF-8 JSON header (``DatasetHeader``)
    N*C*H*W bytes pixels, uint8, N×C×H×W row-major
    N bytes       target labels y
    N bytes       shortcut labels c
"""

from __future__ import annotations

import logging
import struct
from pathlib import Path
from typing import Any, Final, Mapping

import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError

from ..core.errors import ContainerFormatError
from .grouped import GroupedDataset, SplitKind
from .metrics import write_rows_csv

logger = logging.getLogger(__name__)

DATASET_MAGIC: Final[bytes] = b"SITARDAT"
DATASET_VERSION: Final[int] = 1
_PREFIX = struct.Struct("<8sII")


class DatasetHeader(BaseModel):
    model_config = ConfigDict(extra="forbid")

    split: SplitKind
    count: int
    channels: int
    height: int
    width: int
    p_d: float
    p_c: float
    seed: int
    source: str
    majority_only: bool = False


def dataset_path(directory: str | Path, split: SplitKind) -> Path:
    return Path(directory) / f"{split.value}.bin"


def save_dataset(path: str | Path, data: GroupedDataset) -> Path:
    target = Path(path)
    channels, height, width = data.image_shape
    header = DatasetHeader(
        split=data.split,
        count=len(data),
        channels=channels,
        height=height,
        width=width,
        p_d=data.p_d,
        p_c=data.p_c,
        seed=data.seed,
        source=data.source,
        majority_only=data.majority_only,
    )
    header_bytes = header.model_dump_json().encode("utf-8")
    target.parent.mkdir(parents=True, exist_ok=True)
    with target.open("wb") as fh:
        fh.write(_PREFIX.pack(DATASET_MAGIC, DATASET_VERSION, len(header_bytes)))
        fh.write(header_bytes)
        fh.write(np.ascontiguousarray(data.pixels, dtype=np.uint8).tobytes())
        fh.write(data.y.astype(np.uint8).tobytes())
        fh.write(data.c.astype(np.uint8).tobytes())
    logger.info("Wrote %s split (%d examples) to %s", data.split.value, len(data), target)
    return target


def load_dataset(path: str | Path) -> GroupedDataset:
    source = Path(path)
    if not source.exists():
        raise FileNotFoundError(f"dataset file {source} does not exist")
    raw = source.read_bytes()
    if len(raw) < _PREFIX.size:
        raise ContainerFormatError(f"{source}: truncated before header")
    magic, version, header_len = _PREFIX.unpack_from(raw)
    if magic != DATASET_MAGIC:
        raise ContainerFormatError(f"{source}: not a dataset container (magic {magic!r})")
    if version != DATASET_VERSION:
        raise ContainerFormatError(f"{source}: unsupported container version {version}")
    start = _PREFIX.size
    try:
        header = DatasetHeader.model_validate_json(raw[start : start + header_len])
    except ValidationError as exc:
        raise ContainerFormatError(f"{source}: invalid header: {exc}") from exc

    n = header.count
    n_pix = n * header.channels * header.height * header.width
    body = raw[start + header_len :]
    if len(body) != n_pix + 2 * n:
        raise ContainerFormatError(
            f"{source}: body has {len(body)} bytes, header implies {n_pix + 2 * n}"
        )
    pixels = np.frombuffer(body, dtype=np.uint8, count=n_pix).reshape(
        n, header.channels, header.height, header.width
    )
    y = np.frombuffer(body, dtype=np.uint8, count=n, offset=n_pix).astype(np.int64)
    c = np.frombuffer(body, dtype=np.uint8, count=n, offset=n_pix + n).astype(np.int64)
    return GroupedDataset(
        pixels=pixels.copy(),
        y=y,
        c=c,
        split=header.split,
        p_d=header.p_d,
        p_c=header.p_c,
        seed=header.seed,
        source=header.source,
        majority_only=header.majority_only,
    )


def group_count_rows(datasets: Mapping[str, GroupedDataset]) -> list[dict[str, Any]]:
    """One row per split: class counts, (y, c) group counts and P(y == c)."""
    rows: list[dict[str, Any]] = []
    for name, data in datasets.items():
        counts = data.group_counts()
        row: dict[str, Any] = {
            "split": name,
            "n": len(data),
            "n_y0": int(np.sum(data.y == 0)),
            "n_y1": int(np.sum(data.y == 1)),
        }
        for (gy, gc), count in counts.items():
            row[f"y{gy}_c{gc}"] = count
        row["p_y_eq_c"] = float(np.mean(data.y == data.c)) if len(data) else float("nan")
        rows.append(row)
    return rows


def write_stats_csv(path: str | Path, datasets: Mapping[str, GroupedDataset]) -> Path:
    return write_rows_csv(path, group_count_rows(datasets))


def save_splits(
    directory: str | Path, splits: Mapping[SplitKind, GroupedDataset]
) -> dict[str, Path]:
    return {
        kind.value: save_dataset(dataset_path(directory, kind), data)
        for kind, data in splits.items()
    }


def load_splits(directory: str | Path) -> dict[SplitKind, GroupedDataset]:
    """Every split container found in ``directory``; train and val are required."""
    root = Path(directory)
    splits: dict[SplitKind, GroupedDataset] = {}
    for kind in SplitKind:
        path = dataset_path(root, kind)
        if path.exists():
            splits[kind] = load_dataset(path)
        elif kind in (SplitKind.TRAIN, SplitKind.VAL):
            raise FileNotFoundError(f"missing {kind.value} split {path}")
    return splits
