"""
Parameter checkpoint files.

Layout (all integers little-endian):

    bytes 0..7    magic  b"SITARCKP"
    bytes 8..11   uint32 format version (currently 1)
    bytes 12..15  uint32 header length L
    next L bytes  UTF-8 JSON header: {"version", "tensors": [{"name", "shape"}], "metadata"}
    remainder     float64 values of every tensor, row-major, in header order
"""

from __future__ import annotations

import logging
import struct
from pathlib import Path
from typing import Final, Mapping

import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError

from .errors import ContainerFormatError
from .tensor import Array

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC: Final[bytes] = b"SITARCKP"
CHECKPOINT_VERSION: Final[int] = 1
_PREFIX = struct.Struct("<8sII")


class TensorEntry(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str
    shape: list[int]


class CheckpointHeader(BaseModel):
    model_config = ConfigDict(extra="forbid")

    version: int = CHECKPOINT_VERSION
    tensors: list[TensorEntry]
    metadata: dict[str, str] = {}


def save_checkpoint(
    path: str | Path,
    named_tensors: Mapping[str, Array],
    metadata: Mapping[str, str] | None = None,
) -> Path:
    """Write ``named_tensors`` to ``path`` in insertion order."""
    target = Path(path)
    header = CheckpointHeader(
        tensors=[
            TensorEntry(name=name, shape=list(np.shape(value)))
            for name, value in named_tensors.items()
        ],
        metadata=dict(metadata or {}),
    )
    header_bytes = header.model_dump_json().encode("utf-8")
    target.parent.mkdir(parents=True, exist_ok=True)
    with target.open("wb") as fh:
        fh.write(_PREFIX.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(header_bytes)))
        fh.write(header_bytes)
        for value in named_tensors.values():
            fh.write(np.ascontiguousarray(value, dtype="<f8").tobytes())
    logger.debug("Wrote checkpoint %s (%d tensors)", target, len(header.tensors))
    return target


def read_checkpoint_header(raw: bytes) -> tuple[CheckpointHeader, int]:
    """Parse the header; returns it with the byte offset of the tensor data."""
    if len(raw) < _PREFIX.size:
        raise ContainerFormatError("checkpoint truncated before header")
    magic, version, header_len = _PREFIX.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise ContainerFormatError(f"not a checkpoint file (magic {magic!r})")
    if version != CHECKPOINT_VERSION:
        raise ContainerFormatError(f"unsupported checkpoint version {version}")
    start = _PREFIX.size
    if len(raw) < start + header_len:
        raise ContainerFormatError("checkpoint truncated inside header")
    try:
        header = CheckpointHeader.model_validate_json(raw[start : start + header_len])
    except ValidationError as exc:
        raise ContainerFormatError(f"invalid checkpoint header: {exc}") from exc
    return header, start + header_len


def load_checkpoint(path: str | Path) -> tuple[dict[str, Array], dict[str, str]]:
    """Read a checkpoint; returns (tensors by name, metadata)."""
    raw = Path(path).read_bytes()
    header, offset = read_checkpoint_header(raw)
    tensors: dict[str, Array] = {}
    for entry in header.tensors:
        count = int(np.prod(entry.shape, dtype=np.int64))
        end = offset + 8 * count
        if end > len(raw):
            raise ContainerFormatError(f"checkpoint truncated in tensor {entry.name!r}")
        values = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
        tensors[entry.name] = values.astype(np.float64).reshape(entry.shape)
        offset = end
    if offset != len(raw):
        raise ContainerFormatError(f"{len(raw) - offset} trailing bytes after tensor data")
    return tensors, header.metadata
