"""Group-aware accuracy metrics."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from numpy.typing import ArrayLike

from ..core.errors import DatasetError, ShapeError
from .grouped import GROUPS, GroupedDataset

logger = logging.getLogger(__name__)


@dataclass
class GroupMetrics:
    micro: float
    per_group: dict[tuple[int, int], float]
    group_counts: dict[tuple[int, int], int]
    worst_group: float
    balanced: float
    missing_groups: list[tuple[int, int]] = field(default_factory=list)

    def as_row(self, prefix: str = "") -> dict[str, Any]:
        row: dict[str, Any] = {
            f"{prefix}micro": self.micro,
            f"{prefix}worst_group": self.worst_group,
            f"{prefix}balanced": self.balanced,
        }
        for g in GROUPS:
            row[f"{prefix}acc_y{g[0]}_c{g[1]}"] = self.per_group.get(g, float("nan"))
        return row


def group_metrics(predictions: ArrayLike, data: GroupedDataset) -> GroupMetrics:
    """Micro, per-(y, c) group, worst-group and class-balanced accuracy.

    Absent groups are left out of the worst-group minimum and listed in
    ``missing_groups``.
    """
    pred = np.asarray(predictions).reshape(-1)
    if pred.shape[0] != len(data):
        raise ShapeError("group_metrics", pred.shape, data.y.shape)
    if len(data) == 0:
        raise DatasetError("group_metrics needs at least one example")
    correct = pred == data.y

    per_group: dict[tuple[int, int], float] = {}
    counts: dict[tuple[int, int], int] = {}
    missing: list[tuple[int, int]] = []
    for g in GROUPS:
        mask = (data.y == g[0]) & (data.c == g[1])
        counts[g] = int(mask.sum())
        if counts[g] == 0:
            missing.append(g)
            continue
        per_group[g] = float(correct[mask].mean())
    if missing:
        logger.warning(
            "Split %s has no examples in groups %s", data.split.value, missing
        )

    class_acc = [float(correct[data.y == k].mean()) for k in (0, 1) if np.any(data.y == k)]
    return GroupMetrics(
        micro=float(correct.mean()),
        per_group=per_group,
        group_counts=counts,
        worst_group=min(per_group.values()),
        balanced=float(np.mean(class_acc)),
        missing_groups=missing,
    )


def write_rows_csv(path: str | Path, rows: Sequence[dict[str, Any]]) -> Path:
    """Comma-separated file with a header taken from the first row's keys."""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    if not rows:
        raise ValueError(f"no rows to write to {target}")
    with target.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(v) for k, v in row.items()})
    return target


def _fmt(value: Any) -> Any:
    if isinstance(value, float):
        return f"{value:.6f}"
    return value
