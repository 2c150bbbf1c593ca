"""
Grouped datasets with a controllable shortcut.

IDX digit files, ColorMNIST and synthetic colour-shape construction, the
binary split container and (y, c) group metrics.
"""

from .colormnist import ColorMNISTConfig, build_colormnist, build_splits, synth_colorshapes
from .container import load_dataset, load_splits, save_dataset, save_splits
from .grouped import GROUPS, GroupedDataset, SplitKind, majority_only_split
from .idx import RawDigits, load_idx, load_mnist_split, write_idx
from .metrics import GroupMetrics, group_metrics

__all__ = [
    "ColorMNISTConfig",
    "build_colormnist",
    "build_splits",
    "synth_colorshapes",
    "load_dataset",
    "load_splits",
    "save_dataset",
    "save_splits",
    "GROUPS",
    "GroupedDataset",
    "SplitKind",
    "majority_only_split",
    "RawDigits",
    "load_idx",
    "load_mnist_split",
    "write_idx",
    "GroupMetrics",
    "group_metrics",
]
