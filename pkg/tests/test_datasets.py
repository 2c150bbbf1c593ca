"""Tests for IDX files, ColorMNIST construction and the split container."""

import gzip
import struct
from pathlib import Path

import numpy as np
import pytest

from sitar_lab.core.errors import ContainerFormatError, DatasetError, IdxFormatError
from sitar_lab.domain.colormnist import (
    GREEN_CHANNEL,
    RED_CHANNEL,
    ColorMNISTConfig,
    build_colormnist,
    build_splits,
    synth_colorshapes,
)
from sitar_lab.domain.container import (
    DATASET_MAGIC,
    group_count_rows,
    load_dataset,
    load_splits,
    save_dataset,
    save_splits,
    write_stats_csv,
)
from sitar_lab.domain.grouped import SplitKind, majority_only_split, split_train_val
from sitar_lab.domain.idx import (
    MNIST_FILES,
    RawDigits,
    load_idx,
    load_mnist_split,
    read_idx_bytes,
    write_idx,
)
from tests.conftest import make_grouped


@pytest.fixture
def digits(rng) -> RawDigits:
    """Random 'digits' with every label 0-9."""
    images = rng.integers(1, 256, size=(200, 6, 6), dtype=np.uint8)
    return RawDigits(images, np.arange(200, dtype=np.int64) % 10)


class TestIdx:
    """The MNIST file format."""

    def test_write_then_read(self, tmp_path: Path, digits):
        """Images and labels keep their bytes; images load scaled to [0, 1]."""
        images = write_idx(tmp_path / "imgs", digits.images)
        labels = write_idx(tmp_path / "labels.gz", digits.labels.astype(np.uint8))
        np.testing.assert_array_equal(read_idx_bytes(images, "images"), digits.images)
        np.testing.assert_array_equal(load_idx(labels, "labels"), digits.labels)
        scaled = load_idx(images)
        assert scaled.dtype == np.float64
        assert scaled.max() <= 1.0

    def test_mnist_directory(self, tmp_path: Path, digits):
        """load_mnist_split finds the standard file names, gzipped or not."""
        images_name, labels_name = MNIST_FILES["test"]
        write_idx(tmp_path / images_name, digits.images)
        write_idx(tmp_path / f"{labels_name}.gz", digits.labels.astype(np.uint8))
        loaded = load_mnist_split(tmp_path, "test")
        assert len(loaded) == 200
        assert len(loaded.head(10)) == 10
        with pytest.raises(FileNotFoundError):
            load_mnist_split(tmp_path, "train")

    def test_bad_magic(self, tmp_path: Path):
        """An unknown magic number is a format error."""
        path = tmp_path / "bad"
        path.write_bytes(struct.pack(">II", 0x0000_0999, 1) + b"\x00")
        with pytest.raises(IdxFormatError, match="bad magic"):
            read_idx_bytes(path)

    def test_wrong_kind(self, tmp_path: Path):
        """A label file is not accepted where images are expected."""
        path = write_idx(tmp_path / "labels", np.zeros(3, dtype=np.uint8))
        with pytest.raises(IdxFormatError, match="not an IDX images file"):
            read_idx_bytes(path, "images")

    def test_truncated_and_oversized_payloads(self, tmp_path: Path):
        """The payload must match the header dimensions exactly."""
        path = tmp_path / "imgs.gz"
        header = struct.pack(">IIII", 0x0000_0803, 2, 2, 2)
        with gzip.open(path, "wb") as fh:
            fh.write(header + b"\x00" * 7)
        with pytest.raises(IdxFormatError, match="truncated payload"):
            read_idx_bytes(path)
        path.unlink()
        with gzip.open(path, "wb") as fh:
            fh.write(header + b"\x00" * 9)
        with pytest.raises(IdxFormatError, match="dimension mismatch"):
            read_idx_bytes(path)


class TestColorMNIST:
    """Label and colour assignment."""

    def test_noise_free_protocol(self, digits):
        """With no flips, y is the digit bucket and colour follows y."""
        config = ColorMNISTConfig(p_d=0.0, p_c_in=0.0, p_c_out=1.0)
        data = build_colormnist(digits, config, SplitKind.TRAIN)
        np.testing.assert_array_equal(data.y, (digits.labels >= 5).astype(np.int64))
        np.testing.assert_array_equal(data.c, data.y)

    def test_colour_channels(self, digits):
        """c = 1 draws in red, c = 0 in green, blue stays empty."""
        data = build_colormnist(digits, ColorMNISTConfig(), SplitKind.TRAIN)
        red = data.c == 1
        np.testing.assert_array_equal(data.pixels[red, RED_CHANNEL], digits.images[red])
        np.testing.assert_array_equal(
            data.pixels[~red, GREEN_CHANNEL], digits.images[~red]
        )
        assert data.pixels[:, 2].max() == 0

    def test_exactly_one_coloured_channel(self, digits):
        """Every image lights up a single channel, and it is the one c selects."""
        config = ColorMNISTConfig(seed=4)
        for data in (
            build_colormnist(digits, config, SplitKind.TRAIN),
            synth_colorshapes(200, config, size=28),
        ):
            lit = data.pixels.reshape(len(data), 3, -1).max(axis=2) > 0
            np.testing.assert_array_equal(lit.sum(axis=1), np.ones(len(data)))
            expected = np.where(data.c == 1, RED_CHANNEL, GREEN_CHANNEL)
            np.testing.assert_array_equal(lit.argmax(axis=1), expected)

    def test_ood_split_reverses_colour(self, digits):
        """p_c_out = 1 puts every example in a minority group."""
        config = ColorMNISTConfig(p_c_out=1.0)
        data = build_colormnist(digits, config, SplitKind.TEST_OOD, source="test")
        assert np.all(data.y != data.c)
        assert data.p_c == 1.0

    def test_test_splits_share_labels(self, digits):
        """In-distribution and OOD test splits differ only in colour."""
        config = ColorMNISTConfig(seed=5)
        test_in = build_colormnist(digits, config, SplitKind.TEST_IN, source="test")
        test_ood = build_colormnist(digits, config, SplitKind.TEST_OOD, source="test")
        np.testing.assert_array_equal(test_in.y, test_ood.y)
        assert np.mean(test_in.y == test_in.c) > np.mean(test_ood.y == test_ood.c)

    def test_flip_rates(self, rng):
        """Empirical flip rates match p_d and p_c."""
        raw = RawDigits(
            rng.integers(0, 256, size=(20000, 2, 2), dtype=np.uint8),
            rng.integers(0, 10, size=20000).astype(np.int64),
        )
        data = build_colormnist(raw, ColorMNISTConfig(), SplitKind.TRAIN)
        bucket = (raw.labels >= 5).astype(np.int64)
        assert np.mean(data.y != bucket) == pytest.approx(0.25, abs=0.015)
        assert np.mean(data.c != data.y) == pytest.approx(0.1, abs=0.01)

    def test_deterministic_per_seed(self, digits):
        """The same seed rebuilds the same split."""
        a = build_colormnist(digits, ColorMNISTConfig(seed=2), SplitKind.TRAIN)
        b = build_colormnist(digits, ColorMNISTConfig(seed=2), SplitKind.TRAIN)
        np.testing.assert_array_equal(a.pixels, b.pixels)

    def test_synthetic_shapes(self):
        """Bars and blobs follow the same protocol at any size."""
        data = synth_colorshapes(64, ColorMNISTConfig(p_d=0.0, p_c_in=0.0), size=16)
        assert data.image_shape == (3, 16, 16)
        assert set(np.unique(data.y)) == {0, 1}
        np.testing.assert_array_equal(data.c, data.y)
        assert data.pixels.max() > 0

    def test_build_splits(self, tiny_splits):
        """Four splits with the validation fraction held out of train."""
        assert set(tiny_splits) == set(SplitKind)
        assert len(tiny_splits[SplitKind.TRAIN]) + len(tiny_splits[SplitKind.VAL]) == 96
        assert len(tiny_splits[SplitKind.VAL]) == 10
        assert tiny_splits[SplitKind.TEST_OOD].p_c == 0.9


class TestGroupedSplits:
    """Filtering and holding out examples."""

    def test_majority_only(self):
        """Only y == c examples are kept."""
        data = majority_only_split(make_grouped([0, 0, 1, 1], [0, 1, 0, 1]))
        np.testing.assert_array_equal(data.y, data.c)
        assert data.majority_only
        with pytest.raises(DatasetError):
            majority_only_split(make_grouped([0, 1], [1, 0]))

    def test_train_val_split_is_disjoint(self):
        """Held-out examples do not overlap the training remainder."""
        data = make_grouped(list(range(2)) * 10, [0] * 20)
        data.pixels[:, 0, 0, 0] = np.arange(20)
        train, val = split_train_val(data, 0.25, seed=1)
        seen = np.r_[train.pixels[:, 0, 0, 0], val.pixels[:, 0, 0, 0]]
        assert sorted(seen.tolist()) == list(range(20))
        assert val.split is SplitKind.VAL
        assert len(val) == 5

    def test_group_counts(self):
        """Counts cover all four (y, c) groups."""
        counts = make_grouped([0, 0, 1], [0, 1, 1]).group_counts()
        assert counts == {(0, 0): 1, (0, 1): 1, (1, 0): 0, (1, 1): 1}


class TestContainer:
    """Binary split files."""

    def test_save_and_load(self, tmp_path: Path, tiny_splits):
        """Pixels, labels and provenance survive a round trip."""
        data = tiny_splits[SplitKind.TEST_OOD]
        loaded = load_dataset(save_dataset(tmp_path / "ood.bin", data))
        np.testing.assert_array_equal(loaded.pixels, data.pixels)
        np.testing.assert_array_equal(loaded.c, data.c)
        assert loaded.split is SplitKind.TEST_OOD
        assert loaded.p_c == data.p_c
        assert loaded.source == "test"

    def test_load_splits_requires_train_and_val(self, tmp_path: Path, tiny_splits):
        """Test splits are optional, training splits are not."""
        save_splits(tmp_path, {SplitKind.TRAIN: tiny_splits[SplitKind.TRAIN]})
        with pytest.raises(FileNotFoundError, match="val"):
            load_splits(tmp_path)

    def test_load_all_splits(self, tiny_data_dir: Path):
        """Every written split is found."""
        assert set(load_splits(tiny_data_dir)) == set(SplitKind)

    def test_corrupt_container(self, tmp_path: Path, tiny_splits):
        """Bad magic, truncated bodies and unparsable headers are format errors."""
        path = save_dataset(tmp_path / "val.bin", tiny_splits[SplitKind.VAL])
        raw = path.read_bytes()
        assert raw[:8] == DATASET_MAGIC
        path.write_bytes(raw[:-1])
        with pytest.raises(ContainerFormatError, match="body"):
            load_dataset(path)
        path.write_bytes(b"XXXXXXXX" + raw[8:])
        with pytest.raises(ContainerFormatError, match="magic"):
            load_dataset(path)
        length = int.from_bytes(raw[12:16], "little")
        path.write_bytes(raw[:16] + b"{" * length + raw[16 + length :])
        with pytest.raises(ContainerFormatError, match="invalid header"):
            load_dataset(path)

    def test_stats(self, tmp_path: Path):
        """Per-split group counts and the y == c rate."""
        datasets = {"val": make_grouped([0, 0, 1, 1], [0, 1, 1, 1])}
        row = group_count_rows(datasets)[0]
        assert row["y0_c1"] == 1
        assert row["p_y_eq_c"] == pytest.approx(0.75)
        text = write_stats_csv(tmp_path / "stats.csv", datasets).read_text()
        assert text.splitlines()[0].startswith("split,n,n_y0,n_y1")
