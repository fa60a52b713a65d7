"""
数据模块测试
"""

import os
import tempfile

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from src.data import (
    LabeledDataset,
    Partition,
    SplitSpec,
    generate_gaussian_blobs,
    load_csv,
    split,
    train_test_split,
)
from src.errors import CsvParseError, DatasetError, LabelError, SplitError


@pytest.fixture
def temp_dir():
    with tempfile.TemporaryDirectory() as tmpdir:
        yield tmpdir


def _write(directory: str, name: str, text: str) -> str:
    path = os.path.join(directory, name)
    with open(path, "w", encoding="utf-8") as f:
        f.write(text)
    return path


def _dataset(labels, classes=3) -> LabeledDataset:
    labels = np.asarray(labels)
    return LabeledDataset(features=np.zeros((len(labels), 2)), labels=labels, num_classes=classes)


class TestBlobs:
    """合成高斯团"""

    def test_shapes_and_balance(self):
        data = generate_gaussian_blobs(classes=4, per_class=10, dim=6, spread=0.2, seed=0, test_per_class=3)
        assert data.train.features.shape == (40, 6)
        assert data.test.size == 12
        assert np.bincount(data.train.labels).tolist() == [10, 10, 10, 10]

    def test_deterministic(self):
        first = generate_gaussian_blobs(classes=3, per_class=5, dim=3, spread=0.3, seed=11)
        second = generate_gaussian_blobs(classes=3, per_class=5, dim=3, spread=0.3, seed=11)
        np.testing.assert_array_equal(first.train.features, second.train.features)
        np.testing.assert_array_equal(first.test.labels, second.test.labels)

    def test_zero_spread_sits_on_axis_means(self):
        """spread=0 时每个样本恰好是其类别的单位向量"""
        data = generate_gaussian_blobs(classes=3, per_class=4, dim=5, spread=0.0, seed=0)
        np.testing.assert_array_equal(data.train.features, np.eye(5)[data.train.labels])

    def test_nearest_centroid_separable(self):
        """K=5、spread=0.3 时按训练集类中心分类，测试集准确率高于 95%"""
        data = generate_gaussian_blobs(classes=5, per_class=200, dim=5, spread=0.3, seed=0, test_per_class=2000)
        centroids = np.stack([data.train.features[data.train.labels == k].mean(axis=0) for k in range(5)])
        distances = np.linalg.norm(data.test.features[:, None, :] - centroids[None, :, :], axis=2)
        accuracy = np.mean(np.argmin(distances, axis=1) == data.test.labels)
        assert accuracy > 0.95

    def test_class_means_equidistant(self):
        data = generate_gaussian_blobs(classes=4, per_class=1, dim=6, spread=0.0, seed=0)
        means = data.train.features[np.argsort(data.train.labels)]
        np.testing.assert_array_equal(means, np.eye(6)[:4])
        gaps = np.linalg.norm(means[:, None, :] - means[None, :, :], axis=2)
        np.testing.assert_allclose(gaps[~np.eye(4, dtype=bool)], np.sqrt(2.0))

    def test_default_test_size(self):
        data = generate_gaussian_blobs(classes=2, per_class=9, dim=2, spread=0.1, seed=0)
        assert data.test.size == 2 * (9 // 4)

    @pytest.mark.parametrize("kwargs", [
        dict(classes=1, per_class=5, dim=3, spread=0.1),
        dict(classes=3, per_class=0, dim=3, spread=0.1),
        dict(classes=4, per_class=5, dim=3, spread=0.1),
        dict(classes=3, per_class=5, dim=3, spread=-1.0),
    ])
    def test_invalid_arguments(self, kwargs):
        with pytest.raises(DatasetError):
            generate_gaussian_blobs(seed=0, **kwargs)


class TestLabeledDataset:
    """数据集校验"""

    def test_label_range(self):
        with pytest.raises(LabelError):
            _dataset([0, 3], classes=3)

    def test_empty_rejected(self):
        with pytest.raises(DatasetError):
            LabeledDataset(features=np.zeros((0, 2)), labels=np.zeros(0), num_classes=2)

    def test_subset_and_with_labels(self):
        dataset = _dataset([0, 1, 2, 1])
        assert dataset.subset(np.array([1, 3])).labels.tolist() == [1, 1]
        relabeled = dataset.with_labels(np.array([2, 2, 2, 2]))
        assert relabeled.labels.tolist() == [2, 2, 2, 2]
        assert dataset.labels.tolist() == [0, 1, 2, 1]


class TestLoadCsv:
    """CSV 读取"""

    def test_basic_with_label_remap(self, temp_dir):
        """原始标签 3/7 被重排为 0/1"""
        path = _write(temp_dir, "data.csv", "1.0,2.0,7\n\n0.5,-1,3\n3,4,7\n")
        dataset = load_csv(path)
        assert dataset.features.shape == (3, 2)
        assert dataset.labels.tolist() == [1, 0, 1]
        assert dataset.label_mapping == {3: 0, 7: 1}
        assert dataset.num_classes == 2

    def test_header_skipped(self, temp_dir):
        path = _write(temp_dir, "data.csv", "a,b,label\n1,2,0\n3,4,1\n")
        assert load_csv(path, header=True).size == 2

    def test_header_without_flag_fails_on_line_one(self, temp_dir):
        path = _write(temp_dir, "data.csv", "a,b,label\n1,2,0\n")
        with pytest.raises(CsvParseError) as info:
            load_csv(path)
        assert info.value.line_number == 1

    def test_ragged_row_reports_line(self, temp_dir):
        path = _write(temp_dir, "data.csv", "1,2,0\n3,4,1\n5,1\n")
        with pytest.raises(CsvParseError) as info:
            load_csv(path)
        assert info.value.line_number == 3

    def test_non_integer_label(self, temp_dir):
        path = _write(temp_dir, "data.csv", "1,2,0.5\n")
        with pytest.raises(CsvParseError):
            load_csv(path)

    def test_non_finite_feature(self, temp_dir):
        path = _write(temp_dir, "data.csv", "nan,2,0\n")
        with pytest.raises(CsvParseError):
            load_csv(path)

    def test_invalid_utf8_reports_line(self, temp_dir):
        path = os.path.join(temp_dir, "data.csv")
        with open(path, "wb") as f:
            f.write(b"0,0,0\n1,\xff1,1\n")
        with pytest.raises(CsvParseError) as info:
            load_csv(path)
        assert info.value.line_number == 2
        assert "UTF-8" in str(info.value)

    def test_empty_file(self, temp_dir):
        path = _write(temp_dir, "data.csv", "\n\n")
        with pytest.raises(DatasetError):
            load_csv(path)


class TestSplit:
    """遗忘/保留划分"""

    def test_random_fraction(self):
        dataset = _dataset([0, 1, 2] * 10)
        partition = split(dataset, SplitSpec(mode="random", fraction=0.1, seed=3))
        assert len(partition.forget_idx) == 3
        assert len(partition.retain_idx) == 27
        assert np.all(np.diff(partition.forget_idx) > 0)

    def test_random_is_seeded(self):
        dataset = _dataset([0, 1, 2] * 10)
        spec = SplitSpec(mode="random", fraction=0.3, seed=9)
        np.testing.assert_array_equal(split(dataset, spec).forget_idx, split(dataset, spec).forget_idx)

    def test_classwise(self):
        dataset = _dataset([0, 1, 2, 1, 0])
        partition = split(dataset, SplitSpec(mode="classwise", forget_class=1))
        assert partition.forget_idx.tolist() == [1, 3]
        assert partition.retain_idx.tolist() == [0, 2, 4]
        assert partition.forget_mask().tolist() == [False, True, False, True, False]

    def test_fraction_too_small(self):
        with pytest.raises(SplitError):
            split(_dataset([0, 1, 2]), SplitSpec(mode="random", fraction=0.1))

    def test_class_out_of_range(self):
        with pytest.raises(SplitError):
            split(_dataset([0, 1, 2]), SplitSpec(mode="classwise", forget_class=5))

    def test_class_without_samples(self):
        with pytest.raises(SplitError):
            split(_dataset([0, 0, 2]), SplitSpec(mode="classwise", forget_class=1))

    def test_spec_requires_mode_parameter(self):
        with pytest.raises(ValueError):
            SplitSpec(mode="random")
        with pytest.raises(ValueError):
            SplitSpec(mode="classwise")

    def test_overlapping_partition_rejected(self):
        with pytest.raises(SplitError):
            Partition(forget_idx=np.array([0, 1]), retain_idx=np.array([1, 2]))

    @settings(max_examples=100, deadline=None)
    @given(
        n=st.integers(min_value=2, max_value=200),
        fraction=st.floats(min_value=0.01, max_value=0.99),
        seed=st.integers(min_value=0, max_value=2 ** 32),
    )
    def test_random_partition_covers_all(self, n, fraction, seed):
        """划分互不相交、并集为 {0..N-1}，遗忘集大小为 ⌊f·N⌋"""
        dataset = _dataset(np.arange(n) % 3)
        count = int(np.floor(fraction * n))
        if count < 1:
            with pytest.raises(SplitError):
                split(dataset, SplitSpec(mode="random", fraction=fraction, seed=seed))
            return
        partition = split(dataset, SplitSpec(mode="random", fraction=fraction, seed=seed))
        assert len(partition.forget_idx) == count
        assert np.intersect1d(partition.forget_idx, partition.retain_idx).size == 0
        np.testing.assert_array_equal(
            np.union1d(partition.forget_idx, partition.retain_idx), np.arange(n)
        )


class TestTrainTestSplit:
    """CSV 数据的留出测试集"""

    def test_sizes(self):
        data = train_test_split(_dataset(np.arange(20) % 3), test_fraction=0.25, seed=0)
        assert data.test.size == 5 and data.train.size == 15

    def test_invalid_fraction(self):
        with pytest.raises(SplitError):
            train_test_split(_dataset([0, 1, 2]), test_fraction=1.0, seed=0)

    def test_too_small(self):
        with pytest.raises(SplitError):
            train_test_split(_dataset([0, 1]), test_fraction=0.2, seed=0)
