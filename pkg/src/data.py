"""
数据模块

高斯团合成数据集、CSV 读取，以及两种遗忘场景（随机比例 / 按类别）的遗忘-保留划分。
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.errors import CsvParseError, DatasetError, LabelError, SplitError
from src.tensor import Tensor, check_finite

logger = logging.getLogger(__name__)

U64_MAX = 2 ** 64


@dataclass
class LabeledDataset:
    """样本矩阵 + 整数标签"""
    features: Tensor
    labels: np.ndarray
    num_classes: int
    label_mapping: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise DatasetError(f"特征必须是二维矩阵: {self.features.shape}")
        if len(self.labels) < 1:
            raise DatasetError("数据集至少需要一个样本")
        if self.labels.shape != (self.features.shape[0],):
            raise DatasetError(f"标签数 {self.labels.shape} 与样本数 {self.features.shape[0]} 不符")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise LabelError(f"标签必须在 [0, {self.num_classes}) 内")
        check_finite(self.features, "特征")

    @property
    def size(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices: np.ndarray) -> "LabeledDataset":
        """按下标取子集（类别数与映射保持不变）"""
        return LabeledDataset(
            features=self.features[indices],
            labels=self.labels[indices],
            num_classes=self.num_classes,
            label_mapping=dict(self.label_mapping),
        )

    def with_labels(self, labels: np.ndarray) -> "LabeledDataset":
        """替换标签，特征共享"""
        return LabeledDataset(
            features=self.features,
            labels=labels,
            num_classes=self.num_classes,
            label_mapping=dict(self.label_mapping),
        )


@dataclass
class BlobData:
    """合成数据：训练集与同分布的留出测试集"""
    train: LabeledDataset
    test: LabeledDataset


def generate_gaussian_blobs(
    classes: int,
    per_class: int,
    dim: int,
    spread: float,
    seed: int,
    test_per_class: Optional[int] = None,
) -> BlobData:
    """
    生成 K 个各向同性高斯团

    第 k 类的均值为第 k 个坐标轴上的单位向量（单纯形式排列，任意两类均值距离 √2），
    其余维度均值为 0。样本先按类生成再用同一随机源打乱。

    Args:
        classes: 类别数 K ≥ 2
        per_class: 每类训练样本数 ≥ 1
        dim: 特征维度，必须 ≥ K
        spread: 标准差 ≥ 0
        seed: 随机种子
        test_per_class: 每类测试样本数，缺省为 max(1, per_class // 4)

    Returns:
        BlobData
    """
    if classes < 2:
        raise DatasetError(f"类别数至少为 2: {classes}")
    if per_class < 1:
        raise DatasetError(f"每类样本数至少为 1: {per_class}")
    if dim < classes:
        raise DatasetError(f"特征维度 {dim} 不能小于类别数 {classes}")
    if spread < 0:
        raise DatasetError(f"spread 不能为负: {spread}")
    if test_per_class is None:
        test_per_class = max(1, per_class // 4)

    rng = np.random.default_rng(seed)
    means = np.zeros((classes, dim))
    means[np.arange(classes), np.arange(classes)] = 1.0

    def _draw(count: int) -> LabeledDataset:
        labels = np.repeat(np.arange(classes), count)
        features = means[labels] + spread * rng.standard_normal((len(labels), dim))
        order = rng.permutation(len(labels))
        return LabeledDataset(features=features[order], labels=labels[order], num_classes=classes)

    train = _draw(per_class)
    test = _draw(test_per_class)
    logger.info(f"生成高斯团: K={classes}, 训练 {train.size}, 测试 {test.size}, d={dim}, spread={spread}")
    return BlobData(train=train, test=test)


def load_csv(path: Union[str, Path], header: bool = False) -> LabeledDataset:
    """
    读取 CSV 数据集

    语法：UTF-8，逗号分隔，每行 f_1,…,f_d,label，末列为整数标签；
    header=True 时跳过第一行；空行被忽略。原始标签被重排为稠密的 0..K-1，
    映射记录在 label_mapping（原始标签 → 稠密标签）。

    Raises:
        CsvParseError: 行格式错误或不是合法的 UTF-8（携带行号）
        DatasetError: 文件为空
    """
    path = Path(path)
    rows: list[list[float]] = []
    raw_labels: list[int] = []
    width: Optional[int] = None
    with open(path, "rb") as f:
        for line_number, raw in enumerate(f, start=1):
            if header and line_number == 1:
                continue
            try:
                line = raw.decode("utf-8")
            except UnicodeDecodeError as e:
                raise CsvParseError(f"不是合法的 UTF-8: {e.reason}", line_number) from e
            stripped = line.strip()
            if not stripped:
                continue
            cells = [cell.strip() for cell in stripped.split(",")]
            if len(cells) < 2:
                raise CsvParseError("至少需要一个特征列和一个标签列", line_number)
            if width is None:
                width = len(cells)
            elif len(cells) != width:
                raise CsvParseError(f"列数 {len(cells)} 与首行 {width} 不一致", line_number)
            try:
                features = [float(cell) for cell in cells[:-1]]
            except ValueError:
                raise CsvParseError(f"特征不是数值: {cells[:-1]}", line_number)
            if not all(math.isfinite(value) for value in features):
                raise CsvParseError("特征含非有限值", line_number)
            try:
                label = int(cells[-1])
            except ValueError:
                raise CsvParseError(f"标签不是整数: {cells[-1]!r}", line_number)
            rows.append(features)
            raw_labels.append(label)

    if not rows:
        raise DatasetError(f"CSV 文件为空: {path}")

    mapping = {original: dense for dense, original in enumerate(sorted(set(raw_labels)))}
    labels = np.array([mapping[label] for label in raw_labels], dtype=np.int64)
    if any(original != dense for original, dense in mapping.items()):
        logger.info(f"标签重排: {mapping}")
    return LabeledDataset(
        features=np.array(rows, dtype=np.float64),
        labels=labels,
        num_classes=len(mapping),
        label_mapping=mapping,
    )


def train_test_split(dataset: LabeledDataset, test_fraction: float, seed: int) -> BlobData:
    """从单个数据集中按比例随机切出留出测试集"""
    if not 0.0 < test_fraction < 1.0:
        raise SplitError(f"test_fraction 必须在 (0, 1) 内: {test_fraction}")
    count = int(math.floor(test_fraction * dataset.size))
    if count < 1 or count >= dataset.size:
        raise SplitError(f"数据集过小，无法切出测试集: N={dataset.size}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(dataset.size)
    return BlobData(train=dataset.subset(np.sort(order[count:])), test=dataset.subset(np.sort(order[:count])))


# ==================== 遗忘划分 ====================

class SplitSpec(BaseModel):
    """遗忘场景：random 按比例随机遗忘，classwise 遗忘整类"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    mode: Literal["random", "classwise"] = "random"
    fraction: Optional[float] = Field(None, gt=0, lt=1)
    forget_class: Optional[int] = Field(None, ge=0)
    seed: int = Field(0, ge=0, lt=U64_MAX)

    @model_validator(mode="after")
    def _check_mode(self) -> "SplitSpec":
        if self.mode == "random" and self.fraction is None:
            raise ValueError("mode=random 时必须给出 fraction")
        if self.mode == "classwise" and self.forget_class is None:
            raise ValueError("mode=classwise 时必须给出 forget_class")
        return self


@dataclass(frozen=True)
class Partition:
    """遗忘/保留下标，互不相交且覆盖全部训练样本"""
    forget_idx: np.ndarray
    retain_idx: np.ndarray

    def __post_init__(self):
        forget = np.asarray(self.forget_idx, dtype=np.int64)
        retain = np.asarray(self.retain_idx, dtype=np.int64)
        object.__setattr__(self, "forget_idx", forget)
        object.__setattr__(self, "retain_idx", retain)
        if np.intersect1d(forget, retain).size:
            raise SplitError("遗忘集与保留集相交")

    @property
    def size(self) -> int:
        return len(self.forget_idx) + len(self.retain_idx)

    def forget_mask(self) -> np.ndarray:
        """长度为 N 的布尔掩码，遗忘样本为 True"""
        mask = np.zeros(self.size, dtype=bool)
        mask[self.forget_idx] = True
        return mask

    def check_covers(self, n: int) -> None:
        """确认划分覆盖 {0..n-1}"""
        union = np.union1d(self.forget_idx, self.retain_idx)
        if union.size != n or (n and (union[0] != 0 or union[-1] != n - 1)):
            raise SplitError(f"划分未覆盖全部 {n} 个样本")


def split(dataset: LabeledDataset, spec: SplitSpec) -> Partition:
    """
    按遗忘场景划分数据集

    random: 用种子随机源无放回抽取 ⌊f·N⌋ 个遗忘下标；
    classwise: 标签为 c 的全部样本进入遗忘集。

    Returns:
        下标升序排列的 Partition
    """
    n = dataset.size
    if spec.mode == "random":
        count = int(math.floor(spec.fraction * n))
        if count < 1:
            raise SplitError(f"f·N = {spec.fraction * n:.3f} < 1，遗忘集为空")
        rng = np.random.default_rng(spec.seed)
        forget = np.sort(rng.choice(n, size=count, replace=False))
    else:
        if spec.forget_class >= dataset.num_classes:
            raise SplitError(f"遗忘类别 {spec.forget_class} 超出类别数 {dataset.num_classes}")
        forget = np.flatnonzero(dataset.labels == spec.forget_class)
        if forget.size == 0:
            raise SplitError(f"类别 {spec.forget_class} 没有样本")
    retain = np.setdiff1d(np.arange(n), forget)
    partition = Partition(forget_idx=forget, retain_idx=retain)
    partition.check_covers(n)
    logger.info(f"划分完成 ({spec.mode}): 遗忘 {len(forget)}, 保留 {len(retain)}")
    return partition
