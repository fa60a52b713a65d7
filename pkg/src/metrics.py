"""
评估指标模块

遗忘/保留/测试准确率 (FA/RA/TA)、基于损失阈值的成员推断攻击 (MIA)、
逐轮梯度范数比诊断，以及相对 Retrain 参照的平均差距 (AG)。
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from sklearn.metrics import roc_curve

from src.data import LabeledDataset, Partition
from src.errors import EmptySetError
from src.nn_core import LOG_PROB_FLOOR, PROB_FLOOR, Model, Softmax, grad_norm, log_softmax, loss_gradients
from src.tensor import Tensor

logger = logging.getLogger(__name__)

# 范数之和低于该值视为零梯度
ZERO_NORM = 1e-12
# MIA 校准集的最小样本数
MIN_CALIBRATION = 50


@dataclass
class EpochDiagnostic:
    """单轮遗忘训练的梯度诊断"""
    epoch: int
    g_f: float
    g_r: float
    ratio: float
    alpha_f: float
    alpha_r: float

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "EpochDiagnostic":
        return cls(
            epoch=int(data["epoch"]),
            g_f=float(data["g_f"]),
            g_r=float(data["g_r"]),
            ratio=float(data["ratio"]),
            alpha_f=float(data["alpha_f"]),
            alpha_r=float(data["alpha_r"]),
        )


@dataclass
class MetricsReport:
    """单个模型的评估结果（百分数）"""
    fa: float
    ra: float
    ta: float
    mia: float
    mia_probe: Optional[float] = None
    mia_degenerate: bool = False
    diagnostics: list[EpochDiagnostic] = field(default_factory=list)

    def __post_init__(self):
        for name in ("fa", "ra", "ta", "mia"):
            value = getattr(self, name)
            if not 0.0 <= value <= 100.0:
                raise ValueError(f"{name} 必须在 [0, 100] 内: {value}")

    def to_dict(self) -> dict:
        return {
            "fa": self.fa,
            "ra": self.ra,
            "ta": self.ta,
            "mia": self.mia,
            "mia_probe": self.mia_probe,
            "mia_degenerate": self.mia_degenerate,
            "diagnostics": [d.to_dict() for d in self.diagnostics],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MetricsReport":
        return cls(
            fa=float(data["fa"]),
            ra=float(data["ra"]),
            ta=float(data["ta"]),
            mia=float(data["mia"]),
            mia_probe=data.get("mia_probe"),
            mia_degenerate=bool(data.get("mia_degenerate", False)),
            diagnostics=[EpochDiagnostic.from_dict(d) for d in data.get("diagnostics", [])],
        )


@dataclass
class GapReport:
    """相对参照报告的绝对差距及其均值"""
    gap_fa: float
    gap_ra: float
    gap_ta: float
    gap_mia: float
    ag: float

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "GapReport":
        return cls(**{key: float(data[key]) for key in ("gap_fa", "gap_ra", "gap_ta", "gap_mia", "ag")})


@dataclass
class MiaResult:
    """阈值攻击结果"""
    score: float
    threshold: float
    degenerate: bool = False


# ==================== 准确率 ====================

def accuracy(model: Model, features: Tensor, labels: np.ndarray) -> float:
    """
    100 · argmax 正确数 / N，argmax 平局取最小类别下标

    Raises:
        EmptySetError: 评估集为空
    """
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise EmptySetError("评估集为空")
    predictions = np.argmax(model.forward(features), axis=1)
    return 100.0 * float(np.count_nonzero(predictions == labels)) / len(labels)


# ==================== 成员推断 ====================

def per_sample_losses(model: Model, features: Tensor, labels: np.ndarray) -> np.ndarray:
    """逐样本交叉熵（与训练损失使用同样的概率下限）"""
    out = model.forward(features)
    rows = np.arange(len(labels))
    if isinstance(model.layers[-1], Softmax):
        log_probs = np.log(np.maximum(out, PROB_FLOOR))
    else:
        log_probs = log_softmax(out)
    return -np.maximum(log_probs[rows, np.asarray(labels, dtype=np.int64)], LOG_PROB_FLOOR)


def fit_loss_threshold(member_losses: np.ndarray, nonmember_losses: np.ndarray) -> tuple[float, bool]:
    """
    拟合单阈值分类器：损失 ≤ 阈值判为成员

    以 -loss 为成员分数做 ROC 扫描，候选阈值为校准损失的升序去重值，
    选平衡准确率 (tpr + 1 - fpr) / 2 最高者（平局取最小候选）；
    最终阈值取所选候选与下一个候选的中点（中隙规则），所选为最大候选时取其本身。

    Returns:
        (阈值, 是否退化)；全部校准损失相等时退化
    """
    members = np.asarray(member_losses, dtype=np.float64)
    nonmembers = np.asarray(nonmember_losses, dtype=np.float64)
    if members.size == 0 or nonmembers.size == 0:
        raise EmptySetError("MIA 校准集为空")
    losses = np.concatenate([members, nonmembers])
    is_member = np.concatenate([np.ones(members.size, dtype=np.int64), np.zeros(nonmembers.size, dtype=np.int64)])
    fpr, tpr, thresholds = roc_curve(is_member, -losses, drop_intermediate=False)
    # 第一个点是 roc_curve 补上的“全部判为非成员”，不是候选
    candidates = -thresholds[1:]
    if candidates.size == 1:
        return float(candidates[0]), True

    balanced = 0.5 * (tpr[1:] + (1.0 - fpr[1:]))
    best = int(np.argmax(balanced))
    if best + 1 < candidates.size:
        threshold = 0.5 * (candidates[best] + candidates[best + 1])
    else:
        threshold = float(candidates[best])
    return float(threshold), False


def mia_from_losses(
    member_losses: np.ndarray,
    nonmember_losses: np.ndarray,
    query_losses: np.ndarray,
) -> MiaResult:
    """在校准损失上拟合阈值后，返回查询样本中被判为成员的百分比"""
    query = np.asarray(query_losses, dtype=np.float64)
    if query.size == 0:
        raise EmptySetError("MIA 查询集为空")
    threshold, degenerate = fit_loss_threshold(member_losses, nonmember_losses)
    if degenerate:
        logger.warning("MIA 校准损失全部相等，返回 50.0")
        return MiaResult(score=50.0, threshold=threshold, degenerate=True)
    score = 100.0 * float(np.count_nonzero(query <= threshold)) / query.size
    return MiaResult(score=score, threshold=threshold)


def mia_score(
    model: Model,
    retain_sample: LabeledDataset,
    test_sample: LabeledDataset,
    forget_set: LabeledDataset,
    min_calibration: int = MIN_CALIBRATION,
) -> MiaResult:
    """
    损失阈值成员推断攻击

    Args:
        retain_sample: 成员校准集（保留集的随机一半）
        test_sample: 非成员校准集（留出测试数据）
        forget_set: 被查询的遗忘集
        min_calibration: 每个校准集的最小样本数

    Returns:
        MiaResult，score 为遗忘样本被判为成员的百分比
    """
    for name, subset in (("成员", retain_sample), ("非成员", test_sample)):
        if subset.size < min_calibration:
            raise EmptySetError(f"MIA {name}校准集只有 {subset.size} 个样本，至少需要 {min_calibration}")
    return mia_from_losses(
        per_sample_losses(model, retain_sample.features, retain_sample.labels),
        per_sample_losses(model, test_sample.features, test_sample.labels),
        per_sample_losses(model, forget_set.features, forget_set.labels),
    )


# ==================== 梯度诊断 ====================

def subset_grad_norm(model: Model, subset: LabeledDataset) -> float:
    """子集上平均交叉熵的参数梯度范数"""
    if subset.size == 0:
        raise EmptySetError("梯度子集为空")
    _, grads = loss_gradients(model, subset.features, subset.labels)
    return grad_norm(grads)


def ratio_of(g_f: float, g_r: float) -> float:
    """G_f / G_r，G_r 过小时为 +inf"""
    if g_r < ZERO_NORM:
        return math.inf
    return g_f / g_r


def gradient_ratio_diag(model: Model, forget_set: LabeledDataset, retain_set: LabeledDataset) -> float:
    """遗忘数据与保留数据梯度范数之比 G_f / G_r"""
    return ratio_of(subset_grad_norm(model, forget_set), subset_grad_norm(model, retain_set))


# ==================== 平均差距 ====================

def average_gap(report: MetricsReport, reference: MetricsReport) -> GapReport:
    """四项指标的绝对差距及其算术平均（fsum 保证与顺序无关）"""
    gaps = [
        abs(report.fa - reference.fa),
        abs(report.ra - reference.ra),
        abs(report.ta - reference.ta),
        abs(report.mia - reference.mia),
    ]
    return GapReport(gap_fa=gaps[0], gap_ra=gaps[1], gap_ta=gaps[2], gap_mia=gaps[3], ag=math.fsum(gaps) / 4.0)


# ==================== 综合评估 ====================

@dataclass
class EvaluationSets:
    """
    评估所需的固定数据视图

    MIA 成员校准集为保留集的随机一半；测试集随机一半作为非成员校准集，
    另一半作为非成员探针（mia_probe）。两半互不相交。
    """
    forget: LabeledDataset
    retain: LabeledDataset
    test: LabeledDataset
    member_calibration: LabeledDataset
    nonmember_calibration: LabeledDataset
    probe: LabeledDataset

    @classmethod
    def build(cls, train: LabeledDataset, test: LabeledDataset, partition: Partition, seed: int) -> "EvaluationSets":
        rng = np.random.default_rng(seed)
        retain = train.subset(partition.retain_idx)
        member_idx = np.sort(rng.permutation(retain.size)[: retain.size // 2])
        test_order = rng.permutation(test.size)
        half = test.size // 2
        return cls(
            forget=train.subset(partition.forget_idx),
            retain=retain,
            test=test,
            member_calibration=retain.subset(member_idx),
            nonmember_calibration=test.subset(np.sort(test_order[:half])),
            probe=test.subset(np.sort(test_order[half:])),
        )


def evaluate(
    model: Model,
    sets: EvaluationSets,
    diagnostics: Optional[list[EpochDiagnostic]] = None,
    min_calibration: int = MIN_CALIBRATION,
) -> MetricsReport:
    """计算 FA/RA/TA/MIA 及非成员探针 MIA"""
    fa = accuracy(model, sets.forget.features, sets.forget.labels)
    ra = accuracy(model, sets.retain.features, sets.retain.labels)
    ta = accuracy(model, sets.test.features, sets.test.labels)
    mia = mia_score(model, sets.member_calibration, sets.nonmember_calibration, sets.forget, min_calibration)
    probe = mia_score(model, sets.member_calibration, sets.nonmember_calibration, sets.probe, min_calibration)
    report = MetricsReport(
        fa=fa,
        ra=ra,
        ta=ta,
        mia=mia.score,
        mia_probe=probe.score,
        mia_degenerate=mia.degenerate,
        diagnostics=list(diagnostics or []),
    )
    logger.info(f"评估: FA={fa:.2f} RA={ra:.2f} TA={ta:.2f} MIA={mia.score:.2f} (probe {probe.score:.2f})")
    return report
