"""
遗忘方法模块

Q-MUL（相似标签 + 自适应梯度重加权）以及基线方法 Retrain、FT、GA、RL、ℓ1-sparse、SalUn。
所有方法都在输入模型的副本上运行，结果是 (模型, 种子, 配置) 的确定性函数。
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Literal, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from src.data import LabeledDataset, Partition
from src.errors import ConfigError, EmptySetError, LabelError
from src.metrics import ZERO_NORM, EpochDiagnostic, ratio_of, subset_grad_norm
from src.nn_core import (
    U64_MAX,
    GradTransform,
    Model,
    SgdConfig,
    Softmax,
    build_mlp,
    fit,
    learning_rate_at,
    loss_gradients,
    softmax,
    train_epoch,
)
from src.quant import QuantSpec
from src.tensor import Tensor

logger = logging.getLogger(__name__)

Method = Literal["retrain", "ft", "ga", "rl", "l1_sparse", "salun", "qmul"]

METHOD_LABELS: dict[str, str] = {
    "retrain": "Retrain",
    "ft": "FT",
    "ga": "GA",
    "rl": "RL",
    "l1_sparse": "l1-sparse",
    "salun": "SalUn",
    "qmul": "Q-MUL",
}


class UnlearnConfig(BaseModel):
    """
    单个遗忘方法的配置

    gamma 仅用于 l1_sparse；sparsity 仅用于 salun；
    similar_labels / adaptive_reweighting 仅用于 qmul（关闭后即对应消融变体）。
    grid 为超参数网格（字段名 → 候选值列表），由配置层展开。
    """
    model_config = ConfigDict(frozen=True, extra="forbid")

    method: Method
    name: Optional[str] = None
    epochs: int = Field(10, ge=0)
    learning_rate: float = Field(0.01, ge=0)
    batch_size: int = Field(64, ge=1)
    schedule: Literal["constant", "cosine"] = "constant"
    seed: int = Field(0, ge=0, lt=U64_MAX)
    label_refresh: Literal["per_epoch", "once"] = "per_epoch"
    gamma: float = Field(1e-4, ge=0)
    sparsity: float = Field(0.5, gt=0, le=1)
    similar_labels: bool = True
    adaptive_reweighting: bool = True
    record_diagnostics: bool = True
    grid: Optional[dict[str, list]] = None

    @property
    def display_name(self) -> str:
        return self.name or METHOD_LABELS[self.method]


@dataclass
class SimilarLabelAssignment:
    """每个遗忘样本选出的相似标签及其距离 d(k_sl)"""
    labels: np.ndarray
    distances: np.ndarray


@dataclass
class AgrWeights:
    """自适应梯度重加权系数"""
    alpha_f: float
    alpha_r: float
    g_f: float
    g_r: float


@dataclass
class UnlearnResult:
    """遗忘结果：新模型与逐轮诊断"""
    model: Model
    diagnostics: list[EpochDiagnostic] = field(default_factory=list)


@dataclass
class AlignmentReport:
    """遗忘样本上真实标签与相似/随机标签的对数概率梯度夹角余弦"""
    cos_sl: np.ndarray
    cos_rl: np.ndarray
    degenerate_sl: np.ndarray
    degenerate_rl: np.ndarray
    similar_labels: np.ndarray
    random_labels: np.ndarray

    @property
    def mean_sl(self) -> float:
        return float(np.mean(self.cos_sl))

    @property
    def mean_rl(self) -> float:
        return float(np.mean(self.cos_rl))


def minibatch_rng(seed: int) -> np.random.Generator:
    """小批量顺序使用的随机源"""
    return np.random.default_rng([seed, 0])


def label_rng(seed: int) -> np.random.Generator:
    """随机标签使用的随机源，与小批量顺序相互独立"""
    return np.random.default_rng([seed, 1])


# ==================== 相似标签 ====================

def similar_labels_from_probs(probs: Tensor, labels: np.ndarray) -> SimilarLabelAssignment:
    """
    k_sl = argmin_{k ≠ y} |p_k − p_y|，平局取最小类别下标

    Args:
        probs: [N, K] 概率分布
        labels: [N] 原始标签

    Raises:
        LabelError: K < 2
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.shape[1] < 2:
        raise LabelError("只有一个类别时不存在替代标签")
    rows = np.arange(len(labels))
    distances = np.abs(probs - probs[rows, labels][:, None])
    distances[rows, labels] = np.inf
    chosen = np.argmin(distances, axis=1)
    return SimilarLabelAssignment(labels=chosen, distances=distances[rows, chosen])


def assign_similar_labels(
    model: Model,
    dataset: LabeledDataset,
    partition: Partition,
) -> tuple[LabeledDataset, SimilarLabelAssignment]:
    """
    构造遗忘训练集 D' = D'_f ∪ D'_r

    遗忘样本的标签替换为当前模型下的相似标签，保留样本不变。

    Returns:
        (D', 遗忘样本的相似标签分配)
    """
    if dataset.num_classes < 2:
        raise LabelError("只有一个类别时不存在替代标签")
    if model.in_features != dataset.dim:
        raise LabelError(f"模型输入维度 {model.in_features} 与数据维度 {dataset.dim} 不符")
    forget = partition.forget_idx
    labels = dataset.labels.copy()
    if forget.size == 0:
        return dataset.with_labels(labels), SimilarLabelAssignment(np.zeros(0, np.int64), np.zeros(0))
    probs = model.predict_proba(dataset.features[forget])
    assignment = similar_labels_from_probs(probs, dataset.labels[forget])
    labels[forget] = assignment.labels
    return dataset.with_labels(labels), assignment


def draw_random_labels(labels: np.ndarray, num_classes: int, rng: np.random.Generator) -> np.ndarray:
    """从 {0..K−1} \\ {y} 中均匀抽取替代标签"""
    labels = np.asarray(labels, dtype=np.int64)
    if num_classes < 2:
        raise LabelError("只有一个类别时不存在替代标签")
    offsets = rng.integers(0, num_classes - 1, size=labels.shape)
    return offsets + (offsets >= labels)


# ==================== 自适应梯度重加权 ====================

def agr_weights_from_norms(g_f: float, g_r: float) -> AgrWeights:
    """α_f = G_r/(G_f+G_r)，α_r = G_f/(G_f+G_r)；范数和过小时取 0.5/0.5"""
    total = g_f + g_r
    if total < ZERO_NORM:
        logger.warning("G_f + G_r 接近 0，AGR 权重回退为 0.5/0.5")
        return AgrWeights(alpha_f=0.5, alpha_r=0.5, g_f=g_f, g_r=g_r)
    return AgrWeights(alpha_f=g_r / total, alpha_r=g_f / total, g_f=g_f, g_r=g_r)


def compute_agr_weights(model: Model, forget_set: LabeledDataset, retain_set: LabeledDataset) -> AgrWeights:
    """
    在完整的 D'_f、D'_r 上计算平均交叉熵的梯度范数并分配权重

    Raises:
        EmptySetError: 任一子集为空
    """
    if forget_set.size == 0 or retain_set.size == 0:
        raise EmptySetError("AGR 需要非空的遗忘集与保留集")
    return agr_weights_from_norms(subset_grad_norm(model, forget_set), subset_grad_norm(model, retain_set))


def _split_view(dataset: LabeledDataset, partition: Partition, labels: np.ndarray) -> tuple[LabeledDataset, LabeledDataset]:
    relabelled = dataset.with_labels(labels)
    return relabelled.subset(partition.forget_idx), relabelled.subset(partition.retain_idx)


# ==================== 通用遗忘训练循环 ====================

LabelSchedule = Callable[[int, Model], np.ndarray]


def _unlearning_loop(
    model: Model,
    dataset: LabeledDataset,
    partition: Partition,
    config: UnlearnConfig,
    train_idx: np.ndarray,
    epoch_labels: LabelSchedule,
    effective_alphas: Optional[tuple[float, float]],
    grad_transform: Optional[GradTransform] = None,
    weight_samples: bool = False,
) -> UnlearnResult:
    """
    逐轮: 生成本轮标签 → 计算 G_f/G_r 与权重 → 在 train_idx 上做一轮小批量 SGD

    Args:
        train_idx: 参与训练的样本下标
        epoch_labels: (轮次, 当前模型) → 全量标签
        effective_alphas: 方法固定使用的 (α_f, α_r)；None 表示按 AGR 计算
        weight_samples: 固定系数是否真的作为样本权重（否则只记录在诊断里，样本权重全为 1）
        grad_transform: 每批梯度的变换
    """
    rng = minibatch_rng(config.seed)
    diagnostics: list[EpochDiagnostic] = []
    has_both = partition.forget_idx.size > 0 and partition.retain_idx.size > 0
    name = config.display_name
    fixed_weights = None
    if effective_alphas is not None and weight_samples:
        fixed_weights = np.where(partition.forget_mask(), *effective_alphas)

    for epoch in range(config.epochs):
        labels = epoch_labels(epoch, model)
        weights = fixed_weights
        if has_both and (effective_alphas is None or config.record_diagnostics):
            forget_view, retain_view = _split_view(dataset, partition, labels)
            agr = compute_agr_weights(model, forget_view, retain_view)
            alpha_f, alpha_r = (agr.alpha_f, agr.alpha_r) if effective_alphas is None else effective_alphas
            if effective_alphas is None:
                weights = np.where(partition.forget_mask(), alpha_f, alpha_r)
            if config.record_diagnostics:
                ratio = ratio_of(agr.g_f, agr.g_r)
                diagnostics.append(EpochDiagnostic(epoch, agr.g_f, agr.g_r, ratio, alpha_f, alpha_r))
                logger.info(
                    f"[{name}] 轮次 {epoch + 1}/{config.epochs}: G_f={agr.g_f:.5f}, G_r={agr.g_r:.5f}, "
                    f"ratio={ratio:.4f}, α_f={alpha_f:.4f}, α_r={alpha_r:.4f}"
                )
        elif effective_alphas is None:
            raise EmptySetError("AGR 需要非空的遗忘集与保留集")

        lr = learning_rate_at(config.learning_rate, config.schedule, epoch, config.epochs)
        batch_weights = None if weights is None else weights[train_idx]
        loss = train_epoch(
            model,
            dataset.features[train_idx],
            labels[train_idx],
            lr,
            config.batch_size,
            rng,
            batch_weights,
            grad_transform,
        )
        logger.debug(f"[{name}] 轮次 {epoch + 1}: lr={lr:.5f}, loss={loss:.5f}")
    return UnlearnResult(model=model, diagnostics=diagnostics)


def _fixed_labels(dataset: LabeledDataset) -> LabelSchedule:
    return lambda epoch, model: dataset.labels


def _random_label_schedule(dataset: LabeledDataset, partition: Partition, config: UnlearnConfig) -> LabelSchedule:
    rng = label_rng(config.seed)
    state: dict[str, np.ndarray] = {}

    def _labels(epoch: int, model: Model) -> np.ndarray:
        if config.label_refresh == "per_epoch" or "labels" not in state:
            labels = dataset.labels.copy()
            labels[partition.forget_idx] = draw_random_labels(
                dataset.labels[partition.forget_idx], dataset.num_classes, rng
            )
            state["labels"] = labels
        return state["labels"]

    return _labels


def _similar_label_schedule(dataset: LabeledDataset, partition: Partition, config: UnlearnConfig) -> LabelSchedule:
    state: dict[str, np.ndarray] = {}

    def _labels(epoch: int, model: Model) -> np.ndarray:
        if config.label_refresh == "per_epoch" or "labels" not in state:
            relabelled, _ = assign_similar_labels(model, dataset, partition)
            state["labels"] = relabelled.labels
        return state["labels"]

    return _labels


def _all_indices(dataset: LabeledDataset) -> np.ndarray:
    return np.arange(dataset.size)


# ==================== 方法实现 ====================

def retrain(
    dataset: LabeledDataset,
    partition: Partition,
    train_config: SgdConfig,
    hidden: Sequence[int],
    quant: Optional[QuantSpec] = None,
    on_epoch: Optional[Callable[[int, Model], None]] = None,
) -> Model:
    """
    Retrain: 用原始训练配方从头只在保留集上训练（遗忘的黄金标准）

    初始化种子与小批量种子都取 train_config.seed，因此遗忘集为空时与原始训练完全一致。
    on_epoch 原样传给 fit。
    """
    model = build_mlp(dataset.dim, hidden, dataset.num_classes, quant, seed=train_config.seed)
    retain = dataset.subset(partition.retain_idx)
    logger.info(f"Retrain: 在 {retain.size} 个保留样本上从头训练")
    return fit(model, retain.features, retain.labels, train_config, on_epoch=on_epoch)


def finetune_ft(model: Model, dataset: LabeledDataset, partition: Partition, config: UnlearnConfig) -> UnlearnResult:
    """FT: 只在保留集上继续训练，标签不变"""
    return _unlearning_loop(
        model.clone(), dataset, partition, config,
        train_idx=partition.retain_idx,
        epoch_labels=_fixed_labels(dataset),
        effective_alphas=(0.0, 1.0),
    )


def gradient_ascent_ga(model: Model, dataset: LabeledDataset, partition: Partition, config: UnlearnConfig) -> UnlearnResult:
    """GA: 在遗忘集上做梯度上升 w ← w + η∇L，标签不变"""
    return _unlearning_loop(
        model.clone(), dataset, partition, config,
        train_idx=partition.forget_idx,
        epoch_labels=_fixed_labels(dataset),
        effective_alphas=(1.0, 0.0),
        grad_transform=lambda grads: [-g for g in grads],
    )


def random_labels_rl(model: Model, dataset: LabeledDataset, partition: Partition, config: UnlearnConfig) -> UnlearnResult:
    """RL: 遗忘样本换成随机的其他类别标签，然后在 D' 上常规训练"""
    return _unlearning_loop(
        model.clone(), dataset, partition, config,
        train_idx=_all_indices(dataset),
        epoch_labels=_random_label_schedule(dataset, partition, config),
        effective_alphas=(0.5, 0.5),
    )


def l1_subgradient(params: Sequence[Tensor], gamma: float, skip: Optional[Sequence[bool]] = None) -> list[Tensor]:
    """γ·sign(w)，w = 0 处取 0；skip 为 True 的参数（量化步长）不加惩罚"""
    skip = skip or [False] * len(params)
    return [np.zeros_like(p) if excluded else gamma * np.sign(p) for p, excluded in zip(params, skip)]


def l1_sparse(model: Model, dataset: LabeledDataset, partition: Partition, config: UnlearnConfig) -> UnlearnResult:
    """ℓ1-sparse: FT 目标加 γ·Σ|w|"""
    working = model.clone()
    params = working.parameters()
    skip = working.scale_parameter_mask()
    grad_transform = None
    if config.gamma:
        def grad_transform(grads: list[Tensor]) -> list[Tensor]:
            return [g + penalty for g, penalty in zip(grads, l1_subgradient(params, config.gamma, skip))]

    return _unlearning_loop(
        working, dataset, partition, config,
        train_idx=partition.retain_idx,
        epoch_labels=_fixed_labels(dataset),
        effective_alphas=(0.0, 1.0),
        grad_transform=grad_transform,
    )


def saliency_mask(grads: Sequence[Tensor], sparsity: float) -> list[np.ndarray]:
    """
    按 |g| 选出前 ⌈ρ·P⌉ 个参数，平局按扁平下标靠前者优先

    Returns:
        与 grads 同形状的 0/1 浮点掩码
    """
    flat = np.concatenate([np.abs(np.ravel(g)) for g in grads])
    total = flat.size
    count = min(total, max(1, int(math.ceil(sparsity * total - 1e-9))))
    order = np.lexsort((np.arange(total), -flat))
    mask_flat = np.zeros(total)
    mask_flat[order[:count]] = 1.0
    masks, offset = [], 0
    for g in grads:
        size = np.size(g)
        masks.append(mask_flat[offset:offset + size].reshape(np.shape(g)))
        offset += size
    return masks


def salun(model: Model, dataset: LabeledDataset, partition: Partition, config: UnlearnConfig) -> UnlearnResult:
    """
    SalUn: 开始时在遗忘集上计算 |∇_w L|，只允许前 ρ 比例的显著参数按 RL 流程更新
    """
    working = model.clone()
    forget = dataset.subset(partition.forget_idx)
    _, grads = loss_gradients(working, forget.features, forget.labels)
    masks = saliency_mask(grads, config.sparsity)
    salient = int(sum(m.sum() for m in masks))
    logger.info(f"[{config.display_name}] 显著参数 {salient}/{working.parameter_count()}")
    return _unlearning_loop(
        working, dataset, partition, config,
        train_idx=_all_indices(dataset),
        epoch_labels=_random_label_schedule(dataset, partition, config),
        effective_alphas=(0.5, 0.5),
        grad_transform=lambda batch_grads: [g * m for g, m in zip(batch_grads, masks)],
    )


def qmul_unlearn(model: Model, dataset: LabeledDataset, partition: Partition, config: UnlearnConfig) -> UnlearnResult:
    """
    Q-MUL: 每轮用当前模型重建 D'（相似标签），在完整子集上计算 G_f、G_r 得到 α_f、α_r，
    再以 α_f（遗忘样本）/ α_r（保留样本）为样本权重做加权交叉熵小批量 SGD。

    similar_labels=False 时改用随机标签，adaptive_reweighting=False 时固定 0.5/0.5。
    """
    if config.method != "qmul":
        raise ConfigError(f"qmul_unlearn 需要 method=qmul，实际为 {config.method}")
    if config.similar_labels:
        schedule = _similar_label_schedule(dataset, partition, config)
    else:
        schedule = _random_label_schedule(dataset, partition, config)
    return _unlearning_loop(
        model.clone(), dataset, partition, config,
        train_idx=_all_indices(dataset),
        epoch_labels=schedule,
        effective_alphas=None if config.adaptive_reweighting else (0.5, 0.5),
        weight_samples=True,
    )


METHODS: dict[str, Callable[[Model, LabeledDataset, Partition, UnlearnConfig], UnlearnResult]] = {
    "ft": finetune_ft,
    "ga": gradient_ascent_ga,
    "rl": random_labels_rl,
    "l1_sparse": l1_sparse,
    "salun": salun,
    "qmul": qmul_unlearn,
}


def run_unlearning(model: Model, dataset: LabeledDataset, partition: Partition, config: UnlearnConfig) -> UnlearnResult:
    """按方法名分派（Retrain 需要训练配方，由编排层单独调用 retrain）"""
    if config.method not in METHODS:
        raise ConfigError(f"方法 {config.method} 不能从已有模型出发运行")
    logger.info(f"开始遗忘: {config.display_name} (epochs={config.epochs}, lr={config.learning_rate})")
    return METHODS[config.method](model, dataset, partition, config)


# ==================== 梯度方向诊断 ====================

def _log_prob_gradient(model: Model, x: Tensor, label: int) -> np.ndarray:
    """∇_w log p(label | x)，扁平化"""
    out = model.forward(x)
    upstream = np.zeros_like(out)
    if isinstance(model.layers[-1], Softmax):
        upstream[0, label] = 1.0 / max(out[0, label], 1e-300)
    else:
        upstream = -softmax(out)
        upstream[0, label] += 1.0
    return np.concatenate([np.ravel(g) for g in model.backward(upstream)])


def cosine(a: np.ndarray, b: np.ndarray) -> tuple[float, bool]:
    """余弦相似度；任一向量范数为 0 时返回 (0.0, True)"""
    norm_a, norm_b = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if norm_a == 0.0 or norm_b == 0.0:
        return 0.0, True
    return float(np.dot(a, b) / (norm_a * norm_b)), False


def measure_label_gradient_alignment(
    model: Model,
    dataset: LabeledDataset,
    partition: Partition,
    seed: int = 0,
    compare_labels: Optional[np.ndarray] = None,
) -> AlignmentReport:
    """
    逐个遗忘样本计算 cos θ_sl 与 cos θ_rl

    cos θ_sl 为 ∇_w log p(y|x) 与 ∇_w log p(k_sl|x) 的夹角余弦，cos θ_rl 换成种子随机标签 k_rl。
    compare_labels 可覆盖 k_sl（例如自检时传入原始标签，余弦应为 1）。
    """
    forget = partition.forget_idx
    true_labels = dataset.labels[forget]
    if compare_labels is None:
        _, assignment = assign_similar_labels(model, dataset, partition)
        compare_labels = assignment.labels
    random_labels = draw_random_labels(true_labels, dataset.num_classes, np.random.default_rng(seed))

    count = forget.size
    cos_sl, cos_rl = np.zeros(count), np.zeros(count)
    degenerate_sl, degenerate_rl = np.zeros(count, bool), np.zeros(count, bool)
    for i, index in enumerate(forget):
        x = dataset.features[index:index + 1]
        reference = _log_prob_gradient(model, x, int(true_labels[i]))
        cos_sl[i], degenerate_sl[i] = cosine(reference, _log_prob_gradient(model, x, int(compare_labels[i])))
        cos_rl[i], degenerate_rl[i] = cosine(reference, _log_prob_gradient(model, x, int(random_labels[i])))
    degenerate = int(degenerate_sl.sum() + degenerate_rl.sum())
    if degenerate:
        logger.warning(f"{degenerate} 对梯度范数为 0，余弦记为 0")
    logger.info(f"梯度方向: mean cos_sl={np.mean(cos_sl):.4f}, mean cos_rl={np.mean(cos_rl):.4f}")
    return AlignmentReport(
        cos_sl=cos_sl,
        cos_rl=cos_rl,
        degenerate_sl=degenerate_sl,
        degenerate_rl=degenerate_rl,
        similar_labels=np.asarray(compare_labels, dtype=np.int64),
        random_labels=random_labels,
    )
