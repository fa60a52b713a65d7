"""
数值核心模块

固定层词表 (Linear / ReLU / Softmax) 的前向与手写反向传播、加权交叉熵、SGD 更新与训练循环。
权重以全精度潜在副本保存，量化节点在使用时对其做伪量化。
"""

import copy
import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Literal, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from src.errors import DimensionError, ForwardCacheError, LabelError, SampleWeightError
from src.quant import QuantNode, QuantSpec, lsq_scale_grad, quantize, ste_backward
from src.tensor import Tensor, check_finite

logger = logging.getLogger(__name__)

# log 之前的概率下限
PROB_FLOOR = 1e-300
LOG_PROB_FLOOR = math.log(PROB_FLOOR)

U64_MAX = 2 ** 64


class SgdConfig(BaseModel):
    """原始训练与重训练使用的 SGD 配置"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    learning_rate: float = Field(0.1, gt=0)
    batch_size: int = Field(64, ge=1)
    epochs: int = Field(20, ge=1)
    schedule: Literal["constant", "cosine"] = "cosine"
    seed: int = Field(0, ge=0, lt=U64_MAX)


def learning_rate_at(base_lr: float, schedule: str, epoch: int, epochs: int) -> float:
    """
    第 epoch 轮的学习率

    cosine: η_t = η_0 · ½(1 + cos(π·t/T))，t 为轮次下标
    """
    if schedule == "constant" or epochs <= 0:
        return base_lr
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * epoch / epochs))


# ==================== 层定义 ====================

@dataclass
class Linear:
    """全连接层 y = x @ W + b，W 形状为 [in, out]"""
    weight: Tensor
    bias: Optional[Tensor] = None
    weight_quant: Optional[QuantNode] = None

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        if self.weight.ndim != 2 or min(self.weight.shape) < 1:
            raise DimensionError("Linear 权重必须是非空二维矩阵", actual=self.weight.shape)
        check_finite(self.weight, "Linear 权重")
        if self.bias is not None:
            self.bias = np.asarray(self.bias, dtype=np.float64)
            if self.bias.shape != (self.out_features,):
                raise DimensionError("Linear 偏置形状错误", expected=(self.out_features,), actual=self.bias.shape)
            check_finite(self.bias, "Linear 偏置")

    @property
    def in_features(self) -> int:
        return self.weight.shape[0]

    @property
    def out_features(self) -> int:
        return self.weight.shape[1]

    @property
    def has_bias(self) -> bool:
        return self.bias is not None


@dataclass
class ReLU:
    """ReLU 激活，可选在其输出上做激活量化"""
    act_quant: Optional[QuantNode] = None


@dataclass
class Softmax:
    """按行 softmax"""


LayerKind = Union[Linear, ReLU, Softmax]


@dataclass
class _LinearCache:
    inputs: Tensor
    weight: Tensor


@dataclass
class _ReluCache:
    pre: Tensor
    post: Tensor


@dataclass
class _SoftmaxCache:
    probs: Tensor


@dataclass
class ForwardCache:
    """一次前向的中间结果，足以完成反向"""
    batch_shape: tuple
    output_shape: tuple
    layers: list = field(default_factory=list)


def softmax(logits: Tensor) -> Tensor:
    """减最大值的数值稳定 softmax"""
    shifted = logits - np.max(logits, axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / np.sum(exp, axis=1, keepdims=True)


def log_softmax(logits: Tensor) -> Tensor:
    """减最大值的数值稳定 log-softmax"""
    shifted = logits - np.max(logits, axis=1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))


class Model:
    """
    有序层栈

    参数顺序固定为：每个 Linear 依次 weight、bias（若有）、权重步长（可学习时）；
    每个 ReLU 的激活步长（可学习时）。parameters() 返回的数组可原地更新。
    """

    def __init__(self, layers: Sequence[LayerKind]):
        if not layers or not isinstance(layers[0], Linear):
            raise DimensionError("模型第一层必须是 Linear")
        width = layers[0].in_features
        for i, layer in enumerate(layers):
            if isinstance(layer, Linear):
                if layer.in_features != width:
                    raise DimensionError(f"第 {i} 层输入维度不衔接", expected=width, actual=layer.in_features)
                width = layer.out_features
            elif not isinstance(layer, (ReLU, Softmax)):
                raise TypeError(f"不支持的层类型: {type(layer).__name__}")
        self.layers: list[LayerKind] = list(layers)
        self._out_features = width
        self._cache: Optional[ForwardCache] = None

    @property
    def in_features(self) -> int:
        return self.layers[0].in_features

    @property
    def out_features(self) -> int:
        return self._out_features

    @property
    def is_quantized(self) -> bool:
        return bool(self.quant_nodes())

    @property
    def last_cache(self) -> Optional[ForwardCache]:
        return self._cache

    def quant_nodes(self) -> list[QuantNode]:
        """按层序列出所有量化节点"""
        nodes = []
        for layer in self.layers:
            if isinstance(layer, Linear) and layer.weight_quant is not None:
                nodes.append(layer.weight_quant)
            elif isinstance(layer, ReLU) and layer.act_quant is not None:
                nodes.append(layer.act_quant)
        return nodes

    def parameters(self) -> list[Tensor]:
        """按固定顺序返回参数数组（可原地修改）"""
        params = []
        for layer in self.layers:
            if isinstance(layer, Linear):
                params.append(layer.weight)
                if layer.bias is not None:
                    params.append(layer.bias)
                if layer.weight_quant is not None and layer.weight_quant.learnable:
                    params.append(layer.weight_quant.scale_param)
            elif isinstance(layer, ReLU) and layer.act_quant is not None and layer.act_quant.learnable:
                params.append(layer.act_quant.scale_param)
        return params

    def scale_parameter_mask(self) -> list[bool]:
        """与 parameters() 对齐，标记哪些参数是量化步长"""
        mask = []
        for layer in self.layers:
            if isinstance(layer, Linear):
                mask.append(False)
                if layer.bias is not None:
                    mask.append(False)
                if layer.weight_quant is not None and layer.weight_quant.learnable:
                    mask.append(True)
            elif isinstance(layer, ReLU) and layer.act_quant is not None and layer.act_quant.learnable:
                mask.append(True)
        return mask

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def forward(self, batch: Tensor) -> Tensor:
        """
        前向传播并缓存中间结果

        Args:
            batch: [B, in_features]

        Returns:
            最后一层输出 [B, out_features]（末层为 Linear 时即 logits）
        """
        batch = np.asarray(batch, dtype=np.float64)
        if batch.ndim != 2 or batch.shape[1] != self.in_features:
            raise DimensionError("输入批次与第一层不匹配", expected=("B", self.in_features), actual=batch.shape)
        check_finite(batch, "输入批次")

        cache = ForwardCache(batch_shape=batch.shape, output_shape=())
        a = batch
        for layer in self.layers:
            if isinstance(layer, Linear):
                w = quantize(layer.weight_quant, layer.weight) if layer.weight_quant is not None else layer.weight
                cache.layers.append(_LinearCache(inputs=a, weight=w))
                a = a @ w
                if layer.bias is not None:
                    a = a + layer.bias
            elif isinstance(layer, ReLU):
                post = np.maximum(a, 0.0)
                cache.layers.append(_ReluCache(pre=a, post=post))
                node = layer.act_quant
                if node is not None:
                    if not node.initialized:
                        node.calibrate(post)
                        logger.debug(f"激活步长按首个批次校准: s={node.scale:.6g}")
                    a = quantize(node, post)
                else:
                    a = post
            else:
                a = softmax(a)
                cache.layers.append(_SoftmaxCache(probs=a))
        cache.output_shape = a.shape
        self._cache = cache
        return a

    def backward(self, upstream: Tensor) -> list[Tensor]:
        """
        基于最近一次前向缓存的反向传播

        Args:
            upstream: 对模型输出的梯度，形状与输出一致

        Returns:
            与 parameters() 一一对应、形状相同的梯度列表
        """
        if self._cache is None:
            raise ForwardCacheError("没有前向缓存，请先调用 forward")
        cache = self._cache
        g = np.asarray(upstream, dtype=np.float64)
        if g.shape != cache.output_shape:
            raise DimensionError("上游梯度形状与前向输出不一致", expected=cache.output_shape, actual=g.shape)

        per_layer: list[list[Tensor]] = [[] for _ in self.layers]
        for i in range(len(self.layers) - 1, -1, -1):
            layer, entry = self.layers[i], cache.layers[i]
            if isinstance(layer, Linear):
                grad_w_eff = entry.inputs.T @ g
                grads = []
                node = layer.weight_quant
                if node is not None:
                    grads.append(ste_backward(node, layer.weight, grad_w_eff))
                else:
                    grads.append(grad_w_eff)
                if layer.bias is not None:
                    grads.append(np.sum(g, axis=0))
                if node is not None and node.learnable:
                    grads.append(np.array([lsq_scale_grad(node, layer.weight, grad_w_eff)]))
                per_layer[i] = grads
                g = g @ entry.weight.T
            elif isinstance(layer, ReLU):
                node = layer.act_quant
                if node is not None:
                    if node.learnable:
                        per_layer[i] = [np.array([lsq_scale_grad(node, entry.post, g)])]
                    g = ste_backward(node, entry.post, g)
                g = g * (entry.pre > 0.0)
            else:
                p = entry.probs
                g = p * (g - np.sum(g * p, axis=1, keepdims=True))
        return [grad for grads in per_layer for grad in grads]

    def predict_proba(self, batch: Tensor) -> Tensor:
        """输出概率分布；末层已是 Softmax 时不重复归一化"""
        out = self.forward(batch)
        if isinstance(self.layers[-1], Softmax):
            return out
        return softmax(out)

    def calibrate_activations(self, batch: Tensor) -> None:
        """用给定数据重新校准所有可学习激活步长"""
        for layer in self.layers:
            if isinstance(layer, ReLU) and layer.act_quant is not None and layer.act_quant.learnable:
                layer.act_quant.initialized = False
        self.forward(batch)
        self._cache = None

    def clone(self) -> "Model":
        """深拷贝（不含前向缓存）"""
        cache, self._cache = self._cache, None
        try:
            return copy.deepcopy(self)
        finally:
            self._cache = cache

    def fingerprint(self) -> str:
        """参数与量化状态的 sha256 摘要"""
        digest = hashlib.sha256()
        for p in self.parameters():
            digest.update(np.ascontiguousarray(p, dtype="<f8").tobytes())
        for node in self.quant_nodes():
            digest.update(np.array([node.scale], dtype="<f8").tobytes())
        return digest.hexdigest()


def build_mlp(
    in_features: int,
    hidden: Sequence[int],
    classes: int,
    quant: Optional[QuantSpec] = None,
    seed: int = 0,
) -> Model:
    """
    构造 MLP: [Linear, ReLU] * len(hidden) + Linear

    权重 He 正态初始化，偏置为 0。量化配置决定权重/激活节点，
    可学习权重步长按初始权重校准，激活步长在首次训练前校准。
    """
    rng = np.random.default_rng(seed)
    widths = [in_features, *hidden, classes]
    layers: list[LayerKind] = []
    for i in range(len(widths) - 1):
        fan_in, fan_out = widths[i], widths[i + 1]
        weight = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
        weight_quant = None
        if quant is not None and quant.quantize_weights:
            weight_quant = QuantNode.from_spec(quant, init_from=weight)
        layers.append(Linear(weight=weight, bias=np.zeros(fan_out), weight_quant=weight_quant))
        if i < len(widths) - 2:
            act_quant = None
            if quant is not None and quant.quantize_activations:
                act_quant = QuantNode.from_spec(quant)
            layers.append(ReLU(act_quant=act_quant))
    return Model(layers)


# ==================== 损失与优化 ====================

def cross_entropy_loss(
    logits: Tensor,
    labels: np.ndarray,
    sample_weights: Optional[np.ndarray] = None,
) -> tuple[float, Tensor]:
    """
    加权交叉熵 loss = (1/B)·Σ α_i·(−log softmax(logits_i)[y_i])

    log 概率低于 log(1e-300) 时被截断到该值；梯度仍按未截断的 softmax 计算。

    Args:
        logits: [B, K]
        labels: [B] 整数标签，取值 [0, K)
        sample_weights: [B] 非负权重，缺省为全 1

    Returns:
        (标量损失, 对 logits 的梯度)
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2:
        raise DimensionError("logits 必须是二维", actual=logits.shape)
    batch, classes = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (batch,):
        raise DimensionError("标签长度与批次不符", expected=(batch,), actual=labels.shape)
    if batch and (labels.min() < 0 or labels.max() >= classes):
        raise LabelError(f"标签越界: 取值必须在 [0, {classes}) 内")
    labels = labels.astype(np.int64)
    if sample_weights is None:
        weights = np.ones(batch)
    else:
        weights = np.asarray(sample_weights, dtype=np.float64)
        if weights.shape != (batch,):
            raise SampleWeightError(f"样本权重形状错误: 期望 {(batch,)}, 实际 {weights.shape}")
        if np.any(weights < 0) or not np.all(np.isfinite(weights)):
            raise SampleWeightError("样本权重必须为非负有限数")

    log_probs = log_softmax(logits)
    rows = np.arange(batch)
    picked = np.maximum(log_probs[rows, labels], LOG_PROB_FLOOR)
    loss = float(np.sum(weights * -picked)) / batch

    grad = np.exp(log_probs)
    grad[rows, labels] -= 1.0
    grad *= (weights / batch)[:, None]
    return loss, grad


def sgd_step(model: Model, grads: Sequence[Tensor], learning_rate: float) -> Model:
    """
    原地更新 w ← w − η·g，随后把量化步长截断到正数

    Args:
        model: 待更新模型（潜在全精度权重）
        grads: 与 parameters() 对齐的梯度
        learning_rate: 本步学习率 η_t

    Returns:
        同一个模型对象
    """
    params = model.parameters()
    if len(grads) != len(params):
        raise DimensionError("梯度数量与参数数量不符", expected=len(params), actual=len(grads))
    for p, g in zip(params, grads):
        if p.shape != np.shape(g):
            raise DimensionError("梯度形状与参数不符", expected=p.shape, actual=np.shape(g))
    if learning_rate == 0.0:
        return model
    for p, g in zip(params, grads):
        p -= learning_rate * g
    for node in model.quant_nodes():
        if node.learnable:
            node.clamp_scale()
    return model


def grad_norm(grads: Sequence[Tensor]) -> float:
    """所有参数梯度拼接后的全局 L2 范数"""
    if not grads:
        return 0.0
    return float(np.linalg.norm(np.concatenate([np.ravel(g) for g in grads])))


def loss_gradients(
    model: Model,
    features: Tensor,
    labels: np.ndarray,
    sample_weights: Optional[np.ndarray] = None,
) -> tuple[float, list[Tensor]]:
    """整批前向+反向，返回 (平均损失, 参数梯度)"""
    logits = model.forward(features)
    loss, upstream = cross_entropy_loss(logits, labels, sample_weights)
    return loss, model.backward(upstream)


# ==================== 训练循环 ====================

GradTransform = Callable[[list[Tensor]], list[Tensor]]


def iterate_minibatches(count: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """每轮重新打乱后按批次产出下标"""
    order = rng.permutation(count)
    for start in range(0, count, batch_size):
        yield order[start:start + batch_size]


def train_epoch(
    model: Model,
    features: Tensor,
    labels: np.ndarray,
    learning_rate: float,
    batch_size: int,
    rng: np.random.Generator,
    sample_weights: Optional[np.ndarray] = None,
    grad_transform: Optional[GradTransform] = None,
) -> float:
    """
    一轮小批量 SGD

    Args:
        grad_transform: 可选的梯度变换（梯度上升取反、掩码、L1 次梯度等）

    Returns:
        本轮各批次损失的平均值
    """
    losses = []
    for idx in iterate_minibatches(len(labels), batch_size, rng):
        weights = None if sample_weights is None else sample_weights[idx]
        loss, grads = loss_gradients(model, features[idx], labels[idx], weights)
        if grad_transform is not None:
            grads = grad_transform(grads)
        sgd_step(model, grads, learning_rate)
        losses.append(loss)
        logger.debug(f"batch size={len(idx)} loss={loss:.6f}")
    return float(np.mean(losses)) if losses else 0.0


def fit(
    model: Model,
    features: Tensor,
    labels: np.ndarray,
    config: SgdConfig,
    sample_weights: Optional[np.ndarray] = None,
    on_epoch: Optional[Callable[[int, Model], None]] = None,
) -> Model:
    """
    按 SgdConfig 训练模型（原地），可学习激活步长在第一轮前用全部训练数据校准

    Args:
        on_epoch: 每轮训练开始前以 (轮次, 模型) 调用，用于记录诊断

    Returns:
        训练后的同一模型
    """
    rng = np.random.default_rng(config.seed)
    if any(node.learnable for node in model.quant_nodes()):
        model.calibrate_activations(features)
    for epoch in range(config.epochs):
        if on_epoch is not None:
            on_epoch(epoch, model)
        lr = learning_rate_at(config.learning_rate, config.schedule, epoch, config.epochs)
        loss = train_epoch(model, features, labels, lr, config.batch_size, rng, sample_weights)
        logger.info(f"训练轮次 {epoch + 1}/{config.epochs}: lr={lr:.5f}, loss={loss:.5f}")
    return model
