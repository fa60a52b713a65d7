"""
伪量化模块

实现 n 比特有符号对称伪量化节点：前向 quantize-dequantize，反向直通估计器 (STE)，
以及可学习步长 (LSQ 风格) 的步长梯度。所有量化都是模拟量化，数值仍以 float64 存储。
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.errors import DimensionError, EmptySetError, QuantizationError
from src.tensor import Tensor, check_finite

logger = logging.getLogger(__name__)

# 可学习步长在每次更新后的下限
MIN_SCALE = 1e-8


class QuantSpec(BaseModel):
    """单个张量的伪量化配置，对应实验 JSON 中的 quant 字段"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    bits: int = Field(4, ge=2, le=8)
    scale_mode: Literal["fixed", "lsq"] = "lsq"
    scale: Optional[float] = Field(None, gt=0)
    target: Literal["weights", "activations", "both"] = "both"

    @model_validator(mode="after")
    def _check_scale(self) -> "QuantSpec":
        if self.scale_mode == "fixed" and self.scale is None:
            raise ValueError("scale_mode=fixed 时必须给出 scale")
        return self

    @property
    def quantize_weights(self) -> bool:
        return self.target in ("weights", "both")

    @property
    def quantize_activations(self) -> bool:
        return self.target in ("activations", "both")


def grid_bounds(bits: int) -> tuple[int, int]:
    """
    有符号整数网格边界

    Returns:
        (Q_N, Q_P)，其中 Q_N = 2^{n-1}，Q_P = 2^{n-1} - 1
    """
    if not 2 <= bits <= 8:
        raise QuantizationError(f"比特数必须在 [2, 8] 内: {bits}")
    q_n = 2 ** (bits - 1)
    return q_n, q_n - 1


@dataclass
class QuantNode:
    """
    伪量化节点状态

    scale_param 是长度为 1 的数组：可学习模式下它作为模型参数参与 SGD 更新，
    原地修改即可反映到节点上。
    """
    spec: QuantSpec
    scale_param: Tensor = field(default_factory=lambda: np.ones(1))
    initialized: bool = False

    @classmethod
    def from_spec(cls, spec: QuantSpec, init_from: Optional[Tensor] = None) -> "QuantNode":
        """按配置创建节点；固定步长直接就绪，可学习步长可用 init_from 校准初值"""
        if spec.scale_mode == "fixed":
            return cls(spec=spec, scale_param=np.array([float(spec.scale)]), initialized=True)
        node = cls(spec=spec)
        if init_from is not None:
            node.calibrate(init_from)
        return node

    @property
    def bits(self) -> int:
        return self.spec.bits

    @property
    def q_n(self) -> int:
        return grid_bounds(self.spec.bits)[0]

    @property
    def q_p(self) -> int:
        return grid_bounds(self.spec.bits)[1]

    @property
    def scale(self) -> float:
        return float(self.scale_param[0])

    @property
    def learnable(self) -> bool:
        return self.spec.scale_mode == "lsq"

    def calibrate(self, x: Tensor) -> None:
        """用数据最大绝对值初始化步长"""
        self.scale_param[0] = calibrate_scale(x, self.spec.bits)
        self.initialized = True

    def clamp_scale(self) -> None:
        """保证 s > 0"""
        if self.scale_param[0] < MIN_SCALE:
            self.scale_param[0] = MIN_SCALE

    def to_dict(self) -> dict:
        """检查点清单条目；步长本身写在二进制负载里"""
        return {"spec": self.spec.model_dump(mode="json"), "initialized": self.initialized}

    @classmethod
    def from_dict(cls, data: dict, scale: float) -> "QuantNode":
        """由清单条目与负载中的步长恢复节点"""
        return cls(
            spec=QuantSpec.model_validate(data["spec"]),
            scale_param=np.array([scale], dtype=np.float64),
            initialized=bool(data["initialized"]),
        )


def _scaled(node: QuantNode, x: Tensor) -> Tensor:
    s = node.scale
    if not s > 0:
        raise QuantizationError(f"步长必须为正: {s}")
    return x / s


def quantize(node: QuantNode, x: Tensor) -> Tensor:
    """
    伪量化前向: s · round(clamp(x / s, -Q_N, Q_P))

    round 为四舍六入五成双 (np.round)。

    Args:
        node: 量化节点
        x: 输入张量

    Returns:
        与 x 同形状的量化-反量化结果
    """
    check_finite(x, "量化输入")
    v = _scaled(node, x)
    return node.scale * np.round(np.clip(v, -node.q_n, node.q_p))


def ste_mask(node: QuantNode, x: Tensor) -> np.ndarray:
    """x / s 落在 [-Q_N, Q_P] 内的元素为 True"""
    v = _scaled(node, x)
    return (v >= -node.q_n) & (v <= node.q_p)


def ste_backward(node: QuantNode, x: Tensor, upstream: Tensor) -> Tensor:
    """
    直通估计器反向: 区间内梯度原样通过，区间外为 0

    Args:
        node: 量化节点
        x: 前向时的输入（未量化）
        upstream: 对量化输出的梯度

    Returns:
        对 x 的梯度
    """
    if x.shape != upstream.shape:
        raise DimensionError("STE 输入与上游梯度形状不一致", expected=x.shape, actual=upstream.shape)
    return np.where(ste_mask(node, x), upstream, 0.0)


def calibrate_scale(x: Tensor, bits: int) -> float:
    """
    步长校准: s = max|x| / (2^{n-1} - 1)，全零输入时 s = 1

    Args:
        x: 非空张量
        bits: 比特数

    Returns:
        正的步长
    """
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise EmptySetError("无法用空张量校准步长")
    _, q_p = grid_bounds(bits)
    peak = float(np.max(np.abs(x)))
    if peak == 0.0:
        return 1.0
    return peak / q_p


def lsq_scale_grad(node: QuantNode, x: Tensor, upstream: Tensor) -> float:
    """
    可学习步长的梯度

    每个元素的局部导数: 区间内为 round(x/s) - x/s，下溢为 -Q_N，上溢为 Q_P；
    按上游梯度加权求和后乘以 1/sqrt(numel · Q_P)。

    Raises:
        QuantizationError: 节点为固定步长
    """
    if not node.learnable:
        raise QuantizationError("固定步长节点没有步长梯度")
    if x.shape != upstream.shape:
        raise DimensionError("LSQ 输入与上游梯度形状不一致", expected=x.shape, actual=upstream.shape)
    v = _scaled(node, x)
    q_n, q_p = node.q_n, node.q_p
    local = np.where(v < -q_n, float(-q_n), np.where(v > q_p, float(q_p), np.round(v) - v))
    return float(np.sum(upstream * local)) / math.sqrt(x.size * q_p)
