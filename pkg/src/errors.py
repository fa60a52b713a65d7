"""
异常定义模块

所有模块共用的异常层级。数值类问题同时继承 ValueError，调用方可以按需捕获。
"""

from typing import Optional


class QmulError(Exception):
    """本项目所有异常的基类"""


class DimensionError(QmulError, ValueError):
    """张量形状不匹配"""

    def __init__(self, message: str, expected: Optional[tuple] = None, actual: Optional[tuple] = None):
        self.expected = expected
        self.actual = actual
        if expected is not None or actual is not None:
            message = f"{message} (期望 {expected}, 实际 {actual})"
        super().__init__(message)


class NonFiniteError(QmulError, ValueError):
    """张量中出现 NaN 或 Inf"""


class LabelError(QmulError, ValueError):
    """标签越界或类别数不足"""


class SampleWeightError(QmulError, ValueError):
    """样本权重为负或形状不符"""


class EmptySetError(QmulError, ValueError):
    """评估集、校准集或梯度子集为空"""


class QuantizationError(QmulError, ValueError):
    """量化配置或调用方式错误"""


class DatasetError(QmulError, ValueError):
    """数据集构造或读取失败"""


class CsvParseError(DatasetError):
    """CSV 行解析失败，携带行号"""

    def __init__(self, message: str, line_number: int):
        self.line_number = line_number
        super().__init__(f"第 {line_number} 行: {message}")


class SplitError(QmulError, ValueError):
    """遗忘/保留划分失败"""


class ConfigError(QmulError, ValueError):
    """实验配置无效"""


class CheckpointError(QmulError, ValueError):
    """检查点读写失败"""


class BadMagicError(CheckpointError):
    """检查点魔数不匹配"""


class VersionMismatchError(CheckpointError):
    """检查点格式版本不受支持"""


class TruncatedCheckpointError(CheckpointError):
    """检查点文件被截断"""


class ForwardCacheError(QmulError, RuntimeError):
    """在没有前向缓存的情况下调用了反向传播"""
