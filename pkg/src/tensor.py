"""
张量基础模块

Tensor 就是 float64 的 numpy 数组。这里只负责构造时的校验：
形状与数据长度一致、所有元素有限。
"""

from typing import Optional, Sequence, Union

import numpy as np
import numpy.typing as npt

from src.errors import DimensionError, NonFiniteError

Tensor = npt.NDArray[np.float64]

ArrayLike = Union[Tensor, Sequence, float, int]


def tensor(data: ArrayLike, shape: Optional[Sequence[int]] = None) -> Tensor:
    """
    构造并校验张量

    Args:
        data: 任意可转换为数组的数据；给定 shape 时按行优先展开的扁平数据
        shape: 可选的目标形状，各维必须为正

    Returns:
        float64 数组（总是新拷贝）

    Raises:
        DimensionError: shape 与数据长度不一致或含非正维度
        NonFiniteError: 含 NaN/Inf
    """
    array = np.array(data, dtype=np.float64)
    if shape is not None:
        shape = tuple(int(extent) for extent in shape)
        if any(extent < 1 for extent in shape):
            raise DimensionError("张量各维必须为正", expected="正整数维度", actual=shape)
        if int(np.prod(shape)) != array.size:
            raise DimensionError("数据长度与形状不符", expected=int(np.prod(shape)), actual=array.size)
        array = array.reshape(shape)
    check_finite(array)
    return array


def check_finite(array: Tensor, name: str = "张量") -> None:
    """拒绝 NaN/Inf"""
    if not np.all(np.isfinite(array)):
        bad = int(np.count_nonzero(~np.isfinite(array)))
        raise NonFiniteError(f"{name}含 {bad} 个非有限元素")
