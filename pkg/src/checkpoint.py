"""
检查点模块

模型的版本化二进制容器，逐位精确往返。

文件格式（全部小端）:
    magic           8 字节  b"QMULCKPT"
    version         u16     当前为 1
    manifest_len    u32     清单 JSON 的字节数
    manifest        UTF-8 JSON（键排序、紧凑分隔符），描述层序列与负载长度
    payload         float64 序列，按层依次为:
                    Linear: weight（行优先 [in, out]）、bias（若有）、权重步长（若有量化节点）
                    ReLU:   激活步长（若有量化节点）

清单示例:
    {"layers": [{"bias": true, "in_features": 8, "kind": "linear", "out_features": 32,
                 "weight_quant": {"initialized": true, "spec": {...}}},
                {"act_quant": null, "kind": "relu"}, ...],
     "payload_count": 1477}
"""

import json
import logging
import struct
from pathlib import Path
from typing import Optional, Union

import numpy as np

from src.errors import BadMagicError, CheckpointError, TruncatedCheckpointError, VersionMismatchError
from src.nn_core import LayerKind, Linear, Model, ReLU, Softmax
from src.quant import QuantNode

logger = logging.getLogger(__name__)

MAGIC = b"QMULCKPT"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sHI")
_REAL = np.dtype("<f8")


def _node_entry(node: Optional[QuantNode]) -> Optional[dict]:
    return None if node is None else node.to_dict()


def encode_checkpoint(model: Model) -> bytes:
    """把模型编码为检查点字节串"""
    layers: list[dict] = []
    chunks: list[np.ndarray] = []
    for layer in model.layers:
        if isinstance(layer, Linear):
            layers.append({
                "kind": "linear",
                "in_features": layer.in_features,
                "out_features": layer.out_features,
                "bias": layer.has_bias,
                "weight_quant": _node_entry(layer.weight_quant),
            })
            chunks.append(np.ravel(layer.weight))
            if layer.bias is not None:
                chunks.append(layer.bias)
            if layer.weight_quant is not None:
                chunks.append(layer.weight_quant.scale_param)
        elif isinstance(layer, ReLU):
            layers.append({"kind": "relu", "act_quant": _node_entry(layer.act_quant)})
            if layer.act_quant is not None:
                chunks.append(layer.act_quant.scale_param)
        else:
            layers.append({"kind": "softmax"})

    payload = np.concatenate(chunks).astype(_REAL) if chunks else np.zeros(0, dtype=_REAL)
    manifest = json.dumps(
        {"layers": layers, "payload_count": int(payload.size)},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    return _HEADER.pack(MAGIC, FORMAT_VERSION, len(manifest)) + manifest + payload.tobytes()


def decode_checkpoint(data: bytes) -> Model:
    """
    从字节串恢复模型

    Raises:
        BadMagicError: 魔数不匹配
        VersionMismatchError: 版本不受支持
        TruncatedCheckpointError: 文件长度不足
        CheckpointError: 清单损坏或负载长度不符
    """
    if len(data) < len(MAGIC):
        raise TruncatedCheckpointError(f"检查点只有 {len(data)} 字节")
    if data[:len(MAGIC)] != MAGIC:
        raise BadMagicError(f"魔数不匹配: {data[:len(MAGIC)]!r}")
    if len(data) < _HEADER.size:
        raise TruncatedCheckpointError("检查点头部不完整")
    _, version, manifest_len = _HEADER.unpack_from(data)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"不支持的检查点版本 {version}（当前 {FORMAT_VERSION}）")
    body_start = _HEADER.size + manifest_len
    if len(data) < body_start:
        raise TruncatedCheckpointError("检查点清单不完整")
    try:
        manifest = json.loads(data[_HEADER.size:body_start].decode("utf-8"))
        entries = manifest["layers"]
        count = int(manifest["payload_count"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"检查点清单损坏: {e}") from e

    expected = body_start + count * _REAL.itemsize
    if len(data) < expected:
        raise TruncatedCheckpointError(f"负载不完整: 期望 {expected} 字节，实际 {len(data)}")
    if len(data) > expected:
        raise CheckpointError(f"检查点末尾有 {len(data) - expected} 个多余字节")
    payload = np.frombuffer(data, dtype=_REAL, count=count, offset=body_start).astype(np.float64)

    cursor = 0

    def _take(size: int) -> np.ndarray:
        nonlocal cursor
        if cursor + size > payload.size:
            raise CheckpointError("清单描述的参数多于负载")
        chunk = payload[cursor:cursor + size].copy()
        cursor += size
        return chunk

    layers: list[LayerKind] = []
    try:
        for entry in entries:
            kind = entry["kind"]
            if kind == "linear":
                shape = (int(entry["in_features"]), int(entry["out_features"]))
                weight = _take(shape[0] * shape[1]).reshape(shape)
                bias = _take(shape[1]) if entry["bias"] else None
                node = None
                if entry["weight_quant"] is not None:
                    node = QuantNode.from_dict(entry["weight_quant"], float(_take(1)[0]))
                layers.append(Linear(weight=weight, bias=bias, weight_quant=node))
            elif kind == "relu":
                node = None
                if entry["act_quant"] is not None:
                    node = QuantNode.from_dict(entry["act_quant"], float(_take(1)[0]))
                layers.append(ReLU(act_quant=node))
            elif kind == "softmax":
                layers.append(Softmax())
            else:
                raise CheckpointError(f"未知的层类型: {kind}")
    except CheckpointError:
        raise
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"检查点清单损坏: {e}") from e
    if cursor != payload.size:
        raise CheckpointError(f"负载中有 {payload.size - cursor} 个未使用的数值")
    return Model(layers)


def save_checkpoint(model: Model, path: Union[str, Path]) -> Path:
    """写入检查点文件，返回路径"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(model))
    logger.debug(f"检查点已保存: {path}")
    return path


def load_checkpoint(path: Union[str, Path]) -> Model:
    """读取检查点文件"""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"无法读取检查点 {path}: {e}") from e
    return decode_checkpoint(data)
