"""
实验配置模块

负责实验 JSON 配置的读取、校验、保存，以及内容哈希、种子派生、超参数网格展开。
"""

import hashlib
import itertools
import json
import logging
import os
from pathlib import Path
from typing import Literal, Optional, Sequence, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from src.data import SplitSpec
from src.errors import ConfigError
from src.nn_core import U64_MAX, SgdConfig
from src.quant import QuantSpec
from src.unlearn import UnlearnConfig

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

# 不参与内容哈希的字段（只影响输出位置与并发度，不影响结果）
HASH_EXCLUDED_FIELDS = {"output_dir", "workers"}

# 网格中不允许展开的字段
_GRID_RESERVED = {"method", "name", "grid"}


class DatasetSpec(BaseModel):
    """
    数据来源

    blobs: 合成高斯团（classes / per_class / dim / spread / test_per_class）
    csv: 从 path 读取训练数据，测试集来自 test_path 或按 test_fraction 切分
    """
    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: Literal["blobs", "csv"] = "blobs"
    classes: int = Field(5, ge=2)
    per_class: int = Field(500, ge=1)
    dim: int = Field(8, ge=1)
    spread: float = Field(0.3, ge=0)
    test_per_class: Optional[int] = Field(None, ge=1)
    path: Optional[str] = None
    header: bool = False
    test_path: Optional[str] = None
    test_fraction: Optional[float] = Field(None, gt=0, lt=1)

    @model_validator(mode="after")
    def _check_source(self) -> "DatasetSpec":
        if self.kind == "blobs" and self.dim < self.classes:
            raise ValueError(f"dim ({self.dim}) 不能小于 classes ({self.classes})")
        if self.kind == "csv":
            if not self.path:
                raise ValueError("kind=csv 时必须给出 path")
            if (self.test_path is None) == (self.test_fraction is None):
                raise ValueError("kind=csv 时 test_path 与 test_fraction 必须恰好给出一个")
        return self


class ModelSpec(BaseModel):
    """MLP 结构：隐藏层宽度与量化配置（quant 为空即全精度）"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    hidden: list[int] = Field(default_factory=lambda: [32, 32])
    quant: Optional[QuantSpec] = Field(default_factory=QuantSpec)

    @model_validator(mode="after")
    def _check_hidden(self) -> "ModelSpec":
        if any(width < 1 for width in self.hidden):
            raise ValueError(f"隐藏层宽度必须为正: {self.hidden}")
        return self


Precision = Literal["quantized", "float"]


class ExperimentConfig(BaseModel):
    """完整的实验配置，对应一个 JSON 文件"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    schema_version: Literal[1] = SCHEMA_VERSION
    dataset: DatasetSpec = Field(default_factory=DatasetSpec)
    model: ModelSpec = Field(default_factory=ModelSpec)
    train: SgdConfig = Field(default_factory=SgdConfig)
    split: SplitSpec = Field(default_factory=lambda: SplitSpec(mode="random", fraction=0.1))
    methods: list[UnlearnConfig] = Field(default_factory=list)
    precisions: list[Precision] = Field(default_factory=lambda: ["quantized"])
    output_dir: str = "runs/default"
    seed: int = Field(0, ge=0, lt=U64_MAX)
    workers: int = Field(1, ge=1)
    mia_calibration_min: int = Field(50, ge=1)

    @model_validator(mode="after")
    def _check_precisions(self) -> "ExperimentConfig":
        if not self.precisions:
            raise ValueError("precisions 不能为空")
        if len(set(self.precisions)) != len(self.precisions):
            raise ValueError(f"precisions 有重复: {self.precisions}")
        if "quantized" in self.precisions and self.model.quant is None:
            raise ValueError("precisions 包含 quantized 时 model.quant 不能为空")
        return self

    def is_valid(self) -> tuple[bool, str]:
        """检查结果目录是否可写、方法名是否唯一"""
        try:
            expand_methods(self.methods)
        except ConfigError as e:
            return False, str(e)
        target = Path(self.output_dir).resolve()
        probe = target
        while not probe.exists():
            probe = probe.parent
        if not probe.is_dir() or not os.access(probe, os.W_OK):
            return False, f"结果目录不可写: {target}"
        return True, ""


# ==================== 读写 ====================

def _describe(error: ValidationError) -> str:
    parts = []
    for item in error.errors():
        location = ".".join(str(part) for part in item["loc"]) or "<root>"
        parts.append(f"{location}: {item['msg']}")
    return "; ".join(parts)


def parse_config(data: Union[dict, str]) -> ExperimentConfig:
    """从字典或 JSON 文本构造配置"""
    try:
        if isinstance(data, str):
            return ExperimentConfig.model_validate_json(data)
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"配置无效: {_describe(e)}") from e


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    """
    读取实验配置文件

    Raises:
        ConfigError: 文件不存在、JSON 语法错误或字段不合法（消息中包含文件路径）
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"{path}: 无法读取配置文件 ({e})") from e
    try:
        config = parse_config(text)
    except ConfigError as e:
        raise ConfigError(f"{path}: {e}") from e
    logger.info(f"已加载配置 {path} (hash={config_hash(config)[:12]})")
    return config


def canonical_json(config: ExperimentConfig, indent: Optional[int] = None) -> str:
    """按键排序的规范 JSON"""
    payload = config.model_dump(mode="json")
    if indent is None:
        return json.dumps(payload, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return json.dumps(payload, sort_keys=True, indent=indent, ensure_ascii=False)


def save_config(config: ExperimentConfig, path: Union[str, Path]) -> None:
    """保存为缩进 2 的规范 JSON"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(canonical_json(config, indent=2) + "\n", encoding="utf-8")


def config_hash(config: ExperimentConfig) -> str:
    """结果相关字段的 sha256 内容摘要（不含 output_dir 与 workers）"""
    payload = config.model_dump(mode="json", exclude=HASH_EXCLUDED_FIELDS)
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def derive_seed(global_seed: int, label: str) -> int:
    """由全局种子与标签派生 u64 子种子（blake2b 取 8 字节，小端）"""
    digest = hashlib.blake2b(f"{global_seed}:{label}".encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


# ==================== 方法列表 ====================

_INVALID_NAME_CHARS = ['<', '>', ':', '"', '/', '\\', '|', '?', '*', '[', ']', '=', ',', '@', ' ']


def sanitize_name(name: str) -> str:
    """把行名转成可用作文件名的形式"""
    result = name.strip()
    for char in _INVALID_NAME_CHARS:
        result = result.replace(char, '_')
    return result.strip('_') or "unnamed"


def check_unique_names(names: Sequence[str]) -> None:
    """
    行名及其文件名形式都必须唯一

    Raises:
        ConfigError: 行名重复，或不同行名清洗后对应同一个文件名
    """
    duplicates = sorted({name for name in names if names.count(name) > 1})
    if duplicates:
        raise ConfigError(f"方法行名重复: {duplicates}，请用 name 区分")
    owners: dict[str, str] = {}
    for name in names:
        file_name = sanitize_name(name)
        if file_name in owners:
            raise ConfigError(f"行名 {owners[file_name]!r} 与 {name!r} 对应同一个文件名 {file_name!r}，请用 name 区分")
        owners[file_name] = name


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def expand_methods(methods: Sequence[UnlearnConfig]) -> list[UnlearnConfig]:
    """
    展开超参数网格

    每个带 grid 的方法按字段的笛卡尔积展开，行名为 NAME[field=value,...]；
    字段顺序与 grid 中的书写顺序一致。

    Raises:
        ConfigError: grid 字段非法、取值校验失败，或展开后行名（含文件名形式）重复
    """
    expanded: list[UnlearnConfig] = []
    for config in methods:
        if not config.grid:
            expanded.append(config)
            continue
        keys = list(config.grid)
        bad = [key for key in keys if key in _GRID_RESERVED or key not in UnlearnConfig.model_fields]
        if bad:
            raise ConfigError(f"{config.display_name}: grid 中不能包含字段 {bad}")
        for values in itertools.product(*(config.grid[key] for key in keys)):
            overrides = dict(zip(keys, values))
            label = ",".join(f"{key}={_format_value(value)}" for key, value in overrides.items())
            data = config.model_dump()
            data.update(overrides)
            data.update(grid=None, name=f"{config.display_name}[{label}]")
            try:
                expanded.append(UnlearnConfig.model_validate(data))
            except ValidationError as e:
                raise ConfigError(f"{config.display_name}: 网格取值无效: {_describe(e)}") from e

    check_unique_names([config.display_name for config in expanded])
    return expanded


def with_overrides(
    config: ExperimentConfig,
    seed: Optional[int] = None,
    out: Optional[str] = None,
    methods: Optional[Sequence[str]] = None,
    header: bool = False,
) -> ExperimentConfig:
    """
    应用命令行覆盖项

    Args:
        seed: 新的全局种子
        out: 新的结果目录
        methods: 只保留这些方法（按 method 或 name 匹配）
        header: CSV 数据首行为表头
    """
    update: dict = {}
    if header:
        update["dataset"] = config.dataset.model_copy(update={"header": True})
    if seed is not None:
        if not 0 <= seed < U64_MAX:
            raise ConfigError(f"种子必须是 u64: {seed}")
        update["seed"] = seed
    if out is not None:
        update["output_dir"] = out
    if methods is not None:
        wanted = [name.strip() for name in methods if name.strip()]
        known = {m.method for m in config.methods} | {m.display_name for m in config.methods}
        unknown = [name for name in wanted if name not in known and name != "retrain"]
        if unknown:
            raise ConfigError(f"配置中没有这些方法: {unknown}")
        update["methods"] = [m for m in config.methods if m.method in wanted or m.display_name in wanted]
    return config.model_copy(update=update)
