"""
运行归档模块

以结果目录为单位保存一次实验的全部产物，可追溯、可重新加载。

目录结构:
    <run_dir>/
        config.json            实验配置（规范 JSON）
        run.json               RunRecord（不含时间戳）
        metadata.json          时间戳与依赖版本（唯一允许变化的文件）
        results.csv            对比表（机器可读，结果以此为准）
        report.md              对比表（人读）
        ratio.svg              逐轮 G_f/G_r 曲线
        alignment.csv          原始模型上的标签梯度方向诊断
        diagnostics/<row>.csv  逐轮梯度诊断
        checkpoints/<row>.qmul 模型检查点
"""

import json
import logging
import os
import platform
from dataclasses import dataclass, field
from datetime import datetime
from importlib import metadata
from pathlib import Path
from typing import Optional, Union

from src.config import ExperimentConfig, config_hash, load_config, sanitize_name, save_config
from src.metrics import GapReport, MetricsReport

logger = logging.getLogger(__name__)

RECORD_FILE = "run.json"
CONFIG_FILE = "config.json"
METADATA_FILE = "metadata.json"
RESULTS_FILE = "results.csv"
REPORT_FILE = "report.md"
RATIO_PLOT_FILE = "ratio.svg"
ALIGNMENT_FILE = "alignment.csv"
SUMMARY_FILE = "summary.csv"

_TRACKED_PACKAGES = ("numpy", "pandas", "pydantic", "matplotlib", "scikit-learn")


@dataclass
class MethodRow:
    """对比表中的一行：一个方法在一个精度下的结果"""
    name: str
    method: str
    precision: str
    status: str = "ok"  # ok, failed
    metrics: Optional[MetricsReport] = None
    gaps: Optional[GapReport] = None
    checkpoint: Optional[str] = None
    diagnostics_path: Optional[str] = None
    error: str = ""

    @property
    def failed(self) -> bool:
        return self.status == "failed"

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "method": self.method,
            "precision": self.precision,
            "status": self.status,
            "metrics": self.metrics.to_dict() if self.metrics else None,
            "gaps": self.gaps.to_dict() if self.gaps else None,
            "checkpoint": self.checkpoint,
            "diagnostics_path": self.diagnostics_path,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MethodRow":
        return cls(
            name=data["name"],
            method=data.get("method", ""),
            precision=data.get("precision", "quantized"),
            status=data.get("status", "ok"),
            metrics=MetricsReport.from_dict(data["metrics"]) if data.get("metrics") else None,
            gaps=GapReport.from_dict(data["gaps"]) if data.get("gaps") else None,
            checkpoint=data.get("checkpoint"),
            diagnostics_path=data.get("diagnostics_path"),
            error=data.get("error", ""),
        )


@dataclass
class RunRecord:
    """一次实验的结果记录"""
    config_hash: str
    seed: int
    rows: list[MethodRow] = field(default_factory=list)
    alignment_path: Optional[str] = None

    @property
    def failed_rows(self) -> list[MethodRow]:
        return [row for row in self.rows if row.failed]

    def row(self, name: str) -> Optional[MethodRow]:
        for row in self.rows:
            if row.name == name:
                return row
        return None

    def to_dict(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "seed": self.seed,
            "rows": [row.to_dict() for row in self.rows],
            "alignment_path": self.alignment_path,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RunRecord":
        return cls(
            config_hash=data["config_hash"],
            seed=int(data["seed"]),
            rows=[MethodRow.from_dict(row) for row in data.get("rows", [])],
            alignment_path=data.get("alignment_path"),
        )


class RunStore:
    """单个结果目录的读写"""

    def __init__(self, run_dir: Union[str, Path]):
        self.run_dir = Path(run_dir)

    def prepare(self, config: ExperimentConfig) -> None:
        """创建目录结构并写入 config.json"""
        (self.run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        (self.run_dir / "diagnostics").mkdir(parents=True, exist_ok=True)
        save_config(config, self.run_dir / CONFIG_FILE)
        logger.info(f"结果目录: {self.run_dir}")

    def path(self, name: str) -> Path:
        return self.run_dir / name

    def checkpoint_path(self, row_name: str) -> Path:
        return self.run_dir / "checkpoints" / f"{sanitize_name(row_name)}.qmul"

    def diagnostics_path(self, row_name: str) -> Path:
        return self.run_dir / "diagnostics" / f"{sanitize_name(row_name)}.csv"

    def relative(self, path: Path) -> str:
        """相对结果目录的路径（统一用 /，保证 run.json 与平台无关）"""
        return Path(os.path.relpath(path, self.run_dir)).as_posix()

    def load_config(self) -> ExperimentConfig:
        return load_config(self.run_dir / CONFIG_FILE)

    def save_record(self, record: RunRecord) -> Path:
        """写入 run.json"""
        target = self.run_dir / RECORD_FILE
        with open(target, "w", encoding="utf-8") as f:
            json.dump(record.to_dict(), f, ensure_ascii=False, indent=2, sort_keys=True)
            f.write("\n")
        return target

    def load_record(self) -> Optional[RunRecord]:
        """读取 run.json，不存在或损坏时返回 None"""
        target = self.run_dir / RECORD_FILE
        if not target.exists():
            return None
        try:
            with open(target, "r", encoding="utf-8") as f:
                return RunRecord.from_dict(json.load(f))
        except (json.JSONDecodeError, KeyError, OSError) as e:
            logger.warning(f"无法读取 {target}: {e}")
            return None

    def write_metadata(self, config: ExperimentConfig, started_at: datetime, stage: str) -> Path:
        """写入时间戳与依赖版本，只有这个文件在重跑之间会变化"""
        versions = {"python": platform.python_version()}
        for package in _TRACKED_PACKAGES:
            try:
                versions[package] = metadata.version(package)
            except metadata.PackageNotFoundError:
                versions[package] = "unknown"
        target = self.run_dir / METADATA_FILE
        with open(target, "w", encoding="utf-8") as f:
            json.dump({
                "stage": stage,
                "config_hash": config_hash(config),
                "started_at": started_at.isoformat(),
                "finished_at": datetime.now().isoformat(),
                "versions": versions,
            }, f, ensure_ascii=False, indent=2)
        return target

    @staticmethod
    def list_runs(root: Union[str, Path]) -> list["RunStore"]:
        """列出 root 下（含 root 本身）所有带 run.json 的结果目录"""
        root = Path(root)
        if not root.exists():
            return []
        found = sorted({path.parent for path in root.rglob(RECORD_FILE)})
        return [RunStore(path) for path in found]
