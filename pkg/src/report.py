"""
报告输出模块

对比表（Markdown + CSV）、逐轮诊断 CSV、G_f/G_r 折线图 (SVG) 与多种子汇总。
CSV 是结果的唯一依据，Markdown 与 SVG 仅供阅读。
"""

import logging
import math
from pathlib import Path
from typing import Optional, Sequence, Union

import matplotlib
import numpy as np
import pandas as pd
from matplotlib.figure import Figure

from src.metrics import EpochDiagnostic
from src.run_store import (
    RATIO_PLOT_FILE,
    REPORT_FILE,
    RESULTS_FILE,
    MethodRow,
    RunRecord,
    RunStore,
)

logger = logging.getLogger(__name__)

RESULT_COLUMNS = ["method", "fa", "ra", "ta", "mia", "ag", "gap_fa", "gap_ra", "gap_ta", "gap_mia"]
DIAGNOSTIC_COLUMNS = ["epoch", "g_f", "g_r", "ratio", "alpha_f", "alpha_r"]
SUMMARY_COLUMNS = ["method", "runs", "median_ag", "median_fa", "median_ra", "median_ta", "median_mia"]
ALIGNMENT_COLUMNS = ["sample", "cos_sl", "cos_rl", "degenerate"]

_TABLE_HEADER = "| Method | FA | RA | TA | MIA | AG |"
_TABLE_DELIMITER = "|--------|----|----|----|-----|----|"

# SVG 元素 id 的哈希盐
_SVG_HASH_SALT = "qmul-ratio"


# ==================== 对比表 ====================

def format_cell(value: float, gap: Optional[float]) -> str:
    """两位小数，差距加括号: 75.71 (0.95)"""
    if gap is None:
        return f"{value:.2f}"
    return f"{value:.2f} ({gap:.2f})"


def _markdown_row(row: MethodRow) -> str:
    if row.failed or row.metrics is None:
        reason = row.error.splitlines()[0] if row.error else "failed"
        return f"| {row.name} | failed | - | - | - | {reason} |"
    m, g = row.metrics, row.gaps
    cells = [
        format_cell(m.fa, g.gap_fa if g else None),
        format_cell(m.ra, g.gap_ra if g else None),
        format_cell(m.ta, g.gap_ta if g else None),
        format_cell(m.mia, g.gap_mia if g else None),
        f"{g.ag:.2f}" if g else "-",
    ]
    return f"| {row.name} | " + " | ".join(cells) + " |"


def to_markdown_table(rows: Sequence[MethodRow]) -> str:
    """转换为 Markdown 表格（列顺序 FA、RA、TA、MIA、AG）"""
    lines = [_TABLE_HEADER, _TABLE_DELIMITER]
    lines.extend(_markdown_row(row) for row in rows)
    return "\n".join(lines)


def results_frame(rows: Sequence[MethodRow]) -> pd.DataFrame:
    """结果表；失败行只保留方法名，其余列为空"""
    records = []
    for row in rows:
        entry = {"method": row.name}
        if row.metrics is not None and not row.failed:
            entry.update(fa=row.metrics.fa, ra=row.metrics.ra, ta=row.metrics.ta, mia=row.metrics.mia)
        if row.gaps is not None and not row.failed:
            entry.update(row.gaps.to_dict())
        records.append(entry)
    return pd.DataFrame.from_records(records, columns=RESULT_COLUMNS)


def write_results_csv(rows: Sequence[MethodRow], path: Union[str, Path]) -> Path:
    path = Path(path)
    results_frame(rows).to_csv(path, index=False, lineterminator="\n")
    return path


def read_results_csv(path: Union[str, Path]) -> pd.DataFrame:
    return pd.read_csv(path)


# ==================== 逐轮诊断 ====================

def diagnostics_frame(diagnostics: Sequence[EpochDiagnostic]) -> pd.DataFrame:
    return pd.DataFrame.from_records([d.to_dict() for d in diagnostics], columns=DIAGNOSTIC_COLUMNS)


def write_diagnostics_csv(diagnostics: Sequence[EpochDiagnostic], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    diagnostics_frame(diagnostics).to_csv(path, index=False, lineterminator="\n")
    return path


def read_diagnostics_csv(path: Union[str, Path]) -> list[EpochDiagnostic]:
    """读回诊断 CSV（ratio 列中的 inf 原样恢复）"""
    frame = pd.read_csv(path, float_precision="round_trip")
    missing = [column for column in DIAGNOSTIC_COLUMNS if column not in frame.columns]
    if missing:
        raise ValueError(f"诊断文件缺少列 {missing}: {path}")
    return [EpochDiagnostic.from_dict(record) for record in frame.to_dict(orient="records")]


def write_alignment_csv(
    samples: np.ndarray,
    cos_sl: np.ndarray,
    cos_rl: np.ndarray,
    degenerate: np.ndarray,
    path: Union[str, Path],
) -> Path:
    path = Path(path)
    frame = pd.DataFrame({
        "sample": np.asarray(samples, dtype=np.int64),
        "cos_sl": cos_sl,
        "cos_rl": cos_rl,
        "degenerate": np.asarray(degenerate, dtype=bool),
    }, columns=ALIGNMENT_COLUMNS)
    frame.to_csv(path, index=False, lineterminator="\n")
    return path


# ==================== 图 ====================

def plot_ratio(series: dict[str, Sequence[EpochDiagnostic]], path: Union[str, Path]) -> Path:
    """
    逐轮 G_f/G_r 折线图

    Args:
        series: 行名 → 该行的逐轮诊断；无穷大的比值不画出
        path: 输出 SVG 路径
    """
    path = Path(path)
    with matplotlib.rc_context({"svg.hashsalt": _SVG_HASH_SALT, "svg.fonttype": "path"}):
        fig = Figure(figsize=(7, 4.5))
        ax = fig.subplots()
        for name, diagnostics in series.items():
            if not diagnostics:
                continue
            epochs = [d.epoch + 1 for d in diagnostics]
            ratios = [d.ratio if math.isfinite(d.ratio) else float("nan") for d in diagnostics]
            ax.plot(epochs, ratios, marker="o", markersize=3, label=name)
        ax.set_xlabel("epoch")
        ax.set_ylabel("G_f / G_r")
        ax.set_title("Forget / retain gradient-norm ratio")
        ax.grid(True, alpha=0.3)
        if ax.lines:
            ax.legend(fontsize=7)
        fig.savefig(path, format="svg", metadata={"Date": None})
    return path


# ==================== 汇总 ====================

def emit_report(record: RunRecord, store: RunStore) -> str:
    """
    写出 report.md、results.csv 与 ratio.svg

    Returns:
        Markdown 文本
    """
    write_results_csv(record.rows, store.path(RESULTS_FILE))
    plot_ratio(
        {row.name: row.metrics.diagnostics for row in record.rows if row.metrics is not None},
        store.path(RATIO_PLOT_FILE),
    )
    lines = [
        "# 遗忘实验报告",
        "",
        f"- config hash: `{record.config_hash}`",
        f"- seed: {record.seed}",
        "",
        "括号内为相对 Retrain 的绝对差距，AG 为四项差距的平均，越小越好。",
        "",
        to_markdown_table(record.rows),
    ]
    probes = [row for row in record.rows if row.metrics is not None and row.metrics.mia_probe is not None]
    if probes:
        lines += ["", "## MIA 探针（留出非成员）", "", "| Method | MIA(forget) | MIA(probe) |", "|--------|-------------|------------|"]
        lines += [f"| {row.name} | {row.metrics.mia:.2f} | {row.metrics.mia_probe:.2f} |" for row in probes]
    if record.failed_rows:
        lines += ["", "## 失败的方法", ""]
        lines += [f"- {row.name}: {row.error}" for row in record.failed_rows]
    markdown = "\n".join(lines) + "\n"
    store.path(REPORT_FILE).write_text(markdown, encoding="utf-8")
    logger.info(f"报告已写入 {store.path(REPORT_FILE)}")
    return markdown


def summary_frame(records: Sequence[RunRecord]) -> pd.DataFrame:
    """多种子汇总：每个行名的成功次数与各指标中位数（保持首次出现的行序）"""
    entries = []
    for record in records:
        for row in record.rows:
            if row.failed or row.metrics is None or row.gaps is None:
                continue
            entries.append({
                "method": row.name,
                "ag": row.gaps.ag,
                "fa": row.metrics.fa,
                "ra": row.metrics.ra,
                "ta": row.metrics.ta,
                "mia": row.metrics.mia,
            })
    if not entries:
        return pd.DataFrame(columns=SUMMARY_COLUMNS)
    frame = pd.DataFrame.from_records(entries)
    grouped = frame.groupby("method", sort=False)
    summary = grouped.median()
    summary.insert(0, "runs", grouped.size())
    summary = summary.rename(columns={c: f"median_{c}" for c in ("ag", "fa", "ra", "ta", "mia")})
    return summary.reset_index()[SUMMARY_COLUMNS]


def write_summary_csv(records: Sequence[RunRecord], path: Union[str, Path]) -> pd.DataFrame:
    summary = summary_frame(records)
    summary.to_csv(path, index=False, lineterminator="\n")
    return summary
