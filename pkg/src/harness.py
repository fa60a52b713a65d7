"""
实验编排模块

流程: 数据准备 → 训练原始模型 M_0 与 Retrain 参照 → 各遗忘方法（从 M_0 的副本出发）
→ 评估 FA/RA/TA/MIA 及相对 Retrain 的差距 → 报告。

每个方法行使用由全局种子与行名派生的独立种子，可以放到线程池里并行；
行内计算保持单线程。任何一行失败只会把该行标记为 failed，其余行照常完成。
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import pandas as pd

from src.checkpoint import load_checkpoint, save_checkpoint
from src.config import (
    DatasetSpec,
    ExperimentConfig,
    check_unique_names,
    config_hash,
    derive_seed,
    expand_methods,
    with_overrides,
)
from src.data import (
    BlobData,
    LabeledDataset,
    Partition,
    generate_gaussian_blobs,
    load_csv,
    split,
    train_test_split,
)
from src.errors import CheckpointError, DatasetError
from src.metrics import (
    EpochDiagnostic,
    EvaluationSets,
    MetricsReport,
    average_gap,
    evaluate,
    ratio_of,
    subset_grad_norm,
)
from src.nn_core import Model, SgdConfig, build_mlp, fit
from src.quant import QuantSpec
from src.report import (
    emit_report,
    read_diagnostics_csv,
    write_alignment_csv,
    write_diagnostics_csv,
    write_summary_csv,
)
from src.run_store import ALIGNMENT_FILE, SUMMARY_FILE, MethodRow, RunRecord, RunStore
from src.unlearn import UnlearnConfig, measure_label_gradient_alignment, retrain, run_unlearning

logger = logging.getLogger(__name__)

REFERENCE_NAME = "Retrain"


@dataclass
class ExperimentStep:
    """编排步骤状态"""
    step_name: str  # data, train, alignment, unlearn, evaluate, report
    status: str     # running, completed, failed
    content: str = ""
    timestamp: datetime = field(default_factory=datetime.now)


StepCallback = Callable[[ExperimentStep], None]


@dataclass
class PreparedData:
    """一次实验用到的全部数据视图"""
    train: LabeledDataset
    test: LabeledDataset
    partition: Partition
    sets: EvaluationSets


@dataclass
class RowPlan:
    """对比表中的一行要做什么；config 为 None 表示 Retrain 参照"""
    name: str
    precision: str
    config: Optional[UnlearnConfig] = None

    @property
    def is_reference(self) -> bool:
        return self.config is None

    @property
    def method(self) -> str:
        return "retrain" if self.config is None else self.config.method


@dataclass
class TrainedModels:
    """某个精度下的原始模型与 Retrain 参照"""
    original: Model
    reference: Model
    reference_diagnostics: list[EpochDiagnostic] = field(default_factory=list)


@dataclass
class RowOutcome:
    """一行的运行结果，失败时 model 为 None"""
    plan: RowPlan
    model: Optional[Model] = None
    diagnostics: list[EpochDiagnostic] = field(default_factory=list)
    error: str = ""


@dataclass
class SweepResult:
    """多种子运行结果"""
    records: list[RunRecord]
    summary: pd.DataFrame


def _notify(on_step: Optional[StepCallback], step_name: str, status: str, content: str = "") -> None:
    if on_step:
        on_step(ExperimentStep(step_name=step_name, status=status, content=content))


# ==================== 数据 ====================

def _align_test_labels(test: LabeledDataset, train: LabeledDataset) -> LabeledDataset:
    """把独立测试文件的标签映射到训练集的稠密标签空间"""
    if test.dim != train.dim:
        raise DatasetError(f"测试集维度 {test.dim} 与训练集 {train.dim} 不一致")
    inverse = {dense: raw for raw, dense in test.label_mapping.items()}
    raw_labels = [inverse[int(label)] for label in test.labels]
    unknown = sorted({raw for raw in raw_labels if raw not in train.label_mapping})
    if unknown:
        raise DatasetError(f"测试集含训练集中没有的标签: {unknown}")
    return LabeledDataset(
        features=test.features,
        labels=np.array([train.label_mapping[raw] for raw in raw_labels], dtype=np.int64),
        num_classes=train.num_classes,
        label_mapping=dict(train.label_mapping),
    )


def load_dataset(spec: DatasetSpec, seed: int) -> BlobData:
    """按数据配置生成或读取训练集与测试集"""
    if spec.kind == "blobs":
        return generate_gaussian_blobs(spec.classes, spec.per_class, spec.dim, spec.spread, seed, spec.test_per_class)
    full = load_csv(spec.path, header=spec.header)
    if spec.test_fraction is not None:
        return train_test_split(full, spec.test_fraction, seed)
    return BlobData(train=full, test=_align_test_labels(load_csv(spec.test_path, header=spec.header), full))


def prepare_data(config: ExperimentConfig) -> PreparedData:
    """数据、遗忘划分与评估视图，全部由全局种子派生"""
    data = load_dataset(config.dataset, derive_seed(config.seed, "dataset"))
    split_spec = config.split.model_copy(update={"seed": derive_seed(config.seed, "split")})
    partition = split(data.train, split_spec)
    sets = EvaluationSets.build(data.train, data.test, partition, derive_seed(config.seed, "evaluation"))
    return PreparedData(train=data.train, test=data.test, partition=partition, sets=sets)


# ==================== 行计划 ====================

def row_plans(config: ExperimentConfig) -> list[RowPlan]:
    """
    每个精度: Retrain 参照在前，随后是展开后的各方法

    方法列表里的 retrain 条目就是参照行本身，不重复运行。
    精度多于一个时行名带 @precision 后缀。

    Raises:
        ConfigError: 方法行名与参照行或 original@precision 重名（含文件名形式）
    """
    methods = [m for m in expand_methods(config.methods) if m.method != "retrain"]
    multi = len(config.precisions) > 1
    plans: list[RowPlan] = []
    for precision in config.precisions:
        suffix = f"@{precision}" if multi else ""
        plans.append(RowPlan(name=f"{REFERENCE_NAME}{suffix}", precision=precision))
        plans.extend(RowPlan(name=f"{m.display_name}{suffix}", precision=precision, config=m) for m in methods)
    check_unique_names([plan.name for plan in plans] + [original_name(p) for p in config.precisions])
    return plans


def original_name(precision: str) -> str:
    return f"original@{precision}"


def _quant_for(config: ExperimentConfig, precision: str) -> Optional[QuantSpec]:
    return config.model.quant if precision == "quantized" else None


def _train_config(config: ExperimentConfig) -> SgdConfig:
    # 两种精度共用同一个初始化与小批量种子，得到可对照的模型
    return config.train.model_copy(update={"seed": derive_seed(config.seed, "train")})


# ==================== 训练 ====================

def train_models(config: ExperimentConfig, data: PreparedData, on_step: Optional[StepCallback] = None) -> dict[str, TrainedModels]:
    """训练每个精度下的 M_0 与 Retrain 参照"""
    sgd = _train_config(config)
    forget = data.train.subset(data.partition.forget_idx)
    retain = data.train.subset(data.partition.retain_idx)
    trained: dict[str, TrainedModels] = {}
    for precision in config.precisions:
        quant = _quant_for(config, precision)
        _notify(on_step, "train", "running", f"训练原始模型 ({precision})")
        original = build_mlp(data.train.dim, config.model.hidden, data.train.num_classes, quant, seed=sgd.seed)
        fit(original, data.train.features, data.train.labels, sgd)

        diagnostics: list[EpochDiagnostic] = []

        def _record(epoch: int, model: Model) -> None:
            g_f, g_r = subset_grad_norm(model, forget), subset_grad_norm(model, retain)
            diagnostics.append(EpochDiagnostic(epoch, g_f, g_r, ratio_of(g_f, g_r), 0.0, 1.0))

        _notify(on_step, "train", "running", f"训练 Retrain 参照 ({precision})")
        reference = retrain(data.train, data.partition, sgd, config.model.hidden, quant, on_epoch=_record)
        trained[precision] = TrainedModels(original=original, reference=reference, reference_diagnostics=diagnostics)
        _notify(on_step, "train", "completed", precision)
    return trained


def save_trained(trained: dict[str, TrainedModels], config: ExperimentConfig, store: RunStore) -> None:
    """保存原始模型、参照模型的检查点与参照的诊断"""
    plans = {plan.precision: plan for plan in row_plans(config) if plan.is_reference}
    for precision, models in trained.items():
        save_checkpoint(models.original, store.checkpoint_path(original_name(precision)))
        name = plans[precision].name
        save_checkpoint(models.reference, store.checkpoint_path(name))
        write_diagnostics_csv(models.reference_diagnostics, store.diagnostics_path(name))


def load_originals(config: ExperimentConfig, store: RunStore) -> dict[str, Model]:
    """读取 train 阶段保存的原始模型"""
    originals = {}
    for precision in config.precisions:
        path = store.checkpoint_path(original_name(precision))
        if not path.exists():
            raise CheckpointError(f"找不到原始模型检查点 {path}，请先运行 train")
        originals[precision] = load_checkpoint(path)
    return originals


def write_alignment(config: ExperimentConfig, data: PreparedData, original: Model, store: RunStore) -> Path:
    """在原始模型上测量真实标签与相似/随机标签的梯度方向，写出 alignment.csv"""
    report = measure_label_gradient_alignment(
        original.clone(), data.train, data.partition, seed=derive_seed(config.seed, "alignment")
    )
    return write_alignment_csv(
        data.partition.forget_idx,
        report.cos_sl,
        report.cos_rl,
        report.degenerate_sl | report.degenerate_rl,
        store.path(ALIGNMENT_FILE),
    )


# ==================== 遗忘 ====================

def _run_row(plan: RowPlan, model: Model, data: PreparedData, global_seed: int) -> RowOutcome:
    method_config = plan.config.model_copy(
        update={"seed": derive_seed(global_seed, f"method:{plan.config.display_name}")}
    )
    try:
        result = run_unlearning(model, data.train, data.partition, method_config)
    except Exception as e:
        logger.exception(f"[{plan.name}] 遗忘失败")
        return RowOutcome(plan=plan, error=f"{type(e).__name__}: {e}")
    logger.info(f"[{plan.name}] 遗忘完成")
    return RowOutcome(plan=plan, model=result.model, diagnostics=result.diagnostics)


def unlearn_models(
    config: ExperimentConfig,
    data: PreparedData,
    originals: dict[str, Model],
    on_step: Optional[StepCallback] = None,
) -> list[RowOutcome]:
    """
    所有非参照行从各自精度的 M_0 副本出发运行遗忘

    副本在提交前由编排线程生成，工作线程之间不共享任何可变状态；
    结果按行计划顺序收集。
    """
    plans = [plan for plan in row_plans(config) if not plan.is_reference]
    _notify(on_step, "unlearn", "running", f"{len(plans)} 个方法行, workers={config.workers}")
    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        futures = [
            pool.submit(_run_row, plan, originals[plan.precision].clone(), data, config.seed)
            for plan in plans
        ]
        outcomes = [future.result() for future in futures]
    failed = sum(1 for outcome in outcomes if outcome.error)
    _notify(on_step, "unlearn", "completed", f"失败 {failed} 行")
    return outcomes


def save_outcomes(outcomes: Sequence[RowOutcome], store: RunStore) -> None:
    for outcome in outcomes:
        if outcome.model is None:
            continue
        save_checkpoint(outcome.model, store.checkpoint_path(outcome.plan.name))
        write_diagnostics_csv(outcome.diagnostics, store.diagnostics_path(outcome.plan.name))


def load_outcomes(config: ExperimentConfig, store: RunStore) -> list[RowOutcome]:
    """从检查点与诊断 CSV 恢复所有行；缺少检查点的行记为失败"""
    outcomes = []
    for plan in row_plans(config):
        path = store.checkpoint_path(plan.name)
        if not path.exists():
            outcomes.append(RowOutcome(plan=plan, error=f"缺少检查点 {store.relative(path)}"))
            continue
        diagnostics_path = store.diagnostics_path(plan.name)
        diagnostics = read_diagnostics_csv(diagnostics_path) if diagnostics_path.exists() else []
        outcomes.append(RowOutcome(plan=plan, model=load_checkpoint(path), diagnostics=diagnostics))
    return outcomes


# ==================== 评估 ====================

def _reference_outcomes(config: ExperimentConfig, trained: dict[str, TrainedModels]) -> list[RowOutcome]:
    return [
        RowOutcome(plan=plan, model=trained[plan.precision].reference, diagnostics=trained[plan.precision].reference_diagnostics)
        for plan in row_plans(config)
        if plan.is_reference
    ]


def _ordered(config: ExperimentConfig, outcomes: Sequence[RowOutcome]) -> list[RowOutcome]:
    by_name = {outcome.plan.name: outcome for outcome in outcomes}
    return [by_name[plan.name] for plan in row_plans(config) if plan.name in by_name]


def evaluate_outcomes(
    config: ExperimentConfig,
    data: PreparedData,
    outcomes: Sequence[RowOutcome],
    store: RunStore,
    on_step: Optional[StepCallback] = None,
) -> RunRecord:
    """评估每一行并计算相对同精度 Retrain 的差距"""
    _notify(on_step, "evaluate", "running")
    rows: list[MethodRow] = []
    references: dict[str, MetricsReport] = {}
    for outcome in _ordered(config, outcomes):
        plan = outcome.plan
        row = MethodRow(name=plan.name, method=plan.method, precision=plan.precision)
        checkpoint = store.checkpoint_path(plan.name)
        diagnostics_path = store.diagnostics_path(plan.name)
        row.checkpoint = store.relative(checkpoint) if checkpoint.exists() else None
        row.diagnostics_path = store.relative(diagnostics_path) if diagnostics_path.exists() else None
        if outcome.model is None:
            row.status, row.error = "failed", outcome.error
        else:
            try:
                row.metrics = evaluate(outcome.model, data.sets, outcome.diagnostics, config.mia_calibration_min)
            except Exception as e:
                logger.exception(f"[{plan.name}] 评估失败")
                row.status, row.error = "failed", f"{type(e).__name__}: {e}"
        if plan.is_reference and row.metrics is not None:
            references[plan.precision] = row.metrics
        rows.append(row)

    for row in rows:
        reference = references.get(row.precision)
        if row.metrics is not None and reference is not None:
            row.gaps = average_gap(row.metrics, reference)
        elif row.metrics is not None:
            logger.warning(f"[{row.name}] 没有可用的 Retrain 参照，不计算差距")

    alignment = store.path(ALIGNMENT_FILE)
    record = RunRecord(
        config_hash=config_hash(config),
        seed=config.seed,
        rows=rows,
        alignment_path=store.relative(alignment) if alignment.exists() else None,
    )
    _notify(on_step, "evaluate", "completed", f"{len(rows)} 行, 失败 {len(record.failed_rows)}")
    return record


def finalize(record: RunRecord, config: ExperimentConfig, store: RunStore, started_at: datetime, stage: str) -> RunRecord:
    store.save_record(record)
    emit_report(record, store)
    store.write_metadata(config, started_at, stage)
    return record


# ==================== 入口 ====================

def train_stage(config: ExperimentConfig, on_step: Optional[StepCallback] = None) -> dict[str, TrainedModels]:
    """train 命令: 训练并保存 M_0 与 Retrain 参照，写出 alignment.csv"""
    started = datetime.now()
    store = RunStore(config.output_dir)
    store.prepare(config)
    _notify(on_step, "data", "running")
    data = prepare_data(config)
    _notify(on_step, "data", "completed", f"训练 {data.train.size}, 测试 {data.test.size}, 遗忘 {data.partition.forget_idx.size}")
    trained = train_models(config, data, on_step)
    save_trained(trained, config, store)
    _notify(on_step, "alignment", "running")
    write_alignment(config, data, trained[config.precisions[0]].original, store)
    _notify(on_step, "alignment", "completed")
    store.write_metadata(config, started, "train")
    return trained


def unlearn_stage(config: ExperimentConfig, on_step: Optional[StepCallback] = None) -> list[RowOutcome]:
    """unlearn 命令: 从保存的 M_0 出发运行各方法并保存检查点"""
    started = datetime.now()
    store = RunStore(config.output_dir)
    store.prepare(config)
    data = prepare_data(config)
    outcomes = unlearn_models(config, data, load_originals(config, store), on_step)
    save_outcomes(outcomes, store)
    store.write_metadata(config, started, "unlearn")
    return outcomes


def eval_stage(config: ExperimentConfig, on_step: Optional[StepCallback] = None) -> RunRecord:
    """eval 命令: 从检查点评估所有行并写出结果"""
    started = datetime.now()
    store = RunStore(config.output_dir)
    data = prepare_data(config)
    record = evaluate_outcomes(config, data, load_outcomes(config, store), store, on_step)
    return finalize(record, config, store, started, "eval")


def report_stage(run_dir: str) -> str:
    """report 命令: 根据已有 run.json 重新生成报告"""
    store = RunStore(run_dir)
    record = store.load_record()
    if record is None:
        raise FileNotFoundError(f"{run_dir} 中没有 run.json")
    return emit_report(record, store)


def run_experiment(config: ExperimentConfig, on_step: Optional[StepCallback] = None) -> RunRecord:
    """
    完整流程（run-all）

    Args:
        config: 实验配置
        on_step: 步骤回调函数

    Returns:
        RunRecord；失败的行记录在其中，不抛出
    """
    started = datetime.now()
    store = RunStore(config.output_dir)
    store.prepare(config)

    _notify(on_step, "data", "running")
    data = prepare_data(config)
    _notify(on_step, "data", "completed", f"训练 {data.train.size}, 测试 {data.test.size}, 遗忘 {data.partition.forget_idx.size}")

    trained = train_models(config, data, on_step)
    save_trained(trained, config, store)

    _notify(on_step, "alignment", "running")
    write_alignment(config, data, trained[config.precisions[0]].original, store)
    _notify(on_step, "alignment", "completed")

    outcomes = unlearn_models(config, data, {p: models.original for p, models in trained.items()}, on_step)
    save_outcomes(outcomes, store)

    record = evaluate_outcomes(config, data, _reference_outcomes(config, trained) + outcomes, store, on_step)
    _notify(on_step, "report", "running")
    finalize(record, config, store, started, "run-all")
    _notify(on_step, "report", "completed", str(store.run_dir))
    return record


def run_seed_sweep(
    config: ExperimentConfig,
    seeds: Sequence[int],
    on_step: Optional[StepCallback] = None,
) -> SweepResult:
    """
    对每个种子运行完整流程（结果写到 seed_<s>/），并在结果目录下写出 summary.csv

    Returns:
        SweepResult，summary 为各行名的中位指标
    """
    root = Path(config.output_dir)
    records = []
    for seed in seeds:
        logger.info(f"种子 {seed}")
        sub = with_overrides(config, seed=seed, out=str(root / f"seed_{seed}"))
        records.append(run_experiment(sub, on_step))
    root.mkdir(parents=True, exist_ok=True)
    summary = write_summary_csv(records, root / SUMMARY_FILE)
    if not summary.empty:
        ordering = summary.sort_values("median_ag", kind="stable")
        logger.info("中位 AG 排序: " + " < ".join(f"{m} ({ag:.2f})" for m, ag in zip(ordering["method"], ordering["median_ag"])))
    return SweepResult(records=records, summary=summary)
