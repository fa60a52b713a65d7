"""
Q-MUL 量化模型遗忘实验 - 命令行入口

用法:
    python app.py train   --config C [--out D] [--seed S] [--header]
    python app.py unlearn --config C [--out D] [--seed S] [--methods a,b] [--header]
    python app.py eval    --config C [--out D] [--seed S] [--header]
    python app.py report  --out D
    python app.py run-all --config C [--out D] [--seed S] [--methods a,b] [--seeds 0,1,2] [--header] [--workers N]

退出码: 0 成功；1 配置无效或有方法行失败；2 命令行用法错误。
"""

import argparse
import logging
import sys
from typing import Optional, Sequence

from src.config import ExperimentConfig, load_config, with_overrides
from src.errors import QmulError
from src.harness import (
    ExperimentStep,
    eval_stage,
    report_stage,
    run_experiment,
    run_seed_sweep,
    train_stage,
    unlearn_stage,
)
from src.report import to_markdown_table

logger = logging.getLogger("qmul")

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

EXIT_OK = 0
EXIT_FAILED = 1


def _u64(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"不是整数: {text!r}")
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError(f"种子必须在 [0, 2^64) 内: {value}")
    return value


def _seed_list(text: str) -> list[int]:
    seeds = [_u64(part.strip()) for part in text.split(",") if part.strip()]
    if not seeds:
        raise argparse.ArgumentTypeError("--seeds 至少需要一个种子")
    return seeds


def _positive(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"不是整数: {text!r}")
    if value < 1:
        raise argparse.ArgumentTypeError(f"必须 ≥ 1: {value}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="app.py", description="量化模型遗忘实验（Q-MUL 与基线方法）")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    commands = parser.add_subparsers(dest="command", required=True)

    def _experiment_command(name: str, help_text: str, methods: bool = False) -> argparse.ArgumentParser:
        command = commands.add_parser(name, help=help_text)
        command.add_argument("--config", required=True, help="实验 JSON 配置")
        command.add_argument("--out", help="结果目录（覆盖配置中的 output_dir）")
        command.add_argument("--seed", type=_u64, help="全局种子（覆盖配置）")
        command.add_argument("--header", action="store_true", help="CSV 数据首行为表头")
        if methods:
            command.add_argument("--methods", help="逗号分隔的方法名，只运行这些方法")
        return command

    _experiment_command("train", "训练原始模型与 Retrain 参照")
    _experiment_command("unlearn", "从保存的原始模型运行遗忘方法", methods=True)
    _experiment_command("eval", "评估所有检查点并写出结果")

    report = commands.add_parser("report", help="根据 run.json 重新生成报告")
    report.add_argument("--out", required=True, help="结果目录")

    run_all = _experiment_command("run-all", "完整流程", methods=True)
    run_all.add_argument("--seeds", type=_seed_list, help="逗号分隔的种子列表，逐个运行并汇总中位数")
    run_all.add_argument("--workers", type=_positive, help="并行运行的方法行数")
    return parser


def _load(args: argparse.Namespace) -> ExperimentConfig:
    config = load_config(args.config)
    methods = getattr(args, "methods", None)
    config = with_overrides(
        config,
        seed=args.seed,
        out=args.out,
        methods=methods.split(",") if methods else None,
        header=args.header,
    )
    workers = getattr(args, "workers", None)
    if workers:
        config = config.model_copy(update={"workers": workers})
    ok, message = config.is_valid()
    if not ok:
        raise QmulError(message)
    return config


def _log_step(step: ExperimentStep) -> None:
    logger.info(f"[{step.step_name}] {step.status} {step.content}".rstrip())


def run(args: argparse.Namespace) -> int:
    if args.command == "report":
        print(report_stage(args.out))
        return EXIT_OK

    config = _load(args)
    if args.command == "train":
        train_stage(config, _log_step)
        return EXIT_OK
    if args.command == "unlearn":
        outcomes = unlearn_stage(config, _log_step)
        return EXIT_FAILED if any(outcome.error for outcome in outcomes) else EXIT_OK
    if args.command == "eval":
        record = eval_stage(config, _log_step)
        return EXIT_FAILED if record.failed_rows else EXIT_OK

    if args.seeds:
        sweep = run_seed_sweep(config, args.seeds, _log_step)
        print(sweep.summary.to_string(index=False))
        return EXIT_FAILED if any(record.failed_rows for record in sweep.records) else EXIT_OK
    record = run_experiment(config, _log_step)
    print(to_markdown_table(record.rows))
    return EXIT_FAILED if record.failed_rows else EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format=LOG_FORMAT)
    try:
        return run(args)
    except (QmulError, FileNotFoundError) as e:
        logger.error(str(e))
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
