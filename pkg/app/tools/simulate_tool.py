import argparse
import logging
from pathlib import Path

import pandas as pd

from app.estimation.simulation import ReplicationResult, SimulationConfig, run_replications
from app.utils.errors import SchemaError
from app.utils.grid_util import parse_grid
from app.utils.output_util import (
    add_common_arguments,
    add_seed_arguments,
    announce_config,
    emit,
    frame_to_csv,
    resolve_seed,
    to_json,
)

logger = logging.getLogger(__name__)

CENSORING_TARGETS = {30: 0.30, 50: 0.50}


def register_commands(subparsers) -> None:
    """向命令行注册重复模拟子命令"""
    parser = subparsers.add_parser("simulate", help="按模拟设计重复生成数据并估计")
    parser.add_argument("--config", default=None, help="JSON 格式的 SimulationConfig")
    parser.add_argument("--n", type=int, default=None, help="每次重复的样本量")
    parser.add_argument("--reps", type=int, default=None, help="重复次数")
    parser.add_argument("--pipeline", choices=("fixed", "adaptive", "joint", "parametric"), default=None)
    parser.add_argument("--censoring", type=int, choices=sorted(CENSORING_TARGETS), default=None, help="目标删失比例（%%）")
    parser.add_argument("--kernel", choices=("epanechnikov", "biweight"), default=None)
    parser.add_argument("--bandwidth", type=float, default=None, help="固定带宽")
    parser.add_argument("--h-grid", default=None, help="联合选择的带宽网格 lo:step:hi")
    parser.add_argument("--weight-support", default=None, help="权重测度支撑点 lo:step:hi")
    parser.add_argument("--weight-lattice", default=None, help="候选测度 JSON 文件")
    parser.add_argument("--trim", choices=("box", "density"), default=None)
    parser.add_argument("--trim-c", type=float, default=None, help="密度截尾阈值")
    add_seed_arguments(parser)
    add_common_arguments(parser)
    parser.set_defaults(handler=cmd_simulate)


def config_from_args(args: argparse.Namespace) -> SimulationConfig:
    """读取配置文件（如有），再用命令行参数覆盖"""
    base = {}
    if args.config:
        base = SimulationConfig.model_validate_json(Path(args.config).read_text(encoding="utf-8")).model_dump()

    overrides = {
        "n": args.n,
        "reps": args.reps,
        "pipeline": args.pipeline,
        "kernel": args.kernel,
        "bandwidth": args.bandwidth,
        "lattice_file": args.weight_lattice,
        "trim_mode": args.trim,
        "trim_c": args.trim_c,
    }
    if args.h_grid:
        overrides["h_grid"] = parse_grid(args.h_grid)
    if args.weight_support:
        overrides["weight_support"] = parse_grid(args.weight_support)
    if args.censoring is not None:
        overrides["target_censoring"] = CENSORING_TARGETS[args.censoring]
    if args.seed is not None or args.require_seed or "seed" not in base:
        overrides["seed"] = resolve_seed(args, base.get("seed", 0))
    if args.jobs < 1:
        raise SchemaError("--jobs 必须至少为 1")

    merged = {**base, **{k: v for k, v in overrides.items() if v is not None}}
    return SimulationConfig.model_validate(merged)


def summary_payload(result: ReplicationResult) -> dict:
    return {"config": result.config.model_dump(), "summary": result.summary.to_dict()}


def _as_text(result: ReplicationResult) -> str:
    summary = result.summary
    theta_labels = [f"θ{j}" for j in range(2, result.config.d + 1)]
    frame = pd.DataFrame(summary.variance, index=theta_labels, columns=theta_labels)
    frame.insert(0, "偏差", summary.bias)
    lines = [
        f"流程 {result.config.pipeline}，{summary.replications} 次成功重复（失败 {summary.failures} 次）",
        frame.to_string(float_format=lambda v: f"{v:.4f}"),
        f"MSE: {summary.mse:.4f}",
        f"删失比例: {summary.censoring_fraction:.3f}，平均事件数: {summary.mean_events_per_subject:.2f}",
    ]
    if summary.mean_selected_masses:
        lines.append("平均质量: " + ", ".join(f"w({k})={v:.3f}" for k, v in summary.mean_selected_masses.items()))
    return "\n".join(lines) + "\n"


def cmd_simulate(args: argparse.Namespace) -> ReplicationResult:
    config = config_from_args(args)
    announce_config(config)
    result = run_replications(config, jobs=args.jobs)

    if args.out is not None:
        emit(frame_to_csv(result.records), args.out, "replications.csv")
        emit(to_json(summary_payload(result)), args.out, "summary.json")
        if args.format == "text":
            emit(_as_text(result), None, "")
    else:
        emit(to_json(summary_payload(result)) if args.format == "json" else _as_text(result), None, "")
    return result
