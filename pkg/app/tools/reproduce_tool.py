import argparse
import logging
import sys

from app.estimation.simulation import TableReproduction, reproduce_table, table_configs
from app.resources.published_tables import PUBLISHED_TABLES, table_guide
from app.utils.errors import AcceptanceFailure, SchemaError
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


def register_commands(subparsers) -> None:
    """向命令行注册结果表复现子命令"""
    parser = subparsers.add_parser("reproduce", help="复现模拟研究的结果表并与发表值比较")
    parser.add_argument("--table", type=int, choices=sorted(PUBLISHED_TABLES), required=True, help="结果表编号")
    parser.add_argument("--reps", type=int, default=None, help="重复次数（默认 100）")
    parser.add_argument("--n", type=int, default=None, help="样本量（默认 100）")
    add_seed_arguments(parser)
    add_common_arguments(parser)
    parser.set_defaults(handler=cmd_reproduce, format="text")


def cmd_reproduce(args: argparse.Namespace) -> TableReproduction:
    seed = resolve_seed(args)
    if args.jobs < 1:
        raise SchemaError("--jobs 必须至少为 1")
    # 1. 打印复现设置（每一行解析后的完整模拟设置）与验收标准
    print(f"[config] table={args.table} seed={seed} jobs={args.jobs}", file=sys.stderr)
    configs = table_configs(args.table, seed, reps=args.reps, n=args.n)
    for published, config in configs:
        print(f"[config] 行 {published.label}", file=sys.stderr)
        announce_config(config)
    print(table_guide(args.table), file=sys.stderr)

    # 2. 运行并写出对比结果
    reproduction = reproduce_table(args.table, seed, jobs=args.jobs, configs=configs)
    text = to_json(reproduction.to_dict()) if args.format == "json" else reproduction.to_text()
    if args.out is not None:
        for label, frame in reproduction.records.items():
            emit(frame_to_csv(frame), args.out, f"table{args.table}_{label}_replications.csv")
        emit(text, args.out, f"table{args.table}.{'json' if args.format == 'json' else 'txt'}")
    else:
        emit(text, None, "")

    # 3. 任一验收项未通过时以退出码 5 结束
    if not reproduction.passed:
        failed = [row.quantity for row in reproduction.rows if row.passed is False]
        raise AcceptanceFailure(f"结果表 {args.table} 未通过验收: {', '.join(failed)}")
    return reproduction
