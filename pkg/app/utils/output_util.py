"""命令行输出：公共参数、JSON/文本格式化与原子写出"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import pandas as pd
from pydantic import BaseModel

from app.utils.errors import SchemaError
from app.utils.grid_util import atomic_write_text


def add_common_arguments(parser: argparse.ArgumentParser) -> None:
    """
    为子命令添加公共参数

    :param parser: 子命令解析器
    """
    parser.add_argument("--format", choices=("json", "text"), default="json", help="输出格式")
    parser.add_argument("--out", default=None, help="输出目录，默认写到标准输出")
    parser.add_argument("--verbose", action="store_true", help="输出 DEBUG 级别日志")


def add_seed_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, default=None, help="随机种子（64 位非负整数）")
    parser.add_argument("--jobs", type=int, default=1, help="并行工作进程数，不影响结果")
    parser.add_argument("--require-seed", action="store_true", help="未显式给出 --seed 时报错")


def resolve_seed(args: argparse.Namespace, default: int = 0) -> int:
    """
    :param args: 解析后的参数
    :param default: 未给出种子时的默认值
    :return: 种子
    """
    if args.seed is None:
        if args.require_seed:
            raise SchemaError("已指定 --require-seed，必须显式给出 --seed")
        return default
    if not 0 <= args.seed < 2**64:
        raise SchemaError(f"种子必须是 64 位非负整数，收到 {args.seed}")
    return args.seed


def _json_default(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    raise TypeError(f"无法序列化 {type(value).__name__}")


def to_json(payload) -> str:
    return json.dumps(payload, indent=2, ensure_ascii=False, default=_json_default) + "\n"


def announce_config(settings: BaseModel) -> None:
    """计算开始前把完整的解析后设置（含默认值）打印到标准错误"""
    print(f"[config] {type(settings).__name__}", file=sys.stderr)
    print(settings.model_dump_json(indent=2), file=sys.stderr)


def emit(text: str, out: str | None, filename: str) -> None:
    """
    写出结果；给定输出目录时先写临时文件再改名

    :param text: 完整的输出文本
    :param out: 输出目录，None 表示标准输出
    :param filename: 输出目录下的文件名
    """
    if out is None:
        sys.stdout.write(text)
        return
    directory = Path(out)
    directory.mkdir(parents=True, exist_ok=True)
    atomic_write_text(directory / filename, text)


def frame_to_csv(frame: pd.DataFrame) -> str:
    return frame.to_csv(index=False, float_format="%.17g")
