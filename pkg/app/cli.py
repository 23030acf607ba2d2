import argparse
import logging
import sys

from pydantic import ValidationError

from app.resources import static_resource
from app.tools import fit_tool, reproduce_tool, simulate_tool
from app.utils.errors import RecurrentIndexError

logger = logging.getLogger("app")


def create_cli() -> argparse.ArgumentParser:
    """
    创建并配置命令行解析器。

    Returns:
        argparse.ArgumentParser: 注册了全部子命令的解析器。
    """
    parser = argparse.ArgumentParser(
        prog="recurrent-index",
        description="复发事件累积均值函数的单指标半参数估计",
    )
    parser.add_argument("--version", action="version", version=static_resource.get_version())
    subparsers = parser.add_subparsers(dest="command", required=True)

    # 注册子命令
    fit_tool.register_commands(subparsers)
    simulate_tool.register_commands(subparsers)
    reproduce_tool.register_commands(subparsers)

    return parser


def _configure_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    logger.setLevel(logging.DEBUG if verbose else logging.INFO)


def main(argv: list[str] | None = None) -> int:
    """
    命令行入口，返回退出码：
    0 成功；2 数据或配置错误；3 优化或数值失败；4 重复失败过多；5 复现未通过验收
    """
    args = create_cli().parse_args(argv)
    _configure_logging(args.verbose)
    try:
        args.handler(args)
    except RecurrentIndexError as e:
        logger.error("%s: %s", type(e).__name__, e)
        return e.exit_code
    except ValidationError as e:
        logger.error("配置无效: %s", e)
        return 2
    except (FileNotFoundError, IsADirectoryError, PermissionError) as e:
        logger.error("无法读取输入: %s", e)
        return 2
    except ValueError as e:
        logger.error("参数错误: %s", e)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
