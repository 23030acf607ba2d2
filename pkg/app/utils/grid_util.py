import os
import tempfile
from pathlib import Path

import numpy as np


def parse_grid(spec: str) -> list[float]:
    """
    解析 "lo:step:hi" 形式的等距网格（包含两端点）

    :param spec: 网格描述，如 '0.05:0.05:0.3'；也接受单个数值或逗号分隔的列表
    :type spec: str
    :return: 升序、去重后的网格点
    :rtype: list[float]
    :raises ValueError: 如果格式不合法或步长非正
    """
    spec = spec.strip()
    if ":" not in spec:
        values = [float(v) for v in spec.split(",") if v.strip()]
        if not values:
            raise ValueError(f"网格为空: {spec!r}")
        return sorted(set(values))

    parts = spec.split(":")
    if len(parts) != 3:
        raise ValueError(f"网格格式必须为 lo:step:hi，收到 {spec!r}")
    lo, step, hi = (float(p) for p in parts)
    if step <= 0 or hi < lo:
        raise ValueError(f"网格步长必须为正且 hi >= lo，收到 {spec!r}")

    count = int(np.floor((hi - lo) / step + 1e-9)) + 1
    # 四舍五入到 10 位，避免 0.1*3 这类浮点误差产生伪重复
    grid = np.round(lo + step * np.arange(count), 10)
    return sorted(set(float(v) for v in grid))


def atomic_write_text(path: str | Path, text: str) -> None:
    """
    先写临时文件再重命名，失败时不留下不完整的输出

    :param path: 目标文件路径
    :param text: 文件内容
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as handle:
            handle.write(text)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
