"""异常层级定义，每一类异常都对应命令行的退出码。"""


class RecurrentIndexError(ValueError):
    """所有估计流程异常的基类"""

    exit_code = 1


class DataError(RecurrentIndexError):
    """输入数据不满足模型假设"""

    exit_code = 2


class TieViolation(DataError):
    def __init__(self, times):
        self.times = sorted(set(float(t) for t in times))
        preview = ", ".join(f"{t!r}" for t in self.times[:10])
        super().__init__(f"样本中存在重复时间点（共{len(self.times)}个）: {preview}")


class NegativeTime(DataError):
    pass


class EventAfterObservation(NegativeTime):
    pass


class DimensionMismatch(DataError):
    pass


class ParseError(DataError):
    def __init__(self, message: str, line: int | None = None, field: str | None = None):
        self.line = line
        self.field = field
        location = []
        if line is not None:
            location.append(f"第{line}行")
        if field is not None:
            location.append(f"字段 {field}")
        prefix = f"[{' '.join(location)}] " if location else ""
        super().__init__(f"{prefix}{message}")


class SchemaError(DataError):
    pass


class EmptySample(DataError):
    pass


class NumericalError(RecurrentIndexError):
    """数值计算退化（分母为零、窗口为空、矩阵奇异等）"""

    exit_code = 3


class DegenerateDenominator(NumericalError):
    pass


class EmptyWindow(NumericalError):
    pass


class AllTrimmed(NumericalError):
    pass


class SingularSigma(NumericalError):
    pass


class AllCandidatesSingular(NumericalError):
    pass


class OptimizerDiverged(RecurrentIndexError):
    exit_code = 3


class ReplicationFailure(RecurrentIndexError):
    exit_code = 4


class AcceptanceFailure(RecurrentIndexError):
    exit_code = 5
