"""
核心数据类型、样本校验与文件读写。

所有类型构造后不可变，可以在多个工作进程之间安全共享。
"""

import json
import logging
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Any, Callable, Literal

import numpy as np
import pandas as pd

from app.utils.errors import (
    DataError,
    DimensionMismatch,
    EmptySample,
    EventAfterObservation,
    NegativeTime,
    ParseError,
    SchemaError,
    TieViolation,
)
from app.utils.grid_util import atomic_write_text

logger = logging.getLogger(__name__)

JITTER_SCALE = 1e-9


def _frozen_array(values, dtype=float) -> np.ndarray:
    array = np.array(values, dtype=dtype)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class StepFunction:
    """
    右连续分段常数函数，支持左极限查询

    Args:
        jump_times: 严格递增的跳跃时间
        post_jump_values: 每个跳跃点之后（含该点）的函数值
        initial_value: 第一个跳跃点之前的函数值
    """

    jump_times: np.ndarray
    post_jump_values: np.ndarray
    initial_value: float = 0.0

    def __post_init__(self):
        times = _frozen_array(self.jump_times).reshape(-1)
        values = _frozen_array(self.post_jump_values).reshape(-1)
        if times.shape != values.shape:
            raise ValueError("跳跃时间与跳跃后取值的长度不一致")
        if times.size > 1 and not np.all(np.diff(times) > 0):
            raise ValueError("跳跃时间必须严格递增")
        object.__setattr__(self, "jump_times", times)
        object.__setattr__(self, "post_jump_values", values)
        object.__setattr__(self, "initial_value", float(self.initial_value))

    @classmethod
    def from_increments(cls, times, increments, initial_value: float = 0.0) -> "StepFunction":
        """由跳跃时间与跳跃幅度累加构造"""
        increments = np.asarray(increments, dtype=float)
        return cls(np.asarray(times, dtype=float), initial_value + np.cumsum(increments), initial_value)

    @cached_property
    def _padded_values(self) -> np.ndarray:
        return np.concatenate(([self.initial_value], self.post_jump_values))

    @property
    def increments(self) -> np.ndarray:
        return np.diff(self._padded_values)

    def __call__(self, t):
        idx = np.searchsorted(self.jump_times, t, side="right")
        result = self._padded_values[idx]
        return float(result) if np.ndim(result) == 0 else result

    def left_limit(self, t):
        """返回 t 之前（严格小于 t）的函数值"""
        idx = np.searchsorted(self.jump_times, t, side="left")
        result = self._padded_values[idx]
        return float(result) if np.ndim(result) == 0 else result

    def __repr__(self):
        return f"<StepFunction jumps={self.jump_times.size} initial={self.initial_value}>"


@dataclass(frozen=True, eq=False)
class DiscreteMeasure:
    """
    时间轴上的有限支撑权重测度 w

    Args:
        support: 严格递增的支撑点 k
        masses: 各支撑点的非负质量 w({k})
    """

    support: np.ndarray
    masses: np.ndarray

    def __post_init__(self):
        support = _frozen_array(self.support).reshape(-1)
        masses = _frozen_array(self.masses).reshape(-1)
        if support.shape != masses.shape:
            raise ValueError("支撑点与质量的长度不一致")
        if support.size > 1 and not np.all(np.diff(support) > 0):
            raise ValueError("支撑点必须严格递增")
        if not np.all(np.isfinite(masses)) or np.any(masses < 0):
            raise ValueError("测度质量必须为有限非负数")
        object.__setattr__(self, "support", support)
        object.__setattr__(self, "masses", masses)

    @classmethod
    def uniform(cls, support, mass: float = 1.0) -> "DiscreteMeasure":
        support = np.asarray(support, dtype=float)
        return cls(support, np.full(support.shape, float(mass)))

    @property
    def total_mass(self) -> float:
        return float(self.masses.sum())

    def mass_at(self, point: float) -> float:
        idx = np.flatnonzero(self.support == point)
        return float(self.masses[idx[0]]) if idx.size else 0.0

    def aligned_masses(self, grid: np.ndarray) -> np.ndarray:
        """把测度质量对齐到给定网格上，网格外的支撑点必须质量为零"""
        grid = np.asarray(grid, dtype=float)
        positions = np.searchsorted(grid, self.support)
        inside = (positions < grid.size) & (grid[np.minimum(positions, grid.size - 1)] == self.support)
        if np.any(self.masses[~inside] > 0):
            raise ValueError("测度的支撑点不在给定网格上")
        aligned = np.zeros(grid.size)
        aligned[positions[inside]] = self.masses[inside]
        return aligned

    def to_dict(self) -> dict:
        return {"support": self.support.tolist(), "masses": self.masses.tolist()}

    @classmethod
    def from_dict(cls, payload: dict) -> "DiscreteMeasure":
        return cls(payload["support"], payload["masses"])

    def __repr__(self):
        pairs = ", ".join(f"{k:g}:{m:g}" for k, m in zip(self.support, self.masses))
        return f"<DiscreteMeasure {pairs}>"


def measure_integrate(w: DiscreteMeasure, f: Callable[[float], float], upper: float) -> float:
    """
    计算 ∫_0^upper f(t) dw(t) = Σ_{k ≤ upper} f(k) w({k})

    Args:
        w: 权重测度
        f: 时间的实值函数
        upper: 积分上限（通常为 T_(n)），大于上限的支撑点不计入

    Returns:
        float: 积分值
    """
    if upper < 0:
        raise ValueError("积分上限必须非负")
    keep = w.support <= upper
    if not np.any(keep):
        return 0.0
    values = np.array([f(k) for k in w.support[keep]], dtype=float)
    return float(np.dot(values, w.masses[keep]))


@dataclass(frozen=True, eq=False)
class Subject:
    """
    单个个体的观测数据 (T, δ, Z, N(·))

    Args:
        observation_time: 观测时间 T = min(D, C)
        event_indicator: δ = I(D ≤ C)，即终止事件是否被观测到
        covariates: 协变量向量 Z
        event_times: 复发事件时间（升序）
    """

    observation_time: float
    event_indicator: bool
    covariates: tuple[float, ...]
    event_times: tuple[float, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "observation_time", float(self.observation_time))
        object.__setattr__(self, "event_indicator", bool(self.event_indicator))
        object.__setattr__(self, "covariates", tuple(float(z) for z in np.ravel(self.covariates)))
        object.__setattr__(self, "event_times", tuple(float(s) for s in np.ravel(self.event_times)))

    @property
    def T(self) -> float:
        return self.observation_time

    @property
    def delta(self) -> bool:
        return self.event_indicator

    @property
    def Z(self) -> np.ndarray:
        return _frozen_array(self.covariates)

    @property
    def d(self) -> int:
        return len(self.covariates)

    def counting_process(self) -> StepFunction:
        """观测到的计数过程 N(t)"""
        return StepFunction.from_increments(self.event_times, np.ones(len(self.event_times)))

    def __eq__(self, other):
        if not isinstance(other, Subject):
            return NotImplemented
        return (
            self.observation_time == other.observation_time
            and self.event_indicator == other.event_indicator
            and self.covariates == other.covariates
            and self.event_times == other.event_times
        )

    def __hash__(self):
        return hash((self.observation_time, self.event_indicator, self.covariates, self.event_times))


@dataclass(frozen=True, eq=False)
class Sample:
    """n 个独立个体组成的样本，所有个体的协变量维数相同"""

    subjects: tuple[Subject, ...]

    def __post_init__(self):
        object.__setattr__(self, "subjects", tuple(self.subjects))
        if not self.subjects:
            raise EmptySample("样本为空")

    def __len__(self):
        return len(self.subjects)

    def __iter__(self):
        return iter(self.subjects)

    def __getitem__(self, idx) -> Subject:
        return self.subjects[idx]

    def __eq__(self, other):
        if not isinstance(other, Sample):
            return NotImplemented
        return self.subjects == other.subjects

    __hash__ = None

    @property
    def n(self) -> int:
        return len(self.subjects)

    @property
    def d(self) -> int:
        return self.subjects[0].d

    @cached_property
    def T(self) -> np.ndarray:
        return _frozen_array([s.observation_time for s in self.subjects])

    @cached_property
    def delta(self) -> np.ndarray:
        return _frozen_array([s.event_indicator for s in self.subjects], dtype=bool)

    @cached_property
    def Z(self) -> np.ndarray:
        return _frozen_array([s.covariates for s in self.subjects])

    @property
    def T_max(self) -> float:
        """最大次序统计量 T_(n)"""
        return float(self.T.max())

    @cached_property
    def event_times(self) -> np.ndarray:
        """所有个体的复发事件时间（按个体顺序拼接）"""
        return _frozen_array([s for subj in self.subjects for s in subj.event_times])

    @cached_property
    def event_owner(self) -> np.ndarray:
        """event_times 中每个事件所属个体的下标"""
        return _frozen_array(
            [i for i, subj in enumerate(self.subjects) for _ in subj.event_times], dtype=int
        )

    @property
    def mean_events(self) -> float:
        return self.event_times.size / self.n

    @property
    def censoring_fraction(self) -> float:
        return float(1.0 - self.delta.mean())


@dataclass(frozen=True, eq=False)
class FitReport:
    """
    一次拟合的结果

    theta_hat 的第一个分量恒为 1（可识别性约束），free_components 为其余 d−1 个估计分量。
    """

    theta_hat: np.ndarray
    chosen_measure: DiscreteMeasure
    criterion_value: float
    model: Literal["single-index", "parametric"] = "single-index"
    chosen_bandwidth: float | None = None
    variance_matrix: np.ndarray | None = None
    mse_estimate: float | None = None
    iterations: int = 0
    converged: bool = True
    diagnostics: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        theta = _frozen_array(self.theta_hat).reshape(-1)
        if theta.size < 1 or theta[0] != 1.0:
            raise ValueError("theta_hat 的第一个分量必须恒为 1")
        object.__setattr__(self, "theta_hat", theta)
        if self.variance_matrix is not None:
            variance = _frozen_array(self.variance_matrix)
            if variance.shape != (theta.size - 1, theta.size - 1):
                raise ValueError("方差矩阵维数必须为 (d−1)×(d−1)")
            object.__setattr__(self, "variance_matrix", variance)

    @property
    def free_components(self) -> np.ndarray:
        return self.theta_hat[1:]

    def with_inference(self, variance_matrix, mse_estimate: float) -> "FitReport":
        return replace(self, variance_matrix=variance_matrix, mse_estimate=float(mse_estimate))

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "theta_hat": self.theta_hat.tolist(),
            "free_components": self.free_components.tolist(),
            "chosen_measure": self.chosen_measure.to_dict(),
            "chosen_bandwidth": self.chosen_bandwidth,
            "variance_matrix": None if self.variance_matrix is None else self.variance_matrix.tolist(),
            "mse_estimate": self.mse_estimate,
            "criterion_value": self.criterion_value,
            "iterations": self.iterations,
            "converged": self.converged,
            "diagnostics": self.diagnostics,
        }


def _find_ties(sample_subjects: tuple[Subject, ...]) -> np.ndarray:
    pooled = np.concatenate(
        [np.array([s.observation_time for s in sample_subjects])]
        + [np.asarray(s.event_times, dtype=float) for s in sample_subjects]
    )
    values, counts = np.unique(pooled, return_counts=True)
    return values[counts > 1]


def _jitter_ties(subjects: list[Subject], seed: int) -> list[Subject]:
    """对重复出现的时间点做确定性的微小扰动：观测时间向后推，事件时间向前推"""
    rng = np.random.default_rng(seed)
    scale = JITTER_SCALE * max(s.observation_time for s in subjects)
    seen: set[float] = set()
    jittered = []
    for subj in subjects:
        T = subj.observation_time
        if T in seen:
            T = T + rng.uniform(0.0, 1.0) * scale
        seen.add(T)
        events = []
        for s in subj.event_times:
            if s in seen:
                s = s - rng.uniform(0.0, 1.0) * scale
            seen.add(s)
            events.append(s)
        jittered.append(replace(subj, observation_time=T, event_times=tuple(sorted(events))))
    return jittered


def validate_sample(raw: Sample, jitter: bool = False, seed: int = 0) -> Sample:
    """
    校验样本是否满足模型假设，返回事件时间已排序的样本

    Args:
        raw: 待校验样本
        jitter: 是否对重复时间点做确定性扰动（否则直接报错）
        seed: 扰动使用的随机种子

    Returns:
        Sample: 校验通过的样本

    Raises:
        DimensionMismatch: 协变量维数不一致或为 0
        NegativeTime: 出现负时间或非正的事件时间
        EventAfterObservation: 事件时间晚于观测时间
        TieViolation: 时间点重复
    """
    subjects = list(raw.subjects)
    d = subjects[0].d
    if d < 1:
        raise DimensionMismatch("协变量维数必须至少为 1")

    cleaned = []
    for i, subj in enumerate(subjects):
        if subj.d != d:
            raise DimensionMismatch(f"个体 {i} 的协变量维数为 {subj.d}，期望 {d}")
        if not np.all(np.isfinite(subj.covariates)):
            raise DataError(f"个体 {i} 的协变量含有非有限值")
        T = subj.observation_time
        if not np.isfinite(T) or T < 0:
            raise NegativeTime(f"个体 {i} 的观测时间 {T!r} 不是非负有限数")
        events = np.sort(np.asarray(subj.event_times, dtype=float))
        if events.size:
            if not np.all(np.isfinite(events)) or events[0] <= 0:
                raise NegativeTime(f"个体 {i} 的事件时间必须为正的有限数")
            if events[-1] > T:
                raise EventAfterObservation(
                    f"个体 {i} 的事件时间 {events[-1]!r} 晚于观测时间 {T!r}"
                )
        cleaned.append(replace(subj, event_times=tuple(events.tolist())))

    ties = _find_ties(tuple(cleaned))
    if ties.size:
        if not jitter:
            raise TieViolation(ties)
        logger.warning("检测到 %d 个重复时间点，按种子 %d 做确定性扰动", ties.size, seed)
        cleaned = _jitter_ties(cleaned, seed)
        return validate_sample(Sample(tuple(cleaned)), jitter=False)

    return Sample(tuple(cleaned))


def _infer_format(path: Path, fmt: str | None) -> str:
    if fmt is not None:
        return fmt
    suffix = path.suffix.lower()
    if suffix == ".json":
        return "json"
    if suffix == ".csv":
        return "csv"
    raise SchemaError(f"无法从扩展名推断文件格式: {path}")


def _events_path_for(path: Path) -> Path:
    return path.with_name(f"{path.stem}_events{path.suffix}")


def _as_number(value, field_name: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ParseError(f"期望数值，收到 {value!r}", field=field_name)
    return float(value)


def _subjects_from_json(payload) -> list[Subject]:
    if not isinstance(payload, dict) or "subjects" not in payload or "d" not in payload:
        raise SchemaError("JSON 样本必须包含 'd' 和 'subjects' 字段")
    d = payload["d"]
    if isinstance(d, bool) or not isinstance(d, int):
        raise ParseError(f"期望整数，收到 {d!r}", field="d")
    if not isinstance(payload["subjects"], list):
        raise SchemaError("'subjects' 必须是列表")

    subjects = []
    for i, item in enumerate(payload["subjects"]):
        prefix = f"subjects[{i}]"
        if not isinstance(item, dict):
            raise SchemaError(f"{prefix} 必须是对象")
        missing = {"T", "delta", "Z", "events"} - item.keys()
        if missing:
            raise SchemaError(f"{prefix} 缺少字段: {', '.join(sorted(missing))}")
        T = _as_number(item["T"], f"{prefix}.T")
        if item["delta"] not in (0, 1) or isinstance(item["delta"], float):
            raise ParseError(f"delta 必须为 0 或 1，收到 {item['delta']!r}", field=f"{prefix}.delta")
        if not isinstance(item["Z"], list) or not isinstance(item["events"], list):
            raise SchemaError(f"{prefix}.Z 与 {prefix}.events 必须是列表")
        Z = [_as_number(z, f"{prefix}.Z[{j}]") for j, z in enumerate(item["Z"])]
        if len(Z) != d:
            raise DimensionMismatch(f"{prefix}.Z 的长度为 {len(Z)}，声明的维数为 {d}")
        events = [_as_number(s, f"{prefix}.events[{j}]") for j, s in enumerate(item["events"])]
        subjects.append(Subject(T, bool(item["delta"]), tuple(Z), tuple(events)))
    return subjects


def _numeric_column(frame: pd.DataFrame, column: str) -> np.ndarray:
    converted = pd.to_numeric(frame[column], errors="coerce")
    bad = converted.isna()
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0])
        # 表头占第 1 行
        raise ParseError(f"无法解析为数值: {frame[column].iloc[row]!r}", line=row + 2, field=column)
    return converted.to_numpy(dtype=float)


def _subjects_from_csv(path: Path, events_path: Path) -> list[Subject]:
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
        events = pd.read_csv(events_path, dtype=str, keep_default_na=False)
    except FileNotFoundError:
        raise
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise ParseError(f"CSV 解析失败: {e}")

    z_columns = [c for c in frame.columns if c.startswith("z") and c[1:].isdigit()]
    z_columns.sort(key=lambda c: int(c[1:]))
    for column in ("id", "T", "delta"):
        if column not in frame.columns:
            raise SchemaError(f"{path.name} 缺少 '{column}' 列")
    if not z_columns:
        raise SchemaError(f"{path.name} 缺少协变量列 z1..zd")
    if [int(c[1:]) for c in z_columns] != list(range(1, len(z_columns) + 1)):
        raise SchemaError(f"{path.name} 的协变量列必须为连续的 z1..zd")
    for column in ("id", "event_time"):
        if column not in events.columns:
            raise SchemaError(f"{events_path.name} 缺少 '{column}' 列")

    ids = frame["id"].tolist()
    if len(set(ids)) != len(ids):
        raise SchemaError(f"{path.name} 中存在重复的 id")
    T = _numeric_column(frame, "T")
    delta = _numeric_column(frame, "delta")
    if not np.all(np.isin(delta, (0.0, 1.0))):
        row = int(np.flatnonzero(~np.isin(delta, (0.0, 1.0)))[0])
        raise ParseError("delta 必须为 0 或 1", line=row + 2, field="delta")
    Z = np.column_stack([_numeric_column(frame, c) for c in z_columns])

    event_values = _numeric_column(events, "event_time")
    unknown = set(events["id"]) - set(ids)
    if unknown:
        raise SchemaError(f"{events_path.name} 中的 id 在 {path.name} 中不存在: {sorted(unknown)[:5]}")
    grouped: dict[str, list[float]] = {i: [] for i in ids}
    for subject_id, value in zip(events["id"], event_values):
        grouped[subject_id].append(float(value))

    return [
        Subject(T[k], bool(delta[k]), tuple(Z[k]), tuple(grouped[subject_id]))
        for k, subject_id in enumerate(ids)
    ]


def load_sample(
    path: str | Path,
    fmt: Literal["csv", "json"] | None = None,
    events_path: str | Path | None = None,
    jitter: bool = False,
    seed: int = 0,
) -> Sample:
    """
    从文件读取样本并校验

    Args:
        path: JSON 文件，或 CSV 长格式中的个体文件（id,T,delta,z1..zd）
        fmt: 'csv' 或 'json'，默认由扩展名推断
        events_path: CSV 格式下的事件文件（id,event_time），默认为 <stem>_events.csv
        jitter: 出现重复时间点时是否做确定性扰动
        seed: 扰动种子

    Returns:
        Sample: 通过 validate_sample 的样本
    """
    path = Path(path)
    fmt = _infer_format(path, fmt)
    if fmt == "json":
        try:
            payload = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ParseError(f"JSON 解析失败: {e.msg}", line=e.lineno)
        subjects = _subjects_from_json(payload)
    elif fmt == "csv":
        subjects = _subjects_from_csv(path, Path(events_path) if events_path else _events_path_for(path))
    else:
        raise SchemaError(f"不支持的格式: {fmt}")

    if not subjects:
        raise EmptySample(f"{path} 中没有任何个体")
    sample = validate_sample(Sample(tuple(subjects)), jitter=jitter, seed=seed)
    logger.info("读取样本 %s: n=%d, d=%d, 删失比例 %.3f", path, sample.n, sample.d, sample.censoring_fraction)
    return sample


def sample_to_dict(sample: Sample) -> dict:
    return {
        "d": sample.d,
        "subjects": [
            {
                "T": s.observation_time,
                "delta": int(s.event_indicator),
                "Z": list(s.covariates),
                "events": list(s.event_times),
            }
            for s in sample.subjects
        ],
    }


def save_sample(
    sample: Sample,
    path: str | Path,
    fmt: Literal["csv", "json"] | None = None,
    events_path: str | Path | None = None,
) -> None:
    """
    把样本写入文件；浮点数按可精确还原的十进制写出，读回后逐位相同
    """
    path = Path(path)
    fmt = _infer_format(path, fmt)
    if fmt == "json":
        # json 模块使用 repr 输出浮点数，读回逐位相同
        atomic_write_text(path, json.dumps(sample_to_dict(sample), indent=2))
        return

    frame = pd.DataFrame(
        {
            "id": np.arange(1, sample.n + 1),
            "T": sample.T,
            "delta": sample.delta.astype(int),
            **{f"z{j + 1}": sample.Z[:, j] for j in range(sample.d)},
        }
    )
    events = pd.DataFrame({"id": sample.event_owner + 1, "event_time": sample.event_times})
    atomic_write_text(path, frame.to_csv(index=False, float_format="%.17g"))
    atomic_write_text(
        Path(events_path) if events_path else _events_path_for(path),
        events.to_csv(index=False, float_format="%.17g"),
    )
