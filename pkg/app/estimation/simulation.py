"""
模拟研究：按设计生成复发事件数据，重复运行估计流程并汇总偏差、方差与均方误差。

随机数按 (seed, 重复编号, 个体编号) 派生独立子流，串行与并行运行的结果逐位相同。
"""

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy import stats
from scipy.integrate import quad
from scipy.optimize import brentq

from app.estimation.criteria import (
    LinearIndexModel,
    OptimizerConfig,
    ParametricEstimator,
    SemiparametricEstimator,
    ThetaDomain,
    fit_joint_theta_h,
)
from app.estimation.data_model import DiscreteMeasure, FitReport, Sample, Subject, validate_sample
from app.estimation.inference import load_lattice, select_weight_measure, weight_lattice
from app.estimation.kernel_regression import KernelFamily, KernelSpec, TrimmingSpec
from app.estimation.survival import kaplan_meier_censoring
from app.resources import static_resource
from app.resources.published_tables import (
    BIAS_NORM_TOLERANCE,
    MASS_TOLERANCE,
    PUBLISHED_CENSORING_SCALES,
    PUBLISHED_EVENTS_PER_SUBJECT,
    PublishedEstimator,
    get_table,
)
from app.utils.errors import RecurrentIndexError, ReplicationFailure
from app.utils.grid_util import parse_grid

logger = logging.getLogger(__name__)

Pipeline = Literal["fixed", "adaptive", "joint", "parametric"]


class SimulationConfig(BaseModel):
    """模拟设置，默认值即模拟设计（删失 30% 对应的 λ=1.38）"""

    model_config = ConfigDict(extra="forbid")

    n: int = Field(100, ge=2, description="每次重复的样本量")
    reps: int = Field(100, ge=1, description="重复次数")
    theta0: list[float] = Field(default_factory=lambda: list(static_resource.DESIGN_THETA0), description="真实指标方向")
    intercept: float = Field(static_resource.DESIGN_INTERCEPT, description="强度中的常数项")
    covariate_low: float = Field(static_resource.DESIGN_COVARIATE_BOX[0], description="协变量均匀分布下界")
    covariate_high: float = Field(static_resource.DESIGN_COVARIATE_BOX[1], description="协变量均匀分布上界")
    death_shape: float = Field(static_resource.DESIGN_DEATH_WEIBULL[0], gt=0, description="终止时间 Weibull 形状参数")
    death_scale: float = Field(static_resource.DESIGN_DEATH_WEIBULL[1], gt=0, description="终止时间 Weibull 尺度参数")
    censoring_shape: float = Field(static_resource.DESIGN_CENSORING_SHAPE, gt=0, description="删失时间 Weibull 形状参数")
    censoring_scale: float = Field(1.38, gt=0, description="删失时间 Weibull 尺度参数 λ")
    target_censoring: float | None = Field(None, gt=0, lt=1, description="给定时按目标删失比例校准 λ")
    pipeline: Pipeline = Field("fixed", description="估计流程: fixed, adaptive, joint, parametric")
    kernel: KernelFamily = Field("epanechnikov", description="核函数")
    bandwidth: float = Field(static_resource.DEFAULT_BANDWIDTH, gt=0, description="固定带宽")
    h_grid: list[float] = Field(
        default_factory=lambda: parse_grid(static_resource.DEFAULT_H_GRID), description="联合选择的带宽网格"
    )
    weight_support: list[float] = Field(
        default_factory=lambda: parse_grid(static_resource.DEFAULT_WEIGHT_SUPPORT), description="权重测度支撑点"
    )
    lattice_points: list[float] = Field(
        default_factory=lambda: list(static_resource.DEFAULT_LATTICE_POINTS), description="自适应质量所在的支撑点"
    )
    lattice_levels: list[float] = Field(
        default_factory=lambda: list(static_resource.DEFAULT_LATTICE_LEVELS), description="自适应质量的候选取值"
    )
    lattice_file: str | None = Field(None, description="候选测度 JSON 文件，给定时覆盖格点设置")
    domain_low: float = Field(static_resource.DEFAULT_DOMAIN[0], description="自由分量下界")
    domain_high: float = Field(static_resource.DEFAULT_DOMAIN[1], description="自由分量上界")
    trim_mode: Literal["box", "density"] = Field("density", description="box 只做长方体截尾，density 两阶段截尾")
    trim_c: float | None = Field(None, gt=0, description="密度截尾阈值，默认取 5% 分位数")
    leave_one_out: bool = Field(True, description="核估计是否排除个体自身")
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    seed: int = Field(0, ge=0, lt=2**64, description="64 位随机种子")
    max_failure_fraction: float = Field(0.05, ge=0, le=1, description="允许失败的重复比例上限")

    @field_validator("theta0")
    @classmethod
    def _first_component_is_one(cls, value):
        if not value or value[0] != 1.0:
            raise ValueError("theta0 的第一个分量必须为 1")
        return value

    @model_validator(mode="after")
    def _check_boxes(self):
        if not self.covariate_high > self.covariate_low:
            raise ValueError("协变量上界必须大于下界")
        if not self.domain_high >= self.domain_low:
            raise ValueError("参数空间长方体为空")
        if not set(self.lattice_points) <= set(self.weight_support):
            raise ValueError("lattice_points 必须是 weight_support 的子集")
        if not self.h_grid or any(h <= 0 for h in self.h_grid):
            raise ValueError("带宽网格必须非空且全部为正")
        return self

    @property
    def d(self) -> int:
        return len(self.theta0)

    def kernel_spec(self) -> KernelSpec:
        return KernelSpec(self.kernel, self.bandwidth)

    def domain(self) -> ThetaDomain:
        return ThetaDomain.box(self.d, self.domain_low, self.domain_high)

    def pilot_measure(self) -> DiscreteMeasure:
        return DiscreteMeasure.uniform(self.weight_support)

    def candidates(self) -> list[DiscreteMeasure]:
        if self.lattice_file:
            return load_lattice(self.lattice_file)
        return weight_lattice(self.weight_support, self.lattice_points, self.lattice_levels)

    def estimator(self) -> SemiparametricEstimator:
        trim = TrimmingSpec(threshold=self.trim_c)
        return SemiparametricEstimator(self.kernel_spec(), trim, self.leave_one_out, self.trim_mode == "density")


# ---------------------------------------------------------------------------
# 数据生成
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GeneratedSubject:
    """生成的个体及其潜变量 D、C"""

    subject: Subject
    death_time: float
    censoring_time: float


@dataclass(frozen=True, eq=False)
class GeneratedSample:
    sample: Sample
    death_times: np.ndarray
    censoring_times: np.ndarray


def subject_rng(seed: int, replication: int, index: int) -> np.random.Generator:
    """由 (seed, 重复编号, 个体编号) 派生的独立随机数流"""
    return np.random.default_rng(np.random.SeedSequence([seed, replication, index]))


def generate_subject(config: SimulationConfig, rng: np.random.Generator) -> GeneratedSubject:
    """
    生成一个个体

    Z ~ U[low, high]^d；D、C 为 Weibull(形状, 尺度)；T = min(D, C)，δ = I(D ≤ C)；
    给定 Z 与 T，事件数 ~ Poisson((θ₀'Z + 常数项)·T)，事件时间为 (0, T] 上均匀分布的次序统计量。
    """
    Z = rng.uniform(config.covariate_low, config.covariate_high, size=config.d)
    D = config.death_scale * rng.weibull(config.death_shape)
    C = config.censoring_scale * rng.weibull(config.censoring_shape)
    T = min(D, C)
    intensity = float(np.dot(config.theta0, Z) + config.intercept)
    if intensity < 0:
        raise ValueError(f"泊松强度为负: {intensity}")
    count = rng.poisson(intensity * T)
    events = np.sort(T * (1.0 - rng.random(count)))
    return GeneratedSubject(Subject(T, bool(D <= C), tuple(Z), tuple(events)), float(D), float(C))


def generate_sample(config: SimulationConfig, replication: int) -> GeneratedSample:
    generated = [
        generate_subject(config, subject_rng(config.seed, replication, i)) for i in range(config.n)
    ]
    raw = Sample(tuple(g.subject for g in generated))
    sample = validate_sample(raw, jitter=True, seed=config.seed + replication)
    return GeneratedSample(
        sample,
        np.array([g.death_time for g in generated]),
        np.array([g.censoring_time for g in generated]),
    )


def _weibull(shape: float, scale: float):
    return stats.weibull_min(c=shape, scale=scale)


def censoring_probability(config: SimulationConfig) -> float:
    """理论删失比例 P(C < D) = ∫ f_C(c) S_D(c) dc"""
    death = _weibull(config.death_shape, config.death_scale)
    censoring = _weibull(config.censoring_shape, config.censoring_scale)
    upper = float(death.isf(1e-15))
    value, _ = quad(lambda c: censoring.pdf(c) * death.sf(c), 0.0, upper, limit=200)
    return float(value)


def expected_observation_time(config: SimulationConfig) -> float:
    """E[min(D, C)] = ∫ S_D(t) S_C(t) dt"""
    death = _weibull(config.death_shape, config.death_scale)
    censoring = _weibull(config.censoring_shape, config.censoring_scale)
    upper = float(death.isf(1e-15))
    value, _ = quad(lambda t: death.sf(t) * censoring.sf(t), 0.0, upper, limit=200)
    return float(value)


def expected_events_per_subject(config: SimulationConfig) -> float:
    """每个个体的理论平均观测事件数 (θ₀'E[Z] + 常数项)·E[T]"""
    mean_z = (config.covariate_low + config.covariate_high) / 2.0
    intensity = mean_z * float(np.sum(config.theta0)) + config.intercept
    return intensity * expected_observation_time(config)


def calibrate_censoring_scale(config: SimulationConfig, target: float) -> float:
    """求使 P(C < D) = target 的删失尺度 λ（删失比例关于 λ 单调递减）"""
    if not 0 < target < 1:
        raise ValueError("目标删失比例必须在 (0, 1) 内")

    def gap(scale):
        return censoring_probability(config.model_copy(update={"censoring_scale": scale})) - target

    lower, upper = 1e-3 * config.death_scale, 1e3 * config.death_scale
    return float(brentq(gap, lower, upper, xtol=1e-12))


def resolve_config(config: SimulationConfig) -> SimulationConfig:
    """给定目标删失比例时把 λ 替换为校准值"""
    if config.target_censoring is None:
        return config
    scale = calibrate_censoring_scale(config, config.target_censoring)
    logger.info("目标删失比例 %.2f 对应的删失尺度 λ=%.6f", config.target_censoring, scale)
    return config.model_copy(update={"censoring_scale": scale})


# ---------------------------------------------------------------------------
# 单次重复
# ---------------------------------------------------------------------------


def run_pipeline(sample: Sample, config: SimulationConfig) -> FitReport:
    """对一个样本运行配置中的估计流程"""
    fit = kaplan_meier_censoring(sample)
    w0 = config.pilot_measure()
    domain = config.domain()

    if config.pipeline == "parametric":
        estimator = ParametricEstimator(LinearIndexModel(config.d, config.intercept))
        return estimator.fit(w0, sample, fit, domain, config.optimizer)

    estimator = config.estimator()
    if config.pipeline == "fixed":
        return estimator.fit(w0, sample, fit, domain, config.optimizer)
    if config.pipeline == "adaptive":
        _, report = select_weight_measure(
            config.candidates(), w0, estimator, sample, fit, domain, optimizer_config=config.optimizer
        )
        return report
    report = fit_joint_theta_h(
        config.kernel,
        config.h_grid,
        w0,
        sample,
        fit,
        domain,
        estimator.trim,
        config.optimizer,
        config.leave_one_out,
        estimator.two_stage,
    )
    return report


def _replicate(task: tuple[SimulationConfig, int]) -> dict:
    config, replication = task
    record: dict = {"rep": replication}
    try:
        generated = generate_sample(config, replication)
        record["mean_events"] = generated.sample.mean_events
        record["censoring_fraction"] = generated.sample.censoring_fraction
        report = run_pipeline(generated.sample, config)
    except RecurrentIndexError as e:
        record.update(status="failed", error=f"{type(e).__name__}: {e}")
        return record

    record["status"] = "ok"
    for j, value in enumerate(report.free_components, start=2):
        record[f"theta_{j}"] = float(value)
    for point in config.lattice_points:
        record[f"mass_{point:g}"] = report.chosen_measure.mass_at(point)
    record["bandwidth"] = report.chosen_bandwidth
    record["criterion"] = report.criterion_value
    record["converged"] = report.converged
    record["mse_hat"] = report.mse_estimate
    return record


# ---------------------------------------------------------------------------
# 汇总
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ReplicationSummary:
    """
    重复模拟的汇总

    variance 为各次估计的经验协方差（除以重复次数），因此 mse = ‖bias‖² + trace(variance)。
    """

    bias: np.ndarray
    variance: np.ndarray
    mse: float
    mean_selected_masses: dict[str, float]
    mean_events_per_subject: float
    censoring_fraction: float
    replications: int
    failures: int = 0
    mean_bandwidth: float | None = None

    @property
    def bias_norm(self) -> float:
        return float(np.linalg.norm(self.bias))

    def to_dict(self) -> dict:
        return {
            "bias": self.bias.tolist(),
            "variance": self.variance.tolist(),
            "mse": self.mse,
            "mean_selected_masses": self.mean_selected_masses,
            "mean_events_per_subject": self.mean_events_per_subject,
            "censoring_fraction": self.censoring_fraction,
            "replications": self.replications,
            "failures": self.failures,
            "mean_bandwidth": self.mean_bandwidth,
        }


def mse_from_decomposition(bias, variance) -> float:
    bias = np.asarray(bias, dtype=float)
    return float(bias @ bias + np.trace(np.asarray(variance, dtype=float)))


def summarize_replications(
    estimates,
    theta0_free,
    masses: dict[str, np.ndarray] | None = None,
    mean_events=None,
    censoring_fractions=None,
    failures: int = 0,
    bandwidths=None,
) -> ReplicationSummary:
    """
    Args:
        estimates: (R, d−1) 各次重复的自由分量估计
        theta0_free: 真实自由分量
        masses: 各格点处选出的质量
        mean_events: 每次重复的平均事件数
        censoring_fractions: 每次重复的删失比例
        failures: 失败的重复次数
        bandwidths: 每次重复选出的带宽
    """
    estimates = np.atleast_2d(np.asarray(estimates, dtype=float))
    if estimates.shape[0] == 0:
        raise ReplicationFailure("没有成功的重复")
    errors = estimates - np.asarray(theta0_free, dtype=float)
    bias = errors.mean(axis=0)
    centered = estimates - estimates.mean(axis=0)
    variance = centered.T @ centered / estimates.shape[0]
    mse = float(np.mean(np.sum(errors * errors, axis=1)))
    valid_bandwidths = [] if bandwidths is None else [h for h in bandwidths if h is not None and np.isfinite(h)]
    return ReplicationSummary(
        bias=bias,
        variance=variance,
        mse=mse,
        mean_selected_masses={k: float(np.mean(v)) for k, v in (masses or {}).items()},
        mean_events_per_subject=float(np.mean(mean_events)) if mean_events is not None else float("nan"),
        censoring_fraction=float(np.mean(censoring_fractions)) if censoring_fractions is not None else float("nan"),
        replications=estimates.shape[0],
        failures=failures,
        mean_bandwidth=float(np.mean(valid_bandwidths)) if valid_bandwidths else None,
    )


@dataclass(frozen=True, eq=False)
class ReplicationResult:
    config: SimulationConfig
    summary: ReplicationSummary
    records: pd.DataFrame


def run_replications(config: SimulationConfig, jobs: int = 1) -> ReplicationResult:
    """
    运行 reps 次重复并汇总

    Args:
        config: 模拟设置
        jobs: 工作进程数；结果与 jobs 无关

    Raises:
        ReplicationFailure: 失败比例超过 max_failure_fraction
    """
    config = resolve_config(config)
    tasks = [(config, r) for r in range(1, config.reps + 1)]
    logger.info("开始模拟: n=%d, reps=%d, 流程 %s, jobs=%d", config.n, config.reps, config.pipeline, jobs)

    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = pool.map(_replicate, tasks)
            records = []
            for record in results:
                records.append(record)
                if len(records) % 10 == 0:
                    logger.info("已完成 %d/%d 次重复", len(records), config.reps)
    else:
        records = []
        for task in tasks:
            records.append(_replicate(task))
            if len(records) % 10 == 0:
                logger.info("已完成 %d/%d 次重复", len(records), config.reps)

    failed = [r for r in records if r["status"] != "ok"]
    for record in failed:
        logger.warning("第 %d 次重复失败: %s", record["rep"], record["error"])
    if len(failed) > config.max_failure_fraction * config.reps or len(failed) == len(records):
        raise ReplicationFailure(f"{len(failed)}/{config.reps} 次重复失败，超过允许比例 {config.max_failure_fraction}")

    frame = pd.DataFrame.from_records(records)
    ok = frame[frame["status"] == "ok"]
    theta_columns = [f"theta_{j}" for j in range(2, config.d + 1)]
    mass_columns = [f"mass_{p:g}" for p in config.lattice_points]
    summary = summarize_replications(
        ok[theta_columns].to_numpy(dtype=float),
        config.theta0[1:],
        masses={c.removeprefix("mass_"): ok[c].to_numpy(dtype=float) for c in mass_columns},
        mean_events=ok["mean_events"].to_numpy(dtype=float),
        censoring_fractions=ok["censoring_fraction"].to_numpy(dtype=float),
        failures=len(failed),
        bandwidths=ok["bandwidth"].to_numpy(dtype=float) if ok["bandwidth"].notna().any() else None,
    )
    logger.info("模拟完成: MSE=%.4f, 失败 %d 次", summary.mse, len(failed))
    return ReplicationResult(config, summary, frame)


# ---------------------------------------------------------------------------
# 结果表复现
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ComparisonRow:
    """复现值与发表值的一行对比；passed 为 None 表示仅供参考"""

    quantity: str
    published: float | None
    reproduced: float
    tolerance: str
    passed: bool | None


@dataclass(frozen=True, eq=False)
class TableReproduction:
    table_id: int
    seed: int
    rows: list[ComparisonRow]
    summaries: dict[str, ReplicationSummary]
    records: dict[str, pd.DataFrame] = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(row.passed is not False for row in self.rows)

    def to_dict(self) -> dict:
        return {
            "table": self.table_id,
            "seed": self.seed,
            "passed": self.passed,
            "rows": [row.__dict__ for row in self.rows],
            "summaries": {label: s.to_dict() for label, s in self.summaries.items()},
            "notes": self.notes,
        }

    def to_text(self) -> str:
        frame = pd.DataFrame(
            [
                {
                    "指标": row.quantity,
                    "发表值": "" if row.published is None else f"{row.published:.4f}",
                    "复现值": f"{row.reproduced:.4f}",
                    "容差": row.tolerance,
                    "结果": {True: "PASS", False: "FAIL", None: "-"}[row.passed],
                }
                for row in self.rows
            ]
        )
        text = frame.to_string(index=False) + "\n"
        if self.notes:
            text += "\n" + "\n".join(f"注: {note}" for note in self.notes) + "\n"
        return text


def table_config(row: PublishedEstimator, seed: int, reps: int | None = None, n: int | None = None) -> SimulationConfig:
    """按发表设计构造一行结果对应的模拟设置"""
    return SimulationConfig(
        n=n or 100,
        reps=reps or 100,
        seed=seed,
        pipeline=row.pipeline,
        censoring_scale=PUBLISHED_CENSORING_SCALES[row.censoring],
        target_censoring=row.censoring / 100.0,
    )


def table_configs(
    table_id: int, seed: int, reps: int | None = None, n: int | None = None
) -> list[tuple[PublishedEstimator, SimulationConfig]]:
    """一张结果表每一行的模拟设置，删失尺度已按目标删失比例校准"""
    return [(row, resolve_config(table_config(row, seed, reps, n))) for row in get_table(table_id).estimators]


def design_notes(published: PublishedEstimator, config: SimulationConfig) -> list[str]:
    """说明复现设计与发表设计不一致之处"""
    literal = config.model_copy(update={"censoring_scale": PUBLISHED_CENSORING_SCALES[published.censoring]})
    return [
        f"{published.label}: 发表的删失尺度 λ={literal.censoring_scale:g} 在该设计下的理论删失比例为 "
        f"{censoring_probability(literal):.3f}，复现改用校准后的 λ={config.censoring_scale:.4f}"
        f"（删失比例 {published.censoring}%）",
        f"{published.label}: 该设计下每个个体的理论平均事件数为 {expected_events_per_subject(config):.2f}，"
        f"与发表的约 {PUBLISHED_EVENTS_PER_SUBJECT:g} 不符，平均事件数一行仅供参考，不参与验收",
    ]


def reproduce_table(
    table_id: int,
    seed: int,
    reps: int | None = None,
    n: int | None = None,
    jobs: int = 1,
    configs: list[tuple[PublishedEstimator, SimulationConfig]] | None = None,
) -> TableReproduction:
    """
    复现一张结果表并与发表值逐项比较

    Args:
        table_id: 1、2 或 3
        seed: 随机种子
        reps: 重复次数（默认 100）
        n: 样本量（默认 100）
        jobs: 工作进程数
        configs: 已解析的各行设置（默认由 table_configs 生成）
    """
    table = get_table(table_id)
    configs = configs or table_configs(table_id, seed, reps, n)
    rows: list[ComparisonRow] = []
    summaries: dict[str, ReplicationSummary] = {}
    records: dict[str, pd.DataFrame] = {}
    notes: list[str] = []

    for published, config in configs:
        notes.extend(design_notes(published, config))
        result = run_replications(config, jobs)
        summary = result.summary
        summaries[published.label] = summary
        records[published.label] = result.records

        low, high = published.mse_band
        rows.append(
            ComparisonRow(f"{published.label} MSE", published.mse, summary.mse, f"[{low}, {high}]", low <= summary.mse <= high)
        )
        bias_gap = abs(summary.bias_norm - published.bias_norm)
        rows.append(
            ComparisonRow(
                f"{published.label} 偏差范数",
                published.bias_norm,
                summary.bias_norm,
                f"±{BIAS_NORM_TOLERANCE}",
                bias_gap <= BIAS_NORM_TOLERANCE,
            )
        )
        rows.append(
            ComparisonRow(f"{published.label} 删失比例", published.censoring / 100.0, summary.censoring_fraction, "-", None)
        )
        rows.append(
            ComparisonRow(
                f"{published.label} 平均事件数",
                PUBLISHED_EVENTS_PER_SUBJECT,
                summary.mean_events_per_subject,
                "仅供参考",
                None,
            )
        )

        if published.pipeline == "adaptive" and published.censoring in table.mean_masses:
            expected = table.mean_masses[published.censoring]
            observed = [summary.mean_selected_masses[f"{p:g}"] for p in static_resource.DEFAULT_LATTICE_POINTS]
            for point, target, value in zip(static_resource.DEFAULT_LATTICE_POINTS, expected, observed):
                rows.append(
                    ComparisonRow(
                        f"{published.label} w({point:g})",
                        target,
                        value,
                        f"±{MASS_TOLERANCE}",
                        abs(value - target) <= MASS_TOLERANCE,
                    )
                )
            monotone = all(a >= b for a, b in zip(observed, observed[1:]))
            rows.append(ComparisonRow(f"{published.label} 质量随 k 不增", None, float(monotone), "单调", monotone))

    if table.adaptive_below_fixed:
        fixed = summaries["w0"].mse
        adaptive = summaries["w_hat"].mse
        rows.append(ComparisonRow("自适应 MSE − 固定 MSE", None, adaptive - fixed, "< 0", adaptive < fixed))

    reproduction = TableReproduction(table_id, seed, rows, summaries, records, notes)
    logger.info("结果表 %d 复现%s", table_id, "通过" if reproduction.passed else "未通过")
    return reproduction
