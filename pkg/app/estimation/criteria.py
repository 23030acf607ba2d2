"""
加权最小二乘准则 M_{n,w}（参数模型与单指标半参数模型）、单纯形优化以及 (θ, h) 联合选择。
"""

import abc
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from pydantic import BaseModel, Field
from scipy.optimize import minimize
from scipy.stats import qmc

from app.estimation.data_model import DiscreteMeasure, FitReport, Sample
from app.estimation.kernel_regression import KernelFamily, KernelSpec, TrimmingSpec, smooth_surface, trim_mask
from app.estimation.survival import CensoringFit, rescaled_matrix
from app.utils.errors import AllTrimmed, NumericalError, OptimizerDiverged, SchemaError

logger = logging.getLogger(__name__)


class OptimizerConfig(BaseModel):
    """单纯形（Nelder-Mead）优化设置"""

    max_iterations: int = Field(2000, gt=0, description="每个起点的最大迭代次数")
    xatol: float = Field(1e-6, gt=0, description="单纯形直径收敛阈值")
    fatol: float = Field(1e-10, gt=0, description="单纯形顶点准则值差异收敛阈值")
    n_starts: int = Field(5, ge=1, description="确定性多起点个数")


# ---------------------------------------------------------------------------
# 参数模型
# ---------------------------------------------------------------------------


class ParametricModel(abc.ABC):
    """
    已知形式的累积均值模型 μ(t|z) = μ₀(t, z; θ)

    mu0 与 grad_theta_mu0 对时间向量 t (m,) 与协变量矩阵 Z (n, d) 做广播，
    分别返回 (n, m) 与 (n, m, d) 数组。
    """

    name = "parametric"

    def __init__(self, d: int):
        if d < 1:
            raise ValueError("协变量维数必须至少为 1")
        self.d = d

    @abc.abstractmethod
    def mu0(self, t, Z, theta) -> np.ndarray: ...

    @abc.abstractmethod
    def grad_theta_mu0(self, t, Z, theta) -> np.ndarray: ...


class LinearIndexModel(ParametricModel):
    """μ₀(t, z; θ) = (θ'z + a)·t^p，模拟设计对应 a=5、p=1"""

    name = "linear"

    def __init__(self, d: int, intercept: float = 0.0, power: float = 1.0):
        super().__init__(d)
        if not power > 0:
            raise ValueError("时间幂次必须为正")
        self.intercept = float(intercept)
        self.power = float(power)

    def mu0(self, t, Z, theta):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        index = np.asarray(Z, dtype=float) @ np.asarray(theta, dtype=float) + self.intercept
        return index[:, None] * t[None, :] ** self.power

    def grad_theta_mu0(self, t, Z, theta):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        Z = np.asarray(Z, dtype=float)
        return Z[:, None, :] * (t**self.power)[None, :, None]


class ExponentialIndexModel(ParametricModel):
    """比例均值形式 μ₀(t, z; θ) = c·t·exp(θ'z)"""

    name = "exponential"

    def __init__(self, d: int, scale: float = 1.0):
        super().__init__(d)
        if not scale > 0:
            raise ValueError("尺度参数必须为正")
        self.scale = float(scale)

    def mu0(self, t, Z, theta):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        level = self.scale * np.exp(np.asarray(Z, dtype=float) @ np.asarray(theta, dtype=float))
        return level[:, None] * t[None, :]

    def grad_theta_mu0(self, t, Z, theta):
        Z = np.asarray(Z, dtype=float)
        return self.mu0(t, Z, theta)[:, :, None] * Z[:, None, :]


def load_parametric_model(spec: str | Path, d: int) -> ParametricModel:
    """
    读取参数模型：'linear' 或 JSON 文件，如 {"family": "linear", "intercept": 5, "power": 1}
    """
    if str(spec) == "linear":
        return LinearIndexModel(d)
    path = Path(spec)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise SchemaError(f"模型描述文件 {path} 不是合法 JSON: {e.msg}")
    family = payload.get("family")
    if family == "linear":
        return LinearIndexModel(d, payload.get("intercept", 0.0), payload.get("power", 1.0))
    if family == "exponential":
        return ExponentialIndexModel(d, payload.get("scale", 1.0))
    raise SchemaError(f"不支持的模型族: {family!r}")


# ---------------------------------------------------------------------------
# 参数空间与优化
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ThetaDomain:
    """θ 自由分量（第 2..d 个）的长方体约束，第一个分量恒为 1"""

    lower: tuple[float, ...]
    upper: tuple[float, ...]

    def __post_init__(self):
        lower = tuple(float(v) for v in self.lower)
        upper = tuple(float(v) for v in self.upper)
        if len(lower) != len(upper) or any(lo > hi for lo, hi in zip(lower, upper)):
            raise ValueError("参数空间长方体为空")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @classmethod
    def box(cls, d: int, low: float = 0.0, high: float = 3.0) -> "ThetaDomain":
        return cls((low,) * (d - 1), (high,) * (d - 1))

    @property
    def dim(self) -> int:
        return len(self.lower)

    def full_theta(self, free) -> np.ndarray:
        return np.concatenate(([1.0], np.asarray(free, dtype=float)))

    def shrink_around(self, center, half_width: float = 0.5) -> "ThetaDomain":
        center = np.asarray(center, dtype=float)
        lower = np.maximum(np.asarray(self.lower), center - half_width)
        upper = np.minimum(np.asarray(self.upper), center + half_width)
        return ThetaDomain(tuple(lower), tuple(upper))

    def start_points(self, n_starts: int, first=None) -> np.ndarray:
        """确定性起点：区域中心（或给定点）加上非随机 Halton 点"""
        lower = np.asarray(self.lower)
        upper = np.asarray(self.upper)
        first = (lower + upper) / 2 if first is None else np.clip(np.asarray(first, dtype=float), lower, upper)
        if n_starts == 1 or self.dim == 0:
            return first[None, :]
        halton = qmc.Halton(d=self.dim, scramble=False).random(n_starts)[1:]
        return np.vstack([first, lower + halton * (upper - lower)])


@dataclass(frozen=True)
class _SearchResult:
    free: np.ndarray
    value: float
    iterations: int
    converged: bool
    start_values: list[float] = field(default_factory=list)


def _minimize_box(objective, domain: ThetaDomain, config: OptimizerConfig, starts: np.ndarray) -> _SearchResult:
    """在长方体内做多起点 Nelder-Mead，返回准则值最小的起点结果（并列取先出现者）"""

    def guarded(free):
        try:
            return objective(free)
        except NumericalError as e:
            logger.debug("θ=%s 处准则不可计算: %s", np.round(free, 6), e)
            return np.inf

    if domain.dim == 0:
        value = float(guarded(np.zeros(0)))
        if not np.isfinite(value):
            raise OptimizerDiverged("准则在唯一可行点处不可计算")
        return _SearchResult(np.zeros(0), value, 0, True, [value])

    bounds = list(zip(domain.lower, domain.upper))
    results = []
    for k, x0 in enumerate(starts):
        res = minimize(
            guarded,
            x0,
            method="Nelder-Mead",
            bounds=bounds,
            options={"maxiter": config.max_iterations, "xatol": config.xatol, "fatol": config.fatol},
        )
        logger.debug("起点 %d: 准则值 %.10g, 迭代 %d, 收敛 %s", k, res.fun, res.nit, res.success)
        results.append(res)

    if all(not res.success for res in results):
        raise OptimizerDiverged(f"全部 {len(results)} 个起点均达到迭代上限 {config.max_iterations}")
    values = [float(res.fun) for res in results]
    best = int(np.argmin(values))
    if not np.isfinite(values[best]):
        raise OptimizerDiverged("参数空间内没有准则值有限的点")
    res = results[best]
    if not res.success:
        logger.warning("最优起点未收敛（迭代 %d 次）", res.nit)
    return _SearchResult(
        free=np.asarray(res.x, dtype=float),
        value=values[best],
        iterations=int(res.nit),
        converged=bool(res.success),
        start_values=values,
    )


# ---------------------------------------------------------------------------
# 准则函数
# ---------------------------------------------------------------------------


def _truncated_measure(w: DiscreteMeasure, upper: float) -> tuple[np.ndarray, np.ndarray]:
    """去掉大于 T_(n) 的支撑点，对应 ∫_0^{T_(n)} 截断"""
    keep = w.support <= upper
    return w.support[keep], w.masses[keep]


@dataclass(frozen=True, eq=False)
class _Design:
    """按观测时间排序后的样本数组；固定求和顺序，使结果与个体排列无关"""

    order: np.ndarray
    Z: np.ndarray
    Y: np.ndarray
    support: np.ndarray
    masses: np.ndarray

    @classmethod
    def build(cls, w: DiscreteMeasure, sample: Sample, fit: CensoringFit) -> "_Design":
        support, masses = _truncated_measure(w, sample.T_max)
        # 校验后的观测时间互不相同，按 T 排序即为规范顺序
        order = np.argsort(sample.T, kind="stable")
        Y = rescaled_matrix(sample, fit, support)[order]
        return cls(order, sample.Z[order], Y, support, masses)

    @property
    def n(self) -> int:
        return self.Z.shape[0]


def _weighted_squares(mu: np.ndarray, design: _Design, weights: np.ndarray | None = None) -> float:
    per_subject = (mu * mu - 2.0 * design.Y * mu) @ design.masses
    if weights is not None:
        per_subject = per_subject * weights
    return float(np.sum(per_subject) / design.n)


def criterion_parametric(theta, model: ParametricModel, w: DiscreteMeasure, sample: Sample, fit: CensoringFit) -> float:
    """
    参数模型的经验准则

    M_{n,w}(θ, μ₀) = n⁻¹Σ_i ∫_0^{T_(n)} μ₀(t,Z_i;θ)² dw(t) − 2n⁻¹Σ_i ∫_0^{T_(n)} Ŷ_i(t) μ₀(t,Z_i;θ) dw(t)
    """
    design = _Design.build(w, sample, fit)
    if design.support.size == 0:
        return 0.0
    return _weighted_squares(model.mu0(design.support, design.Z, theta), design)


def criterion_parametric_gradient(
    theta, model: ParametricModel, w: DiscreteMeasure, sample: Sample, fit: CensoringFit
) -> np.ndarray:
    """参数准则对完整 θ 的解析梯度 2n⁻¹Σ_i ∫ (μ₀ − Ŷ_i) ∇_θμ₀ dw"""
    design = _Design.build(w, sample, fit)
    theta = np.asarray(theta, dtype=float)
    if design.support.size == 0:
        return np.zeros(theta.size)
    residual = model.mu0(design.support, design.Z, theta) - design.Y
    grad = model.grad_theta_mu0(design.support, design.Z, theta)
    return 2.0 * np.einsum("im,m,imd->d", residual, design.masses, grad) / design.n


def _semiparametric_value(theta, design: _Design, spec: KernelSpec, mask: np.ndarray, leave_one_out: bool) -> float:
    if not np.any(mask):
        raise AllTrimmed("所有个体均被截尾")
    if design.support.size == 0:
        return 0.0
    surface = smooth_surface(theta, design.Z, design.Y, spec, leave_one_out=leave_one_out, required=mask)
    return _weighted_squares(surface.values, design, mask.astype(float))


def criterion_semiparametric(
    theta,
    spec: KernelSpec,
    w: DiscreteMeasure,
    sample: Sample,
    fit: CensoringFit,
    trim: TrimmingSpec | None = None,
    leave_one_out: bool = True,
    mask: np.ndarray | None = None,
) -> float:
    """
    单指标模型的经验准则

    M_{n,w}(θ, μ̂_θ) = n⁻¹Σ_i J_i ∫ μ̂_θ(t,θ'Z_i)² dw(t) − 2n⁻¹Σ_i J_i ∫ Ŷ_i(t) μ̂_θ(t,θ'Z_i) dw(t)

    Args:
        theta: 完整 d 维指标方向
        spec: 核函数设置
        w: 权重测度
        sample: 样本
        fit: 删失分布拟合结果
        trim: 截尾设置，None 表示不截尾
        leave_one_out: μ̂ 是否对个体 i 排除其自身
        mask: 直接给定的截尾指示（按样本原顺序），优先于 trim

    Raises:
        AllTrimmed: 全部个体被截尾
        EmptyWindow: 某个未截尾个体的带宽窗口为空
    """
    theta = np.asarray(theta, dtype=float)
    design = _Design.build(w, sample, fit)
    if mask is None:
        mask = np.ones(sample.n, dtype=bool) if trim is None else trim_mask(theta, trim, spec, sample.Z)
    return _semiparametric_value(theta, design, spec, np.asarray(mask, dtype=bool)[design.order], leave_one_out)


def fit_parametric(
    model: ParametricModel,
    w: DiscreteMeasure,
    sample: Sample,
    fit: CensoringFit,
    domain: ThetaDomain,
    optimizer_config: OptimizerConfig | None = None,
) -> FitReport:
    """
    θ̂(w) = argmin_θ M_{n,w}(θ, μ₀)，长方体内多起点单纯形搜索

    Raises:
        OptimizerDiverged: 全部起点达到迭代上限
    """
    config = optimizer_config or OptimizerConfig()
    design = _Design.build(w, sample, fit)

    def objective(free):
        if design.support.size == 0:
            return 0.0
        return _weighted_squares(model.mu0(design.support, design.Z, domain.full_theta(free)), design)

    result = _minimize_box(objective, domain, config, domain.start_points(config.n_starts))
    logger.info("参数模型拟合完成: θ̂=%s, 准则值 %.8g", np.round(result.free, 5), result.value)
    return FitReport(
        theta_hat=domain.full_theta(result.free),
        chosen_measure=w,
        criterion_value=result.value,
        model="parametric",
        iterations=result.iterations,
        converged=result.converged,
        diagnostics={"start_values": result.start_values, "mu0": model.name},
    )


def stage_trims(trim: TrimmingSpec | None, Z: np.ndarray) -> tuple[TrimmingSpec, TrimmingSpec]:
    """两阶段拟合各自使用的截尾：(第一阶段长方体 B, 第二阶段密度截尾)"""
    if trim is not None and trim.mode == "preliminary_set":
        return trim, TrimmingSpec()
    return TrimmingSpec.quantile_box(Z), trim or TrimmingSpec()


def fit_semiparametric(
    spec: KernelSpec,
    w: DiscreteMeasure,
    sample: Sample,
    fit: CensoringFit,
    domain: ThetaDomain,
    trim: TrimmingSpec | None = None,
    optimizer_config: OptimizerConfig | None = None,
    leave_one_out: bool = True,
    two_stage: bool = True,
    stage_half_width: float = 0.5,
) -> FitReport:
    """
    θ̂(w) = argmin_θ M_{n,w}(θ, μ̂_θ)，两阶段截尾

    第一阶段用协变量长方体 B 截尾得到初步估计 θ_n；第二阶段固定 J_n(θ_n'Z, c)
    密度截尾，并把参数空间收缩到 θ_n 附近（每个分量半宽 stage_half_width）再次搜索。

    Args:
        spec: 核函数设置
        w: 权重测度
        sample: 样本
        fit: 删失分布拟合结果
        domain: 自由分量的长方体
        trim: preliminary_set 模式时作为第一阶段的 B（第二阶段用默认密度截尾）；
              density_threshold 模式时作为第二阶段设置（第一阶段用 10%/90% 分位长方体）
        optimizer_config: 单纯形设置
        leave_one_out: μ̂ 是否排除个体自身
        two_stage: False 时只做第一阶段

    Returns:
        FitReport: 拟合结果（未填充方差）
    """
    config = optimizer_config or OptimizerConfig()
    preliminary, density_trim = stage_trims(trim, sample.Z)

    design = _Design.build(w, sample, fit)

    def objective_for(mask):
        ordered = mask[design.order]

        def objective(free):
            return _semiparametric_value(domain.full_theta(free), design, spec, ordered, leave_one_out)

        return objective

    # 1. 第一阶段：长方体截尾
    box_mask = trim_mask(None, preliminary, spec, sample.Z)
    if not np.any(box_mask):
        raise AllTrimmed("初步截尾长方体内没有任何个体")
    stage1 = _minimize_box(objective_for(box_mask), domain, config, domain.start_points(config.n_starts))
    logger.info("第一阶段完成: θ_n=%s, 准则值 %.8g (h=%g)", np.round(stage1.free, 5), stage1.value, spec.bandwidth)

    diagnostics = {
        "stage1_theta": domain.full_theta(stage1.free).tolist(),
        "stage1_criterion": stage1.value,
        "box_trimmed": int((~box_mask).sum()),
    }
    result, iterations = stage1, stage1.iterations

    # 2. 第二阶段：固定 θ_n 处的密度截尾，在 θ_n 附近重新搜索
    if two_stage:
        theta_n = domain.full_theta(stage1.free)
        density_mask = trim_mask(theta_n, density_trim, spec, sample.Z)
        if not np.any(density_mask):
            raise AllTrimmed("密度截尾后没有剩余个体")
        local = domain.shrink_around(stage1.free, stage_half_width)
        stage2 = _minimize_box(
            objective_for(density_mask), local, config, local.start_points(config.n_starts, first=stage1.free)
        )
        logger.info("第二阶段完成: θ̂=%s, 准则值 %.8g", np.round(stage2.free, 5), stage2.value)
        diagnostics["density_trimmed"] = int((~density_mask).sum())
        diagnostics["start_values"] = stage2.start_values
        result, iterations = stage2, iterations + stage2.iterations
    else:
        diagnostics["start_values"] = stage1.start_values

    return FitReport(
        theta_hat=domain.full_theta(result.free),
        chosen_measure=w,
        criterion_value=result.value,
        model="single-index",
        chosen_bandwidth=spec.bandwidth,
        iterations=iterations,
        converged=result.converged,
        diagnostics=diagnostics,
    )


def fit_joint_theta_h(
    spec_family: KernelFamily,
    h_grid,
    w: DiscreteMeasure,
    sample: Sample,
    fit: CensoringFit,
    domain: ThetaDomain,
    trim: TrimmingSpec | None = None,
    optimizer_config: OptimizerConfig | None = None,
    leave_one_out: bool = True,
    two_stage: bool = True,
) -> FitReport:
    """
    (θ̂, ĥ) = argmin_{θ, h ∈ 网格} M_{n,w}(θ, μ̂_{θ,h})

    对每个带宽分别拟合，取准则值最小者；并列时取较小的带宽。
    某个带宽上拟合失败时跳过该带宽，全部失败才报错。
    """
    grid = sorted(set(float(h) for h in h_grid))
    if not grid:
        raise ValueError("带宽网格为空")

    best: FitReport | None = None
    table: dict[str, float | None] = {}
    for h in grid:
        try:
            report = fit_semiparametric(
                KernelSpec(spec_family, h), w, sample, fit, domain, trim, optimizer_config, leave_one_out, two_stage
            )
        except (NumericalError, OptimizerDiverged) as e:
            logger.warning("带宽 h=%g 处拟合失败，跳过: %s", h, e)
            table[repr(h)] = None
            continue
        table[repr(h)] = report.criterion_value
        if best is None or report.criterion_value < best.criterion_value:
            best = report

    if best is None:
        raise OptimizerDiverged("带宽网格上所有拟合均失败")
    logger.info("联合选择带宽 ĥ=%g, θ̂=%s", best.chosen_bandwidth, np.round(best.free_components, 5))
    return FitReport(
        theta_hat=best.theta_hat,
        chosen_measure=w,
        criterion_value=best.criterion_value,
        model="single-index",
        chosen_bandwidth=best.chosen_bandwidth,
        iterations=best.iterations,
        converged=best.converged,
        diagnostics={**best.diagnostics, "criterion_by_bandwidth": table},
    )


def profile_bandwidth(
    theta,
    spec_family: KernelFamily,
    h_grid,
    w: DiscreteMeasure,
    sample: Sample,
    fit: CensoringFit,
    trim: TrimmingSpec | None = None,
    leave_one_out: bool = True,
) -> tuple[float, dict[float, float]]:
    """
    固定 θ 时的带宽剖面 h ↦ M_{n,w}(θ, μ̂_{θ,h})

    θ 取真值时得到联合选择所逼近的 h₀；θ 取估计值时即为两步法的交叉验证带宽。
    """
    theta = np.asarray(theta, dtype=float)
    table = {}
    for h in sorted(set(float(h) for h in h_grid)):
        spec = KernelSpec(spec_family, h)
        try:
            table[h] = criterion_semiparametric(theta, spec, w, sample, fit, trim, leave_one_out)
        except NumericalError as e:
            logger.debug("带宽 h=%g 处准则不可计算: %s", h, e)
            table[h] = np.inf
    best = min(table, key=lambda h: (table[h], h))
    return best, table


# ---------------------------------------------------------------------------
# 统一的估计器接口（推断模块通过它同时服务两种模型）
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class MeanSurface:
    """
    估计的累积均值在时间网格上的取值

    grid_values: (n, G) 细网格上的 μ(t, Z_i)，用于 dμ 积分
    support_values: (n, m) 测度支撑点上的 μ(t, Z_i)
    support_gradients: (n, m, d−1) 支撑点上对自由分量的梯度
    """

    grid_values: np.ndarray
    support_values: np.ndarray
    support_gradients: np.ndarray


class MeanEstimator(abc.ABC):
    model_name: str

    @abc.abstractmethod
    def fit(
        self,
        w: DiscreteMeasure,
        sample: Sample,
        fit: CensoringFit,
        domain: ThetaDomain,
        optimizer_config: OptimizerConfig | None = None,
    ) -> FitReport: ...

    @abc.abstractmethod
    def mean_surface(self, report: FitReport, sample: Sample, fit: CensoringFit, grid, support) -> MeanSurface: ...


class SemiparametricEstimator(MeanEstimator):
    model_name = "single-index"

    def __init__(
        self,
        spec: KernelSpec,
        trim: TrimmingSpec | None = None,
        leave_one_out: bool = True,
        two_stage: bool = True,
    ):
        self.spec = spec
        self.trim = trim
        self.leave_one_out = leave_one_out
        self.two_stage = two_stage

    def fit(self, w, sample, fit, domain, optimizer_config=None):
        return fit_semiparametric(
            self.spec, w, sample, fit, domain, self.trim, optimizer_config, self.leave_one_out, self.two_stage
        )

    def fitted_mask(self, report: FitReport, sample: Sample) -> np.ndarray:
        """拟合最后一个阶段实际使用的截尾指示"""
        spec = self.spec.with_bandwidth(report.chosen_bandwidth) if report.chosen_bandwidth else self.spec
        preliminary, density_trim = stage_trims(self.trim, sample.Z)
        if not self.two_stage:
            return trim_mask(None, preliminary, spec, sample.Z)
        # 密度截尾固定在第一阶段的 θ_n 处
        anchor = np.asarray(report.diagnostics.get("stage1_theta", report.theta_hat), dtype=float)
        return trim_mask(anchor, density_trim, spec, sample.Z)

    def mean_surface(self, report, sample, fit, grid, support):
        theta = report.theta_hat
        spec = self.spec.with_bandwidth(report.chosen_bandwidth) if report.chosen_bandwidth else self.spec
        # 截尾个体的窗口允许为空，其估计值与梯度记为 0
        mask = self.fitted_mask(report, sample)
        on_grid = smooth_surface(
            theta, sample.Z, rescaled_matrix(sample, fit, grid), spec, self.leave_one_out, required=mask
        )
        on_support = smooth_surface(
            theta,
            sample.Z,
            rescaled_matrix(sample, fit, support),
            spec,
            self.leave_one_out,
            with_gradient=True,
            required=mask,
        )
        return MeanSurface(on_grid.values, on_support.values, on_support.gradients[:, :, 1:])


class ParametricEstimator(MeanEstimator):
    model_name = "parametric"

    def __init__(self, model: ParametricModel):
        self.model = model

    def fit(self, w, sample, fit, domain, optimizer_config=None):
        return fit_parametric(self.model, w, sample, fit, domain, optimizer_config)

    def mean_surface(self, report, sample, fit, grid, support):
        theta = report.theta_hat
        return MeanSurface(
            self.model.mu0(grid, sample.Z, theta),
            self.model.mu0(support, sample.Z, theta),
            self.model.grad_theta_mu0(support, sample.Z, theta)[:, :, 1:],
        )
