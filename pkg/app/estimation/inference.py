"""
插入式（plug-in）方差估计、均方误差估计 Ê² 与权重测度的自适应选择。

参数模型与单指标模型共用同一条计算路径：估计器只需提供 μ 在时间网格上的取值及其梯度。
"""

import itertools
import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from app.estimation.criteria import (
    MeanEstimator,
    OptimizerConfig,
    SemiparametricEstimator,
    ThetaDomain,
)
from app.estimation.data_model import DiscreteMeasure, FitReport, Sample, Subject
from app.estimation.kernel_regression import KernelSpec, TrimmingSpec
from app.estimation.survival import CensoringFit, eta_hat_matrix, rescaled_matrix
from app.utils.errors import AllCandidatesSingular, SchemaError, SingularSigma
from app.utils.grid_util import atomic_write_text

logger = logging.getLogger(__name__)

CONDITION_LIMIT = 1e12


@dataclass(frozen=True, eq=False)
class VarianceReport:
    """
    ξ̂、Σ̂、Δ̂、V̂ = Σ̂⁻¹Δ̂Σ̂⁻¹ 以及 Ê² = ξ̂'Σ̂⁻¹Σ̂⁻¹ξ̂
    """

    xi_hat: np.ndarray
    sigma_hat: np.ndarray
    delta_hat: np.ndarray
    v_hat: np.ndarray
    mse_hat: float

    def to_dict(self) -> dict:
        return {
            "xi_hat": self.xi_hat.tolist(),
            "sigma_hat": self.sigma_hat.tolist(),
            "delta_hat": self.delta_hat.tolist(),
            "v_hat": self.v_hat.tolist(),
            "mse_hat": self.mse_hat,
        }


def _symmetrize(matrix: np.ndarray) -> np.ndarray:
    return (matrix + matrix.T) / 2.0


def _inverse_symmetric(sigma: np.ndarray) -> np.ndarray:
    """对称特征分解求逆；条件数过大时直接报错，不做伪逆"""
    eigenvalues, vectors = np.linalg.eigh(sigma)
    smallest = np.min(np.abs(eigenvalues)) if eigenvalues.size else 1.0
    largest = np.max(np.abs(eigenvalues)) if eigenvalues.size else 1.0
    if smallest == 0 or largest / smallest >= CONDITION_LIMIT:
        raise SingularSigma(f"Σ̂ 近似奇异（特征值范围 [{eigenvalues.min():.3g}, {eigenvalues.max():.3g}]）")
    return _symmetrize((vectors / eigenvalues) @ vectors.T)


@dataclass(frozen=True, eq=False)
class InfluenceComponents:
    """
    在支撑网格 t_1 < … < t_m（t_k ≤ T_(n)）上预先计算的影响函数分量

    对任意支撑在该网格上的权重测度 w，
    ψ̂_l = Σ_k w({t_k}) (residual_terms[l,k] + censoring_terms[l,k])，
    Σ̂ = Σ_k w({t_k}) gradient_outer[k]。
    因此在同一个 θ̂ 下比较大量候选测度只需矩阵乘法。

    Args:
        support: 支撑网格 (m,)
        residual_terms: (n, m, p)，(Ŷ_l(t_k) − μ̂(t_k, Z_l)) ∇μ̂(t_k, Z_l)
        censoring_terms: (n, m, p)，∫_0^{t_k} η̂_{s−}(T_l, δ_l) n⁻¹Σ_i ∇μ̂(t_k, Z_i) dμ̂(s, Z_i)
        gradient_outer: (m, p, p)，n⁻¹Σ_i ∇μ̂(t_k, Z_i)∇μ̂(t_k, Z_i)'
    """

    support: np.ndarray
    residual_terms: np.ndarray
    censoring_terms: np.ndarray
    gradient_outer: np.ndarray

    @property
    def n(self) -> int:
        return self.residual_terms.shape[0]

    @property
    def p(self) -> int:
        return self.residual_terms.shape[2]

    def masses(self, w: DiscreteMeasure) -> np.ndarray:
        keep = w.support <= (self.support[-1] if self.support.size else -np.inf)
        truncated = DiscreteMeasure(w.support[keep], w.masses[keep])
        return truncated.aligned_masses(self.support)

    def psi(self, w: DiscreteMeasure) -> np.ndarray:
        """所有个体的 ψ̂，形状 (n, p)"""
        a = self.masses(w)
        return np.einsum("k,lkp->lp", a, self.residual_terms + self.censoring_terms)

    def sigma(self, w: DiscreteMeasure) -> np.ndarray:
        return _symmetrize(np.einsum("k,kpq->pq", self.masses(w), self.gradient_outer))

    def report(self, w: DiscreteMeasure) -> VarianceReport:
        psi = self.psi(w)
        xi = psi.mean(axis=0)
        centered = psi - xi
        delta = _symmetrize(centered.T @ centered / self.n)
        sigma = self.sigma(w)
        inverse = _inverse_symmetric(sigma)
        v_hat = _symmetrize(inverse @ delta @ inverse)
        direction = inverse @ xi
        return VarianceReport(xi, sigma, delta, v_hat, float(direction @ direction))


def _as_estimator(estimator, trim: TrimmingSpec | None = None) -> MeanEstimator:
    if isinstance(estimator, KernelSpec):
        return SemiparametricEstimator(estimator, trim)
    return estimator


def _as_report(theta_hat, estimator: MeanEstimator, w: DiscreteMeasure) -> FitReport:
    if isinstance(theta_hat, FitReport):
        return theta_hat
    bandwidth = estimator.spec.bandwidth if isinstance(estimator, SemiparametricEstimator) else None
    return FitReport(
        theta_hat=np.asarray(theta_hat, dtype=float),
        chosen_measure=w,
        criterion_value=float("nan"),
        model=estimator.model_name,
        chosen_bandwidth=bandwidth,
    )


def influence_components(
    theta_hat,
    estimator: MeanEstimator | KernelSpec,
    support,
    sample: Sample,
    fit: CensoringFit,
) -> InfluenceComponents:
    """
    计算 ψ̂ 与 Σ̂ 所需的全部分量

    dμ̂ 积分在 {0} ∪ 事件时间 ∪ Ĝ 跳跃点 ∪ 观测时间 ∪ 支撑点 组成的细网格上精确求和：
    μ̂(·, Z_i) 只在事件时间跳跃，η̂_{s−} 在相邻网格点之间为常数。

    Args:
        theta_hat: 估计的 θ（完整 d 维）或 FitReport
        estimator: 均值估计器（或核函数设置，此时按单指标模型处理）
        support: 权重测度的支撑点，超过 T_(n) 的点被丢弃
        sample: 样本
        fit: 删失分布拟合结果
    """
    estimator = _as_estimator(estimator)
    report = _as_report(theta_hat, estimator, DiscreteMeasure.uniform(np.unique(np.asarray(support, dtype=float))))
    tau = sample.T_max
    support = np.unique(np.asarray(support, dtype=float))
    support = support[support <= tau]
    n, p = sample.n, sample.d - 1
    m = support.size
    if m == 0:
        empty = np.zeros((n, 0, p))
        return InfluenceComponents(support, empty, empty.copy(), np.zeros((0, p, p)))

    grid = np.unique(np.concatenate(([0.0], sample.event_times, fit.G_hat.jump_times, sample.T, support)))
    grid = grid[grid <= tau]
    surface = estimator.mean_surface(report, sample, fit, grid, support)
    gradients = surface.support_gradients

    # 1. 第一项：(Ŷ − μ̂)∇μ̂
    residual = rescaled_matrix(sample, fit, support) - surface.support_values
    residual_terms = residual[:, :, None] * gradients

    # 2. 第二项：对每个 t_k 累加区间 (g_r, g_{r+1}] ⊂ (0, t_k] 上的 η̂_{g_r} Δμ̂
    eta_left = eta_hat_matrix(fit, sample.T, sample.delta, grid)[:, :-1]
    dmu = np.diff(surface.grid_values, axis=1)
    ends = np.searchsorted(grid, support)
    censoring_terms = np.zeros((n, m, p))
    coupling = np.zeros((n, n))
    start = 0
    for k, end in enumerate(ends):
        if end > start:
            coupling += eta_left[:, start:end] @ dmu[:, start:end].T
            start = end
        censoring_terms[:, k, :] = coupling @ gradients[:, k, :] / n

    gradient_outer = np.einsum("ikp,ikq->kpq", gradients, gradients) / n
    return InfluenceComponents(support, residual_terms, censoring_terms, gradient_outer)


def psi_hat(
    subject: int | Subject,
    theta_hat,
    estimator: MeanEstimator | KernelSpec,
    w: DiscreteMeasure,
    sample: Sample,
    fit: CensoringFit,
) -> np.ndarray:
    """
    单个个体的 ψ̂(δ, Z, T, Y; w)

    Args:
        subject: 个体在样本中的下标，或样本中的某个个体
    """
    if isinstance(subject, Subject):
        matches = [i for i, s in enumerate(sample.subjects) if s == subject]
        if not matches:
            raise ValueError("个体不在样本中")
        subject = matches[0]
    return influence_components(theta_hat, estimator, w.support, sample, fit).psi(w)[subject]


def variance_report(
    theta_hat,
    estimator: MeanEstimator | KernelSpec,
    w: DiscreteMeasure,
    sample: Sample,
    fit: CensoringFit,
) -> VarianceReport:
    """
    计算 V̂ = Σ̂⁻¹Δ̂Σ̂⁻¹ 与 Ê²

    Raises:
        SingularSigma: Σ̂ 的条件数不小于 1e12
    """
    return influence_components(theta_hat, estimator, w.support, sample, fit).report(w)


def select_weight_measure(
    candidates: list[DiscreteMeasure],
    pilot_w: DiscreteMeasure,
    estimator: MeanEstimator | KernelSpec,
    sample: Sample,
    fit: CensoringFit,
    domain: ThetaDomain,
    trim: TrimmingSpec | None = None,
    optimizer_config: OptimizerConfig | None = None,
) -> tuple[DiscreteMeasure, FitReport]:
    """
    在候选测度中选择 Ê² 最小者

    1. 用 pilot_w 拟合一次得到 θ̂_pilot
    2. 在 θ̂_pilot 处计算每个候选测度的 Ê²（并列时取列表中靠前者）
    3. 用选出的 ŵ 重新拟合一次，并在新的 θ̂ 处计算 V̂ 与 Ê²

    Raises:
        AllCandidatesSingular: 所有候选测度的 Σ̂ 均奇异
    """
    if not candidates:
        raise ValueError("候选测度列表为空")
    estimator = _as_estimator(estimator, trim)

    pilot = estimator.fit(pilot_w, sample, fit, domain, optimizer_config)
    union = np.unique(np.concatenate([w.support for w in candidates]))
    components = influence_components(pilot, estimator, union, sample, fit)

    table = []
    for k, w in enumerate(candidates):
        try:
            table.append(components.report(w).mse_hat)
        except SingularSigma as e:
            logger.debug("候选测度 %d 的 Σ̂ 奇异: %s", k, e)
            table.append(float("inf"))
    values = np.asarray(table)
    if not np.any(np.isfinite(values)):
        raise AllCandidatesSingular(f"全部 {len(candidates)} 个候选测度的 Σ̂ 均奇异")
    best = int(np.argmin(values))
    chosen = candidates[best]
    logger.info("选出权重测度 %r（Ê²=%.6g）", chosen, values[best])

    final = estimator.fit(chosen, sample, fit, domain, optimizer_config)
    variance = influence_components(final, estimator, chosen.support, sample, fit).report(chosen)
    final = final.with_inference(variance.v_hat, variance.mse_hat)
    diagnostics = {
        **final.diagnostics,
        "pilot_theta": pilot.theta_hat.tolist(),
        "candidate_mse": [float(v) for v in values],
        "chosen_index": best,
    }
    return chosen, replace(final, diagnostics=diagnostics)


def weight_lattice(
    support=tuple(round(0.1 * k, 10) for k in range(1, 13)),
    tail_points=(0.9, 1.0, 1.1, 1.2),
    levels=(0.25, 0.5, 0.75, 1.0),
) -> list[DiscreteMeasure]:
    """
    候选权重测度格点：支撑点上质量为 1，tail_points 处的质量取遍 levels

    顺序为 (w(tail_1), …, w(tail_k)) 的字典序。
    """
    support = np.asarray(support, dtype=float)
    positions = np.searchsorted(support, tail_points)
    if np.any(positions >= support.size) or np.any(support[np.minimum(positions, support.size - 1)] != tail_points):
        raise ValueError("tail_points 必须是支撑点的子集")
    lattice = []
    for combination in itertools.product(levels, repeat=len(tail_points)):
        masses = np.ones(support.size)
        masses[positions] = combination
        lattice.append(DiscreteMeasure(support, masses))
    return lattice


def save_lattice(candidates: list[DiscreteMeasure], path: str | Path) -> None:
    atomic_write_text(Path(path), json.dumps([w.to_dict() for w in candidates], indent=2))


def load_lattice(path: str | Path) -> list[DiscreteMeasure]:
    """读取 JSON 格式的候选测度列表 [{support, masses}, …]"""
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise SchemaError(f"候选测度文件 {path} 不是合法 JSON: {e.msg}")
    if not isinstance(payload, list) or not payload:
        raise SchemaError("候选测度文件必须是非空列表")
    try:
        return [DiscreteMeasure.from_dict(item) for item in payload]
    except (KeyError, TypeError, ValueError) as e:
        raise SchemaError(f"候选测度格式错误: {e}")
