"""
删失分布的 Kaplan-Meier 估计、重标度过程 Ŷ 以及 Kaplan-Meier 影响函数 η̂。
"""

import logging
from dataclasses import dataclass

import numpy as np

from app.estimation.data_model import Sample, StepFunction, Subject
from app.utils.errors import DegenerateDenominator, EmptySample

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class CensoringFit:
    """
    删失分布拟合结果

    Args:
        G_hat: 删失分布函数 G 的 Kaplan-Meier 估计（只在 δ=0 的观测时间处跳跃）
        H_hat: 观测时间 T 的经验分布函数（每个 T_i 处跳跃 1/n）
        at_risk_counts: Ĝ 每个跳跃点处的风险集大小 Σ_j I(T_j ≥ s)
        n: 样本量
        tau: 最大观测时间 T_(n)
    """

    G_hat: StepFunction
    H_hat: StepFunction
    at_risk_counts: np.ndarray
    n: int
    tau: float

    def censoring_survival_left(self, t):
        """1 − Ĝ(t−)"""
        return 1.0 - self.G_hat.left_limit(t)

    def at_risk_fraction(self, t):
        """1 − Ĥ(t−)"""
        return 1.0 - self.H_hat.left_limit(t)


def kaplan_meier_censoring(sample: Sample) -> CensoringFit:
    """
    计算删失分布的 Kaplan-Meier 估计

    Ĝ(t) = 1 − Π_{i: T_i ≤ t} (1 − 1/Σ_j I(T_j ≥ T_i))^{1−δ_i}

    Args:
        sample: 已校验的样本

    Returns:
        CensoringFit: 包含 Ĝ、Ĥ 以及风险集大小
    """
    if sample is None or len(sample) == 0:
        raise EmptySample("无法对空样本估计删失分布")

    T = np.sort(sample.T)
    n = T.size
    unique_T, counts = np.unique(T, return_counts=True)
    H_hat = StepFunction(unique_T, np.cumsum(counts) / n, 0.0)

    censored = np.sort(sample.T[~sample.delta])
    jump_times, censored_counts = np.unique(censored, return_counts=True)
    at_risk = n - np.searchsorted(T, jump_times, side="left")
    # 每个删失观测贡献一个因子 (1 − 1/r)，并列时按观测个数连乘
    factors = (1.0 - 1.0 / at_risk) ** censored_counts
    survival = np.cumprod(factors)
    G_hat = StepFunction(jump_times, 1.0 - survival, 0.0)

    values = G_hat.post_jump_values
    if values.size and (np.any(np.diff(values) < -1e-15) or values.min() < 0 or values.max() > 1):
        raise RuntimeError("Kaplan-Meier 估计不满足单调性或取值范围")

    return CensoringFit(G_hat=G_hat, H_hat=H_hat, at_risk_counts=at_risk, n=n, tau=float(T[-1]))


def _inverse_censoring_weights(fit: CensoringFit, event_times: np.ndarray) -> np.ndarray:
    denominators = fit.censoring_survival_left(event_times)
    denominators = np.atleast_1d(np.asarray(denominators, dtype=float))
    if np.any(denominators <= 0):
        bad = np.asarray(event_times, dtype=float).reshape(-1)[denominators <= 0]
        raise DegenerateDenominator(f"在事件时间 {bad[:5].tolist()} 处 1−Ĝ(s−)=0")
    return 1.0 / denominators


def rescaled_process(subject: Subject, fit: CensoringFit) -> StepFunction:
    """
    重标度过程 Ŷ(t) = Σ_{s ≤ t} 1/(1 − Ĝ(s−))，用于补偿删失造成的事件缺失

    Args:
        subject: 个体
        fit: 删失分布拟合结果

    Returns:
        StepFunction: 在每个事件时间处跳跃 1/(1−Ĝ(s−)) 的阶梯函数
    """
    events = np.asarray(subject.event_times, dtype=float)
    if events.size == 0:
        return StepFunction(events, events, 0.0)
    return StepFunction.from_increments(events, _inverse_censoring_weights(fit, events))


def rescaled_matrix(sample: Sample, fit: CensoringFit, times) -> np.ndarray:
    """
    在给定时间网格上批量计算所有个体的 Ŷ_i(t)

    Returns:
        np.ndarray: 形状 (n, len(times))
    """
    times = np.asarray(times, dtype=float)
    values = np.zeros((sample.n, times.size + 1))
    if sample.event_times.size:
        weights = _inverse_censoring_weights(fit, sample.event_times)
        # 事件 s 对所有 t ≥ s 的网格点都有贡献
        first_index = np.searchsorted(times, sample.event_times, side="left")
        np.add.at(values, (sample.event_owner, first_index), weights)
    return np.cumsum(values, axis=1)[:, :-1]


def eta_hat_matrix(fit: CensoringFit, T, delta, times) -> np.ndarray:
    """
    批量计算 Kaplan-Meier 影响函数

    η̂_t(T,δ) = (1−δ)I(T≤t)/(1−Ĥ(T−)) − Σ_{s ≤ t, s ≤ T} ΔĜ(s)/[(1−Ĥ(s−))(1−Ĝ(s−))]

    Args:
        fit: 删失分布拟合结果
        T: 观测时间数组
        delta: 终止事件指示数组
        times: 时间网格

    Returns:
        np.ndarray: 形状 (len(T), len(times))
    """
    T = np.atleast_1d(np.asarray(T, dtype=float))
    delta = np.atleast_1d(np.asarray(delta, dtype=bool))
    times = np.atleast_1d(np.asarray(times, dtype=float))

    active = (~delta)[:, None] & (T[:, None] <= times[None, :])
    first = np.zeros((T.size, times.size))
    if np.any(active):
        at_risk = np.atleast_1d(fit.at_risk_fraction(T))
        rows = np.any(active, axis=1)
        if np.any(at_risk[rows] <= 0):
            raise DegenerateDenominator("影响函数第一项分母 1−Ĥ(T−) 为零")
        safe = np.where(at_risk > 0, at_risk, 1.0)
        first = np.where(active, 1.0 / safe[:, None], 0.0)

    jumps = fit.G_hat.jump_times
    if jumps.size == 0:
        return first
    denominators = fit.at_risk_fraction(jumps) * fit.censoring_survival_left(jumps)
    if np.any(denominators <= 0):
        raise DegenerateDenominator("影响函数积分项分母 (1−Ĥ(s−))(1−Ĝ(s−)) 为零")
    cumulative = np.concatenate(([0.0], np.cumsum(fit.G_hat.increments / denominators)))
    upto_t = np.searchsorted(jumps, times, side="right")
    upto_T = np.searchsorted(jumps, T, side="right")
    return first - cumulative[np.minimum(upto_T[:, None], upto_t[None, :])]


def eta_hat(fit: CensoringFit, T: float, delta: bool, t: float) -> float:
    """单点版本的 η̂_t(T, δ)"""
    return float(eta_hat_matrix(fit, [T], [delta], [t])[0, 0])
