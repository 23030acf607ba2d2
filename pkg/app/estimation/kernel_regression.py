"""
单指标核估计：μ_θ(t,u) = E[N*(t) | θ'Z = u] 的核估计、对 θ 的梯度、指标密度估计与截尾（trimming）。
"""

import logging
from dataclasses import dataclass
from typing import Literal

import numpy as np

from app.estimation.data_model import Sample
from app.estimation.survival import CensoringFit, rescaled_matrix
from app.utils.errors import EmptyWindow

logger = logging.getLogger(__name__)

KernelFamily = Literal["epanechnikov", "biweight"]


@dataclass(frozen=True)
class KernelSpec:
    """
    核函数与带宽；核函数支撑在 [−1, 1] 上且积分为 1

    Args:
        family: 'epanechnikov'（模拟研究默认）或 'biweight'（二阶可导）
        bandwidth: 带宽 h
    """

    family: KernelFamily = "epanechnikov"
    bandwidth: float = 0.2

    def __post_init__(self):
        if self.family not in ("epanechnikov", "biweight"):
            raise ValueError(f"不支持的核函数: {self.family}")
        if not self.bandwidth > 0:
            raise ValueError(f"带宽必须为正，收到 {self.bandwidth}")

    def with_bandwidth(self, bandwidth: float) -> "KernelSpec":
        return KernelSpec(self.family, float(bandwidth))

    def __call__(self, x):
        return kernel_derivative(self, x, order=0)


def kernel_derivative(spec: KernelSpec, x, order: int = 0):
    """
    计算核函数及其一阶、二阶导数，支撑外取 0

    Args:
        spec: 核函数设置
        x: 标量或数组
        order: 0、1 或 2
    """
    x = np.asarray(x, dtype=float)
    inside = np.abs(x) <= 1.0 if order == 0 else np.abs(x) < 1.0
    x2 = x * x
    if spec.family == "epanechnikov":
        if order == 0:
            values = 0.75 * (1.0 - x2)
        elif order == 1:
            values = -1.5 * x
        elif order == 2:
            values = np.full_like(x, -1.5)
        else:
            raise ValueError(f"不支持的导数阶数: {order}")
    else:
        if order == 0:
            values = (15.0 / 16.0) * (1.0 - x2) ** 2
        elif order == 1:
            values = -3.75 * x * (1.0 - x2)
        elif order == 2:
            values = -3.75 * (1.0 - 3.0 * x2)
        else:
            raise ValueError(f"不支持的导数阶数: {order}")
    result = np.where(inside, values, 0.0)
    return float(result) if result.ndim == 0 else result


def kernel_eval(spec: KernelSpec, x):
    """K(x)"""
    return kernel_derivative(spec, x, order=0)


@dataclass(frozen=True)
class TrimmingSpec:
    """
    截尾设置

    Args:
        mode: 'preliminary_set' 使用协变量空间中的长方体 B；
              'density_threshold' 使用指标密度阈值 I(f̂(θ'Z) ≥ c)
        box_low, box_high: 长方体 B 的下、上界（preliminary_set 模式）
        threshold: 密度阈值 c；为 None 时取样内密度估计值的 quantile 分位数
        quantile: 未给定 c 时使用的分位数
    """

    mode: Literal["preliminary_set", "density_threshold"] = "density_threshold"
    box_low: tuple[float, ...] | None = None
    box_high: tuple[float, ...] | None = None
    threshold: float | None = None
    quantile: float = 0.05

    def __post_init__(self):
        if self.mode == "preliminary_set":
            if self.box_low is None or self.box_high is None:
                raise ValueError("preliminary_set 模式必须给出长方体 B")
            low = tuple(float(v) for v in self.box_low)
            high = tuple(float(v) for v in self.box_high)
            if len(low) != len(high) or any(lo > hi for lo, hi in zip(low, high)):
                raise ValueError("长方体 B 为空")
            object.__setattr__(self, "box_low", low)
            object.__setattr__(self, "box_high", high)
        elif self.mode == "density_threshold":
            if self.threshold is not None and not self.threshold > 0:
                raise ValueError("密度阈值 c 必须为正")
            if not 0 <= self.quantile < 1:
                raise ValueError("分位数必须在 [0, 1) 内")
        else:
            raise ValueError(f"不支持的截尾模式: {self.mode}")

    @classmethod
    def quantile_box(cls, Z: np.ndarray, lower: float = 0.1, upper: float = 0.9) -> "TrimmingSpec":
        """以各协变量的样本分位数构造长方体 B"""
        Z = np.asarray(Z, dtype=float)
        return cls(
            mode="preliminary_set",
            box_low=tuple(np.quantile(Z, lower, axis=0)),
            box_high=tuple(np.quantile(Z, upper, axis=0)),
        )

    @classmethod
    def full_box(cls, Z: np.ndarray) -> "TrimmingSpec":
        Z = np.asarray(Z, dtype=float)
        return cls(mode="preliminary_set", box_low=tuple(Z.min(axis=0)), box_high=tuple(Z.max(axis=0)))


@dataclass(frozen=True, eq=False)
class SmoothedSurface:
    """
    在 (个体, 时间网格) 上的 μ̂_θ(t, θ'Z_i) 及其对 θ 的梯度

    values: (n, m)；gradients: (n, m, d) 或 None；denominators: 每个个体的核权重之和
    """

    values: np.ndarray
    gradients: np.ndarray | None
    denominators: np.ndarray


def _kernel_matrix(theta, Z, spec: KernelSpec, leave_one_out: bool, order: int = 0) -> np.ndarray:
    index = Z @ theta
    scaled = (index[None, :] - index[:, None]) / spec.bandwidth
    K = kernel_derivative(spec, scaled, order=order)
    if leave_one_out:
        np.fill_diagonal(K, 0.0)
    return K


def smooth_surface(
    theta,
    Z: np.ndarray,
    Y: np.ndarray,
    spec: KernelSpec,
    leave_one_out: bool = True,
    with_gradient: bool = False,
    required: np.ndarray | None = None,
) -> SmoothedSurface:
    """
    在所有个体的指标点上批量计算核估计（公式与 mu_hat 相同，对每个个体 i 取 u = θ'Z_i）

    Args:
        theta: 指标方向（完整 d 维）
        Z: 协变量矩阵 (n, d)
        Y: 重标度过程在时间网格上的取值 (n, m)
        spec: 核函数设置
        leave_one_out: 个体 i 的估计是否排除其自身
        with_gradient: 是否同时计算对 θ 的解析梯度
        required: 必须有非空窗口的个体（默认全部）

    Returns:
        SmoothedSurface: 估计值（窗口为空的非必需个体取 0）
    """
    theta = np.asarray(theta, dtype=float)
    Z = np.asarray(Z, dtype=float)
    Y = np.asarray(Y, dtype=float)
    n, m = Y.shape
    d = Z.shape[1]

    K = _kernel_matrix(theta, Z, spec, leave_one_out)
    S = K.sum(axis=1)
    empty = S <= 0
    if required is not None:
        empty &= np.asarray(required, dtype=bool)
    if np.any(empty):
        raise EmptyWindow(f"{int(empty.sum())} 个个体的带宽窗口内没有其他观测（h={spec.bandwidth}）")
    safe_S = np.where(S > 0, S, 1.0)
    values = (K @ Y) / safe_S[:, None]
    values[S <= 0] = 0.0

    if not with_gradient:
        return SmoothedSurface(values, None, S)

    h = spec.bandwidth
    dK = _kernel_matrix(theta, Z, spec, leave_one_out, order=1)
    # Σ_j K'_ij (Z_j − Z_i) Y_j(t) / h，拆成两项避免构造 n×n×d 张量
    weighted = (dK @ (Z[:, :, None] * Y[:, None, :]).reshape(n, d * m)).reshape(n, d, m)
    dN = (weighted - Z[:, :, None] * (dK @ Y)[:, None, :]) / h
    dS = (dK @ Z - Z * dK.sum(axis=1)[:, None]) / h
    gradients = (dN - values[:, None, :] * dS[:, :, None]) / safe_S[:, None, None]
    gradients[S <= 0] = 0.0
    return SmoothedSurface(values, np.transpose(gradients, (0, 2, 1)), S)


def _window(u: float, theta, spec: KernelSpec, sample: Sample, leave_out: int | None):
    theta = np.asarray(theta, dtype=float)
    scaled = (sample.Z @ theta - u) / spec.bandwidth
    weights = kernel_eval(spec, scaled)
    weights = np.atleast_1d(weights).copy()
    if leave_out is not None:
        weights[leave_out] = 0.0
    return scaled, weights


def mu_hat(
    t: float,
    u: float,
    theta,
    spec: KernelSpec,
    sample: Sample,
    fit: CensoringFit,
    leave_out: int | None = None,
) -> float:
    """
    核估计 μ̂_θ(t, u) = Σ_i K((θ'Z_i−u)/h) Ŷ_i(t) / Σ_j K((θ'Z_j−u)/h)

    Args:
        t: 时间
        u: 指标值
        theta: 指标方向
        spec: 核函数设置
        sample: 样本
        fit: 删失分布拟合结果
        leave_out: 需要排除的个体下标

    Raises:
        EmptyWindow: 带宽窗口内没有观测
    """
    _, weights = _window(u, theta, spec, sample, leave_out)
    total = weights.sum()
    if total <= 0:
        raise EmptyWindow(f"指标值 {u} 的带宽窗口内没有观测（h={spec.bandwidth}）")
    Y = rescaled_matrix(sample, fit, [t])[:, 0]
    return float(np.dot(weights, Y) / total)


def grad_mu_hat(
    t: float,
    z,
    theta,
    spec: KernelSpec,
    sample: Sample,
    fit: CensoringFit,
    leave_out: int | None = None,
) -> np.ndarray:
    """
    θ ↦ μ̂_θ(t, θ'z) 的解析梯度（完整 d 维，对商式逐项求导）
    """
    z = np.asarray(z, dtype=float)
    theta = np.asarray(theta, dtype=float)
    scaled, weights = _window(float(z @ theta), theta, spec, sample, leave_out)
    total = weights.sum()
    if total <= 0:
        raise EmptyWindow(f"指标值 {float(z @ theta)} 的带宽窗口内没有观测（h={spec.bandwidth}）")
    dweights = np.atleast_1d(kernel_derivative(spec, scaled, order=1)).copy()
    if leave_out is not None:
        dweights[leave_out] = 0.0
    Y = rescaled_matrix(sample, fit, [t])[:, 0]
    direction = (sample.Z - z) / spec.bandwidth
    numerator = np.dot(weights, Y)
    d_numerator = direction.T @ (dweights * Y)
    d_total = direction.T @ dweights
    return (d_numerator * total - numerator * d_total) / total**2


def grad_mu_hat_numeric(
    t: float,
    z,
    theta,
    spec: KernelSpec,
    sample: Sample,
    fit: CensoringFit,
    leave_out: int | None = None,
    step: float = 1e-5,
) -> np.ndarray:
    """中心差分梯度，仅用于核对解析梯度"""
    z = np.asarray(z, dtype=float)
    theta = np.asarray(theta, dtype=float)
    grad = np.zeros(theta.size)
    for k in range(theta.size):
        shift = np.zeros(theta.size)
        shift[k] = step
        upper = mu_hat(t, float(z @ (theta + shift)), theta + shift, spec, sample, fit, leave_out)
        lower = mu_hat(t, float(z @ (theta - shift)), theta - shift, spec, sample, fit, leave_out)
        grad[k] = (upper - lower) / (2 * step)
    return grad


def density_hat(u: float, theta, spec: KernelSpec, sample: Sample) -> float:
    """指标 θ'Z 的核密度估计 (nh)⁻¹ Σ_i K((θ'Z_i − u)/h)"""
    _, weights = _window(u, theta, spec, sample, None)
    return float(weights.sum() / (sample.n * spec.bandwidth))


def index_densities(theta, Z: np.ndarray, spec: KernelSpec) -> np.ndarray:
    """所有样本点处的 f̂(θ'Z_i)"""
    K = _kernel_matrix(np.asarray(theta, dtype=float), np.asarray(Z, dtype=float), spec, False)
    return K.sum(axis=1) / (K.shape[0] * spec.bandwidth)


def trim_mask(theta, trim: TrimmingSpec, spec: KernelSpec, Z: np.ndarray) -> np.ndarray:
    """所有个体的截尾指示 J_i"""
    Z = np.asarray(Z, dtype=float)
    if trim.mode == "preliminary_set":
        low = np.asarray(trim.box_low)
        high = np.asarray(trim.box_high)
        return np.all((Z >= low) & (Z <= high), axis=1)
    densities = index_densities(theta, Z, spec)
    threshold = trim.threshold if trim.threshold is not None else np.quantile(densities, trim.quantile)
    return densities >= threshold


def trim_indicator(z, theta, trim: TrimmingSpec, spec: KernelSpec, sample: Sample) -> int:
    """
    单点截尾指示：preliminary_set 模式为 I(z ∈ B)，density_threshold 模式为 I(f̂(θ'z) ≥ c)
    """
    z = np.asarray(z, dtype=float)
    if trim.mode == "preliminary_set":
        inside = np.all((z >= np.asarray(trim.box_low)) & (z <= np.asarray(trim.box_high)))
        return int(inside)
    density = density_hat(float(z @ np.asarray(theta, dtype=float)), theta, spec, sample)
    threshold = trim.threshold
    if threshold is None:
        threshold = float(np.quantile(index_densities(theta, sample.Z, spec), trim.quantile))
    return int(density >= threshold)


def predict_cumulative_mean(times, z, theta, spec: KernelSpec, sample: Sample, fit: CensoringFit) -> np.ndarray:
    """
    用估计的指标方向预测新协变量下的累积均值函数 μ̂_θ(t, θ'z)

    Args:
        times: 预测时间点
        z: 新的协变量向量
        theta: 估计的指标方向
    """
    times = np.atleast_1d(np.asarray(times, dtype=float))
    u = float(np.asarray(z, dtype=float) @ np.asarray(theta, dtype=float))
    _, weights = _window(u, theta, spec, sample, None)
    total = weights.sum()
    if total <= 0:
        raise EmptyWindow(f"指标值 {u} 的带宽窗口内没有观测（h={spec.bandwidth}）")
    return weights @ rescaled_matrix(sample, fit, times) / total
