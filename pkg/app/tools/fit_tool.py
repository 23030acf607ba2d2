import argparse
import logging
from typing import Literal

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, model_validator

from app.estimation.criteria import (
    LinearIndexModel,
    OptimizerConfig,
    ParametricEstimator,
    SemiparametricEstimator,
    ThetaDomain,
    fit_joint_theta_h,
    load_parametric_model,
)
from app.estimation.data_model import DiscreteMeasure, FitReport, load_sample
from app.estimation.inference import load_lattice, select_weight_measure, variance_report, weight_lattice
from app.estimation.kernel_regression import KernelSpec, TrimmingSpec, predict_cumulative_mean
from app.estimation.survival import kaplan_meier_censoring
from app.resources import static_resource
from app.utils.errors import NumericalError, SchemaError
from app.utils.grid_util import parse_grid
from app.utils.output_util import add_common_arguments, announce_config, emit, to_json

logger = logging.getLogger(__name__)


class FitSettings(BaseModel):
    """fit 子命令的完整设置"""

    data: str = Field(..., description="样本文件（JSON，或 CSV 个体文件）")
    events: str | None = Field(None, description="CSV 格式的事件文件，默认为 <stem>_events.csv")
    model: Literal["parametric", "single-index"] = Field("single-index", description="均值模型")
    mu0: str = Field("linear", description="参数模型：'linear' 或 JSON 模型描述文件")
    intercept: float = Field(0.0, description="linear 模型的常数项")
    kernel: Literal["epanechnikov", "biweight"] = Field("epanechnikov", description="核函数")
    bandwidth: float | Literal["auto"] = Field(static_resource.DEFAULT_BANDWIDTH, description="带宽，或 auto 联合选择")
    h_grid: list[float] | None = Field(None, description="bandwidth=auto 时的带宽网格")
    weights: Literal["fixed", "adaptive"] = Field("fixed", description="固定全 1 测度或自适应选择")
    weight_support: list[float] = Field(
        default_factory=lambda: parse_grid(static_resource.DEFAULT_WEIGHT_SUPPORT), description="权重测度支撑点"
    )
    weight_lattice: str | None = Field(None, description="候选测度 JSON 文件，默认使用设计格点")
    trim: Literal["box", "density"] = Field("density", description="截尾方式")
    trim_c: float | None = Field(None, gt=0, description="密度截尾阈值")
    domain_low: float = Field(static_resource.DEFAULT_DOMAIN[0], description="自由分量下界")
    domain_high: float = Field(static_resource.DEFAULT_DOMAIN[1], description="自由分量上界")
    predict_times: list[float] | None = Field(None, description="在这些时间点预测样本协变量均值处的 μ̂")
    jitter: bool = Field(False, description="对重复时间点做确定性扰动")
    seed: int = Field(0, ge=0, lt=2**64, description="扰动种子")
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)

    @model_validator(mode="after")
    def _check_coherence(self):
        if self.bandwidth == "auto" and not self.h_grid:
            raise ValueError("--bandwidth auto 需要同时给出 --h-grid")
        if self.bandwidth != "auto" and not self.bandwidth > 0:
            raise ValueError("带宽必须为正")
        if self.model == "parametric" and self.bandwidth == "auto":
            raise ValueError("参数模型不使用带宽")
        return self


def register_commands(subparsers) -> None:
    """向命令行注册模型拟合子命令"""
    parser = subparsers.add_parser("fit", help="在数据文件上估计指标方向 θ")
    parser.add_argument("--data", required=True, help="样本文件")
    parser.add_argument("--events", default=None, help="CSV 格式的事件文件")
    parser.add_argument("--model", choices=("parametric", "single-index"), default="single-index")
    parser.add_argument("--mu0", default="linear", help="'linear' 或 JSON 模型描述文件")
    parser.add_argument("--intercept", type=float, default=0.0, help="linear 模型的常数项")
    parser.add_argument("--kernel", choices=("epanechnikov", "biweight"), default="epanechnikov")
    parser.add_argument("--bandwidth", default=str(static_resource.DEFAULT_BANDWIDTH), help="带宽数值或 auto")
    parser.add_argument("--h-grid", default=None, help="带宽网格 lo:step:hi")
    parser.add_argument("--weights", choices=("fixed", "adaptive"), default="fixed")
    parser.add_argument("--weight-support", default=static_resource.DEFAULT_WEIGHT_SUPPORT, help="支撑点 lo:step:hi")
    parser.add_argument("--weight-lattice", default=None, help="候选测度 JSON 文件")
    parser.add_argument("--trim", choices=("box", "density"), default="density")
    parser.add_argument("--trim-c", type=float, default=None, help="密度截尾阈值")
    parser.add_argument("--predict-times", default=None, help="预测时间点 lo:step:hi 或逗号列表")
    parser.add_argument("--jitter", action="store_true", help="对重复时间点做确定性扰动")
    parser.add_argument("--seed", type=int, default=0, help="扰动种子")
    add_common_arguments(parser)
    parser.set_defaults(handler=cmd_fit)


def settings_from_args(args: argparse.Namespace) -> FitSettings:
    bandwidth = args.bandwidth if args.bandwidth == "auto" else _as_float(args.bandwidth, "--bandwidth")
    return FitSettings(
        data=args.data,
        events=args.events,
        model=args.model,
        mu0=args.mu0,
        intercept=args.intercept,
        kernel=args.kernel,
        bandwidth=bandwidth,
        h_grid=parse_grid(args.h_grid) if args.h_grid else None,
        weights=args.weights,
        weight_support=parse_grid(args.weight_support),
        weight_lattice=args.weight_lattice,
        trim=args.trim,
        trim_c=args.trim_c,
        predict_times=parse_grid(args.predict_times) if args.predict_times else None,
        jitter=args.jitter,
        seed=args.seed,
    )


def _as_float(value: str, flag: str) -> float:
    try:
        return float(value)
    except ValueError:
        raise SchemaError(f"{flag} 必须是数值或 auto，收到 {value!r}")


def _candidates(settings: FitSettings) -> list[DiscreteMeasure]:
    if settings.weight_lattice:
        return load_lattice(settings.weight_lattice)
    return weight_lattice(settings.weight_support, static_resource.DEFAULT_LATTICE_POINTS, static_resource.DEFAULT_LATTICE_LEVELS)


def _with_variance(report: FitReport, estimator, sample, fit) -> FitReport:
    try:
        variance = variance_report(report, estimator, report.chosen_measure, sample, fit)
    except NumericalError as e:
        logger.warning("无法计算方差估计: %s", e)
        return report
    return report.with_inference(variance.v_hat, variance.mse_hat)


def run_fit(settings: FitSettings) -> dict:
    """
    在数据文件上运行完整的估计流程

    Args:
        settings: 拟合设置

    Returns:
        dict: {"message": ..., "data": FitReport 字典（可能附带预测值）}
    """
    # 1. 读取样本并估计删失分布
    sample = load_sample(settings.data, events_path=settings.events, jitter=settings.jitter, seed=settings.seed)
    fit = kaplan_meier_censoring(sample)
    domain = ThetaDomain.box(sample.d, settings.domain_low, settings.domain_high)
    w0 = DiscreteMeasure.uniform(settings.weight_support)

    # 2. 构造估计器；auto 带宽先在 w₀ 下联合选择 (θ, h)
    if settings.model == "parametric":
        if settings.mu0 == "linear":
            model = LinearIndexModel(sample.d, settings.intercept)
        else:
            model = load_parametric_model(settings.mu0, sample.d)
        estimator = ParametricEstimator(model)
        report = None
    else:
        trim = TrimmingSpec(threshold=settings.trim_c)
        two_stage = settings.trim == "density"
        report = None
        if settings.bandwidth == "auto":
            report = fit_joint_theta_h(
                settings.kernel, settings.h_grid, w0, sample, fit, domain, trim, settings.optimizer, True, two_stage
            )
            bandwidth = report.chosen_bandwidth
        else:
            bandwidth = settings.bandwidth
        estimator = SemiparametricEstimator(KernelSpec(settings.kernel, bandwidth), trim, True, two_stage)

    # 3. 选择权重测度并拟合
    if settings.weights == "adaptive":
        _, report = select_weight_measure(_candidates(settings), w0, estimator, sample, fit, domain, optimizer_config=settings.optimizer)
    else:
        if report is None:
            report = estimator.fit(w0, sample, fit, domain, settings.optimizer)
        report = _with_variance(report, estimator, sample, fit)

    data = {"n": sample.n, **report.to_dict()}
    # 4. 在样本协变量均值处预测累积均值函数
    if settings.predict_times and settings.model == "single-index":
        z_bar = sample.Z.mean(axis=0)
        values = predict_cumulative_mean(settings.predict_times, z_bar, report.theta_hat, estimator.spec, sample, fit)
        data["prediction"] = {"z": z_bar.tolist(), "times": settings.predict_times, "mu_hat": np.asarray(values).tolist()}

    return {"message": f"{settings.model} 模型拟合完成（n={sample.n}, d={sample.d}）", "data": data}


def _as_text(result: dict) -> str:
    data = result["data"]
    theta = data["theta_hat"]
    rows = [{"分量": f"θ{j + 1}", "估计值": value} for j, value in enumerate(theta)]
    variance = data.get("variance_matrix")
    if variance is not None:
        for row, j in zip(rows[1:], range(len(variance))):
            row["标准误"] = float(np.sqrt(max(variance[j][j], 0.0) / data["n"]))
    lines = [result["message"], pd.DataFrame(rows).to_string(index=False)]
    measure = data["chosen_measure"]
    lines.append("权重测度: " + ", ".join(f"{k:g}:{m:g}" for k, m in zip(measure["support"], measure["masses"])))
    if data.get("chosen_bandwidth") is not None:
        lines.append(f"带宽: {data['chosen_bandwidth']:g}")
    if data.get("mse_estimate") is not None:
        lines.append(f"Ê²: {data['mse_estimate']:.6g}")
    lines.append(f"准则值: {data['criterion_value']:.10g}")
    return "\n".join(lines) + "\n"


def cmd_fit(args: argparse.Namespace) -> dict:
    settings = settings_from_args(args)
    announce_config(settings)
    result = run_fit(settings)
    text = to_json(result["data"]) if args.format == "json" else _as_text(result)
    emit(text, args.out, "fit_report.json" if args.format == "json" else "fit_report.txt")
    return result
