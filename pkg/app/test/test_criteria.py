import json

import numpy as np
import pytest

from app.estimation.criteria import (
    ExponentialIndexModel,
    LinearIndexModel,
    OptimizerConfig,
    SemiparametricEstimator,
    ThetaDomain,
    criterion_parametric,
    criterion_parametric_gradient,
    criterion_semiparametric,
    fit_joint_theta_h,
    fit_parametric,
    fit_semiparametric,
    load_parametric_model,
    profile_bandwidth,
)
from app.estimation.data_model import DiscreteMeasure, Sample, Subject, validate_sample
from app.estimation.kernel_regression import KernelSpec, TrimmingSpec, mu_hat, trim_mask
from app.estimation.simulation import SimulationConfig, generate_sample
from app.estimation.survival import kaplan_meier_censoring, rescaled_matrix
from app.utils.errors import AllTrimmed, OptimizerDiverged, SchemaError

THETA0 = np.array([1.0, 1.6, 1.25, 0.7])
ZEROED = np.array([1.0, 0.0, 0.0, 0.0])


def _reversed(sample: Sample) -> Sample:
    return Sample(tuple(reversed(sample.subjects)))


def test_single_subject_unit_atom():
    sample = validate_sample(Sample((Subject(2.0, True, (1.0,), (0.5, 1.5)),)))
    fit = kaplan_meier_censoring(sample)
    w = DiscreteMeasure([1.0], [1.0])

    # μ₀(1) = 3，Ŷ(1) = 1
    assert criterion_parametric([1.0], LinearIndexModel(1, intercept=2.0), w, sample, fit) == pytest.approx(3.0)


def test_zero_mean_model_gives_zero(hand_sample, hand_fit, unit_weights):
    assert criterion_parametric([0.0, 0.0], LinearIndexModel(2), unit_weights, hand_sample, hand_fit) == 0.0


def test_zero_measure_gives_zero(small_sample):
    fit = kaplan_meier_censoring(small_sample)
    w = DiscreteMeasure([0.3, 0.6], [0.0, 0.0])
    assert criterion_semiparametric(ZEROED, KernelSpec("epanechnikov", 0.3), w, small_sample, fit) == 0.0


def test_criteria_ignore_subject_order(design_sample, unit_weights):
    fit = kaplan_meier_censoring(design_sample)
    reversed_sample = _reversed(design_sample)
    reversed_fit = kaplan_meier_censoring(reversed_sample)
    model = LinearIndexModel(4, intercept=5.0)
    spec = KernelSpec("epanechnikov", 0.4)

    assert criterion_parametric(THETA0, model, unit_weights, design_sample, fit) == criterion_parametric(
        THETA0, model, unit_weights, reversed_sample, reversed_fit
    )
    assert criterion_semiparametric(ZEROED, spec, unit_weights, design_sample, fit) == criterion_semiparametric(
        ZEROED, spec, unit_weights, reversed_sample, reversed_fit
    )


@pytest.mark.parametrize(
    "model, theta",
    [
        (LinearIndexModel(4, intercept=5.0), np.array([1.0, 1.2, 0.8, 0.5])),
        (ExponentialIndexModel(4, scale=0.5), np.array([1.0, 0.1, 0.2, 0.1])),
    ],
)
def test_parametric_gradient_matches_central_differences(design_sample, unit_weights, model, theta):
    fit = kaplan_meier_censoring(design_sample)
    step = 1e-6

    analytic = criterion_parametric_gradient(theta, model, unit_weights, design_sample, fit)
    numeric = np.zeros(theta.size)
    for k in range(theta.size):
        shift = np.zeros(theta.size)
        shift[k] = step
        upper = criterion_parametric(theta + shift, model, unit_weights, design_sample, fit)
        lower = criterion_parametric(theta - shift, model, unit_weights, design_sample, fit)
        numeric[k] = (upper - lower) / (2 * step)

    assert np.linalg.norm(analytic - numeric) <= 1e-4 * np.linalg.norm(numeric)


def test_mean_model_gradient_matches_differences(design_sample):
    model = ExponentialIndexModel(4, scale=0.5)
    theta = np.array([1.0, 0.1, 0.2, 0.1])
    t = np.array([0.3, 0.9])
    step = 1e-6
    grad = model.grad_theta_mu0(t, design_sample.Z[:5], theta)
    for k in range(4):
        shift = np.zeros(4)
        shift[k] = step
        numeric = (model.mu0(t, design_sample.Z[:5], theta + shift) - model.mu0(t, design_sample.Z[:5], theta - shift)) / (
            2 * step
        )
        assert np.allclose(grad[:, :, k], numeric, rtol=1e-6)


def test_linear_model_matches_weighted_least_squares(uncensored_sample, unit_weights):
    sample = uncensored_sample
    fit = kaplan_meier_censoring(sample)
    intercept = 5.0
    support = unit_weights.support[unit_weights.support <= sample.T_max]
    masses = unit_weights.masses[: support.size]
    Y = rescaled_matrix(sample, fit, support)

    # 对自由分量 β：(Σ c_i b_i b_i')β = Σ b_i (r_i − c_i(Z_i1 + a))
    c = np.full(sample.n, masses @ support**2)
    r = Y @ (masses * support)
    b = sample.Z[:, 1:]
    lhs = (b * c[:, None]).T @ b
    rhs = b.T @ (r - c * (sample.Z[:, 0] + intercept))
    expected = np.linalg.solve(lhs, rhs)

    report = fit_parametric(LinearIndexModel(4, intercept), unit_weights, sample, fit, ThetaDomain.box(4))

    assert report.model == "parametric"
    assert report.converged
    assert np.allclose(report.free_components, expected, rtol=0.0, atol=1e-5)


def test_rescaling_measure_keeps_minimizer(uncensored_sample, unit_weights):
    fit = kaplan_meier_censoring(uncensored_sample)
    model = LinearIndexModel(4, 5.0)
    tripled = DiscreteMeasure(unit_weights.support, 3 * unit_weights.masses)

    base = fit_parametric(model, unit_weights, uncensored_sample, fit, ThetaDomain.box(4))
    scaled = fit_parametric(model, tripled, uncensored_sample, fit, ThetaDomain.box(4))

    assert np.allclose(base.theta_hat, scaled.theta_hat, atol=1e-4)
    assert scaled.criterion_value == pytest.approx(3 * base.criterion_value, rel=1e-6)


def test_iteration_cap_raises(design_sample, unit_weights):
    fit = kaplan_meier_censoring(design_sample)
    with pytest.raises(OptimizerDiverged):
        fit_parametric(
            LinearIndexModel(4, 5.0),
            unit_weights,
            design_sample,
            fit,
            ThetaDomain.box(4),
            OptimizerConfig(max_iterations=1),
        )


def test_trimmed_subject_drops_out_of_criterion(small_sample, unit_weights):
    sample = small_sample
    fit = kaplan_meier_censoring(sample)
    spec = KernelSpec("epanechnikov", 0.3)
    mask = np.ones(sample.n, dtype=bool)
    mask[0] = False

    value = criterion_semiparametric(ZEROED, spec, unit_weights, sample, fit, mask=mask)

    support = unit_weights.support[unit_weights.support <= sample.T_max]
    Y = rescaled_matrix(sample, fit, support)
    total = 0.0
    for i in range(1, sample.n):
        u = float(sample[i].Z @ ZEROED)
        for k, t in enumerate(support):
            mu = mu_hat(t, u, ZEROED, spec, sample, fit, leave_out=i)
            total += mu * mu - 2 * Y[i, k] * mu
    assert value == pytest.approx(total / sample.n, rel=1e-10)


def test_everyone_trimmed(small_sample, unit_weights):
    fit = kaplan_meier_censoring(small_sample)
    with pytest.raises(AllTrimmed):
        criterion_semiparametric(
            ZEROED,
            KernelSpec(),
            unit_weights,
            small_sample,
            fit,
            mask=np.zeros(small_sample.n, dtype=bool),
        )


def test_infinite_box_matches_full_box(small_sample, unit_weights):
    fit = kaplan_meier_censoring(small_sample)
    spec = KernelSpec("epanechnikov", 0.4)
    domain = ThetaDomain.box(4)
    infinite = TrimmingSpec(mode="preliminary_set", box_low=(-np.inf,) * 4, box_high=(np.inf,) * 4)

    full = fit_semiparametric(spec, unit_weights, small_sample, fit, domain, TrimmingSpec.full_box(small_sample.Z), two_stage=False)
    unbounded = fit_semiparametric(spec, unit_weights, small_sample, fit, domain, infinite, two_stage=False)

    assert np.array_equal(full.theta_hat, unbounded.theta_hat)
    assert full.diagnostics["box_trimmed"] == 0


def test_two_stage_fit_records_both_stages(small_sample, unit_weights):
    fit = kaplan_meier_censoring(small_sample)
    report = fit_semiparametric(KernelSpec("epanechnikov", 0.4), unit_weights, small_sample, fit, ThetaDomain.box(4))

    assert report.model == "single-index"
    assert report.chosen_bandwidth == 0.4
    assert len(report.diagnostics["stage1_theta"]) == 4
    assert "density_trimmed" in report.diagnostics
    # 第二阶段在 θ_n 附近搜索
    stage1 = np.asarray(report.diagnostics["stage1_theta"])
    assert np.all(np.abs(report.theta_hat - stage1) <= 0.5 + 1e-12)


def test_joint_fit_with_single_bandwidth(small_sample, unit_weights):
    fit = kaplan_meier_censoring(small_sample)
    domain = ThetaDomain.box(4)

    joint = fit_joint_theta_h("epanechnikov", [0.4], unit_weights, small_sample, fit, domain)
    direct = fit_semiparametric(KernelSpec("epanechnikov", 0.4), unit_weights, small_sample, fit, domain)

    assert np.array_equal(joint.theta_hat, direct.theta_hat)
    assert joint.chosen_bandwidth == 0.4
    assert joint.criterion_value == direct.criterion_value


def test_joint_fit_ignores_duplicate_bandwidths(small_sample, unit_weights):
    fit = kaplan_meier_censoring(small_sample)
    domain = ThetaDomain.box(4)

    plain = fit_joint_theta_h("epanechnikov", [0.5, 0.4], unit_weights, small_sample, fit, domain)
    repeated = fit_joint_theta_h("epanechnikov", [0.4, 0.5, 0.4], unit_weights, small_sample, fit, domain)

    assert np.array_equal(plain.theta_hat, repeated.theta_hat)
    assert plain.chosen_bandwidth == repeated.chosen_bandwidth
    table = plain.diagnostics["criterion_by_bandwidth"]
    assert set(table) == {repr(0.4), repr(0.5)}
    assert plain.criterion_value == min(v for v in table.values() if v is not None)


def test_profile_bandwidth_returns_argmin(small_sample, unit_weights):
    fit = kaplan_meier_censoring(small_sample)
    best, table = profile_bandwidth(ZEROED, "epanechnikov", [0.5, 0.3, 0.4], unit_weights, small_sample, fit)

    assert list(table) == [0.3, 0.4, 0.5]
    assert table[best] == min(table.values())


def test_theta_domain_start_points():
    domain = ThetaDomain.box(4)
    starts = domain.start_points(5)

    assert starts.shape == (5, 3)
    assert np.array_equal(starts[0], [1.5, 1.5, 1.5])
    assert np.all((starts >= 0) & (starts <= 3))
    assert np.array_equal(starts, domain.start_points(5))


def test_theta_domain_shrink_stays_inside():
    local = ThetaDomain.box(3).shrink_around([0.2, 2.9], 0.5)
    assert local.lower == (0.0, 2.4)
    assert local.upper == pytest.approx((0.7, 3.0))


def test_load_parametric_model_from_file(tmp_path):
    path = tmp_path / "model.json"
    path.write_text(json.dumps({"family": "exponential", "scale": 2.0}))
    model = load_parametric_model(path, 3)
    assert isinstance(model, ExponentialIndexModel)
    assert model.scale == 2.0

    path.write_text(json.dumps({"family": "weibull"}))
    with pytest.raises(SchemaError):
        load_parametric_model(path, 3)


def test_parametric_fit_ignores_subject_order(design_sample, unit_weights):
    model = LinearIndexModel(4, intercept=5.0)
    reversed_sample = _reversed(design_sample)

    forward = fit_parametric(model, unit_weights, design_sample, kaplan_meier_censoring(design_sample), ThetaDomain.box(4))
    backward = fit_parametric(
        model, unit_weights, reversed_sample, kaplan_meier_censoring(reversed_sample), ThetaDomain.box(4)
    )

    assert np.array_equal(forward.theta_hat, backward.theta_hat)
    assert forward.criterion_value == backward.criterion_value


def test_parametric_criterion_adds_over_concatenated_samples():
    first = generate_sample(SimulationConfig(n=40, seed=31), 1).sample
    second = generate_sample(SimulationConfig(n=60, seed=32), 1).sample
    pooled = validate_sample(Sample(first.subjects + second.subjects))
    fit = kaplan_meier_censoring(pooled)
    # 支撑点低于两个子样本的 T_(n)，截断一致
    w = DiscreteMeasure.uniform([0.2, 0.4, 0.6])
    model = LinearIndexModel(4, intercept=5.0)

    parts = [criterion_parametric(THETA0, model, w, part, fit) for part in (first, second)]
    whole = criterion_parametric(THETA0, model, w, pooled, fit)

    assert (first.n * parts[0] + second.n * parts[1]) / pooled.n == pytest.approx(whole, rel=1e-12)


def test_semiparametric_criterion_adds_over_disjoint_masks(small_sample, unit_weights):
    fit = kaplan_meier_censoring(small_sample)
    spec = KernelSpec("epanechnikov", 0.4)
    left = np.arange(small_sample.n) % 2 == 0

    halves = [
        criterion_semiparametric(ZEROED, spec, unit_weights, small_sample, fit, mask=mask) for mask in (left, ~left)
    ]
    whole = criterion_semiparametric(ZEROED, spec, unit_weights, small_sample, fit, mask=np.ones(small_sample.n, bool))

    assert sum(halves) == pytest.approx(whole, rel=1e-12)


def test_joint_fit_matches_separate_fits(small_sample, unit_weights):
    fit = kaplan_meier_censoring(small_sample)
    domain = ThetaDomain.box(4)
    config = OptimizerConfig(n_starts=2)
    grid = [0.4, 0.5, 0.6]

    separate = [
        fit_semiparametric(KernelSpec("epanechnikov", h), unit_weights, small_sample, fit, domain, optimizer_config=config)
        for h in grid
    ]
    # 并列时取较小的带宽
    best = min(range(len(grid)), key=lambda k: (separate[k].criterion_value, grid[k]))
    joint = fit_joint_theta_h("epanechnikov", grid, unit_weights, small_sample, fit, domain, optimizer_config=config)

    assert joint.chosen_bandwidth == grid[best]
    assert np.array_equal(joint.theta_hat, separate[best].theta_hat)
    assert joint.criterion_value == separate[best].criterion_value


def test_pooling_limit_gives_flat_objective(small_sample, unit_weights):
    fit = kaplan_meier_censoring(small_sample)
    domain = ThetaDomain.box(4)
    # θ ∈ {1} × [0,3]³ 且 Z ∈ [1,2]⁴ 时指标的极差不超过 10
    spec = KernelSpec("epanechnikov", 1e8 * 10.0)

    report = fit_semiparametric(
        spec, unit_weights, small_sample, fit, domain, optimizer_config=OptimizerConfig(n_starts=3, xatol=1e-3), two_stage=False
    )

    values = report.diagnostics["start_values"]
    assert report.converged
    assert len(values) == 3
    assert max(values) - min(values) < 1e-8


def test_fitted_mask_follows_box_only_fit(small_sample, unit_weights):
    fit = kaplan_meier_censoring(small_sample)
    spec = KernelSpec("epanechnikov", 0.4)
    estimator = SemiparametricEstimator(spec, TrimmingSpec(), two_stage=False)
    report = estimator.fit(unit_weights, small_sample, fit, ThetaDomain.box(4), OptimizerConfig(n_starts=2))

    mask = estimator.fitted_mask(report, small_sample)
    box = trim_mask(None, TrimmingSpec.quantile_box(small_sample.Z), spec, small_sample.Z)

    assert np.array_equal(mask, box)
    assert int((~mask).sum()) == report.diagnostics["box_trimmed"]
    surface = estimator.mean_surface(report, small_sample, fit, [0.5, 1.0], unit_weights.support[:3])
    assert surface.support_gradients.shape == (small_sample.n, 3, 3)


def test_fitted_mask_uses_stage_one_density_trim(small_sample, unit_weights):
    fit = kaplan_meier_censoring(small_sample)
    spec = KernelSpec("epanechnikov", 0.4)
    estimator = SemiparametricEstimator(spec, TrimmingSpec())
    report = estimator.fit(unit_weights, small_sample, fit, ThetaDomain.box(4), OptimizerConfig(n_starts=2))

    mask = estimator.fitted_mask(report, small_sample)
    stage1 = np.asarray(report.diagnostics["stage1_theta"])

    assert np.array_equal(mask, trim_mask(stage1, TrimmingSpec(), spec, small_sample.Z))
    assert int((~mask).sum()) == report.diagnostics["density_trimmed"]



@pytest.mark.slow
def test_parametric_fit_is_consistent_without_censoring():
    config = SimulationConfig(n=2000, censoring_scale=1e6)
    w = DiscreteMeasure.uniform(np.round(np.arange(1, 13) * 0.1, 10))
    errors = []
    for seed in range(20):
        sample = generate_sample(config.model_copy(update={"seed": seed}), 1).sample
        fit = kaplan_meier_censoring(sample)
        report = fit_parametric(LinearIndexModel(4, 5.0), w, sample, fit, ThetaDomain.box(4))
        errors.append(np.linalg.norm(report.free_components - THETA0[1:]))
    assert np.median(errors) < 0.1


@pytest.mark.slow
def test_true_direction_beats_zeroed_direction():
    config = SimulationConfig(n=100, seed=8)
    w = DiscreteMeasure.uniform(np.round(np.arange(1, 13) * 0.1, 10))
    spec = KernelSpec("epanechnikov", 0.4)
    gaps = []
    for r in range(1, 21):
        sample = generate_sample(config, r).sample
        fit = kaplan_meier_censoring(sample)
        truth = criterion_semiparametric(THETA0, spec, w, sample, fit, TrimmingSpec())
        zeroed = criterion_semiparametric(ZEROED, spec, w, sample, fit, TrimmingSpec())
        gaps.append(truth - zeroed)
    assert np.median(gaps) < 0


@pytest.mark.slow
def test_joint_bandwidth_tracks_oracle_bandwidth():
    config = SimulationConfig(n=400, seed=12)
    w = DiscreteMeasure.uniform(np.round(np.arange(1, 13) * 0.1, 10))
    grid = [0.2, 0.3, 0.4, 0.5, 0.6]
    step = 0.1
    hits = 0
    reps = 5
    for r in range(1, reps + 1):
        sample = generate_sample(config, r).sample
        fit = kaplan_meier_censoring(sample)
        joint = fit_joint_theta_h(
            "epanechnikov", grid, w, sample, fit, ThetaDomain.box(4), optimizer_config=OptimizerConfig(n_starts=2)
        )
        oracle, _ = profile_bandwidth(THETA0, "epanechnikov", grid, w, sample, fit, TrimmingSpec())
        hits += abs(joint.chosen_bandwidth - oracle) <= step + 1e-9
    # ĥ 落在 h₀ 一个网格步长内的重复占多数
    assert hits > reps / 2
