import numpy as np
import pytest
from scipy import integrate

from app.estimation.criteria import LinearIndexModel, ParametricEstimator, ThetaDomain
from app.estimation.data_model import DiscreteMeasure, Sample, Subject, validate_sample
from app.estimation.inference import (
    InfluenceComponents,
    load_lattice,
    psi_hat,
    save_lattice,
    select_weight_measure,
    variance_report,
    weight_lattice,
)
from app.estimation.kernel_regression import KernelSpec
from app.estimation.survival import eta_hat, kaplan_meier_censoring, rescaled_process
from app.utils.errors import AllCandidatesSingular, SchemaError, SingularSigma

THETA0 = np.array([1.0, 1.6, 1.25, 0.7])


def _stub_components(residual: np.ndarray, gradient_outer: np.ndarray) -> InfluenceComponents:
    return InfluenceComponents(
        support=np.array([1.0]),
        residual_terms=residual,
        censoring_terms=np.zeros_like(residual),
        gradient_outer=gradient_outer,
    )


def test_zero_measure_gives_zero_psi(design_sample):
    fit = kaplan_meier_censoring(design_sample)
    w = DiscreteMeasure([0.5, 1.0], [0.0, 0.0])
    estimator = ParametricEstimator(LinearIndexModel(4, 5.0))

    assert np.array_equal(psi_hat(3, THETA0, estimator, w, design_sample, fit), np.zeros(3))


def test_no_events_no_censoring_gives_zero_psi():
    rng = np.random.default_rng(4)
    sample = validate_sample(
        Sample(tuple(Subject(float(T), True, tuple(rng.uniform(1, 2, 2)), ()) for T in range(1, 6)))
    )
    fit = kaplan_meier_censoring(sample)
    w = DiscreteMeasure.uniform([0.5, 1.5, 3.0])

    for i in range(sample.n):
        psi = psi_hat(sample[i], [1.0, 0.5], KernelSpec("epanechnikov", 10.0), w, sample, fit)
        assert np.allclose(psi, 0.0)


def test_psi_matches_direct_integration(hand_sample, hand_fit):
    model = LinearIndexModel(2, intercept=1.0)
    theta = np.array([1.0, 0.5])
    w = DiscreteMeasure([0.5, 1.0, 2.5], [1.0, 0.5, 2.0])
    Z = hand_sample.Z
    level = Z @ theta + model.intercept

    for l, subject in enumerate(hand_sample):
        Y = rescaled_process(subject, hand_fit)
        expected = 0.0
        for t, mass in zip(w.support, w.masses):
            residual = (Y(t) - level[l] * t) * Z[l, 1] * t
            inner, _ = integrate.quad(
                lambda s: eta_hat(hand_fit, subject.T, subject.delta, s),
                0.0,
                t,
                points=[p for p in (1.0, 2.0, 3.0) if p < t] or None,
                limit=200,
            )
            coupling = np.mean(level * Z[:, 1] * t)
            expected += mass * (residual + inner * coupling)

        psi = psi_hat(l, theta, ParametricEstimator(model), w, hand_sample, hand_fit)
        assert psi[0] == pytest.approx(expected, abs=1e-8)


def test_identity_sigma_reduces_to_delta():
    rng = np.random.default_rng(0)
    components = _stub_components(rng.normal(size=(50, 1, 3)), np.eye(3)[None])

    report = components.report(DiscreteMeasure([1.0], [1.0]))

    assert np.allclose(report.sigma_hat, np.eye(3))
    assert np.allclose(report.v_hat, report.delta_hat)
    assert report.mse_hat == pytest.approx(float(report.xi_hat @ report.xi_hat))


def test_identical_psi_gives_zero_delta():
    residual = np.tile(np.array([[[0.3, -0.2]]]), (20, 1, 1))
    report = _stub_components(residual, 2 * np.eye(2)[None]).report(DiscreteMeasure([1.0], [1.0]))

    assert np.allclose(report.delta_hat, 0.0)
    assert report.mse_hat == pytest.approx((0.3**2 + 0.2**2) / 4)


def test_singular_sigma_is_reported():
    components = _stub_components(np.ones((10, 1, 2)), np.zeros((1, 2, 2)))
    with pytest.raises(SingularSigma):
        components.report(DiscreteMeasure([1.0], [1.0]))


def test_variance_report_shapes(design_sample, unit_weights):
    fit = kaplan_meier_censoring(design_sample)

    report = variance_report(THETA0, KernelSpec("epanechnikov", 0.4), unit_weights, design_sample, fit)

    assert report.v_hat.shape == (3, 3)
    assert np.allclose(report.v_hat, report.v_hat.T)
    assert np.min(np.linalg.eigvalsh(report.delta_hat)) >= -1e-10
    assert report.mse_hat >= 0


def test_psi_by_subject_matches_index(design_sample, unit_weights):
    fit = kaplan_meier_censoring(design_sample)
    estimator = ParametricEstimator(LinearIndexModel(4, 5.0))

    by_index = psi_hat(7, THETA0, estimator, unit_weights, design_sample, fit)
    by_subject = psi_hat(design_sample[7], THETA0, estimator, unit_weights, design_sample, fit)

    assert np.array_equal(by_index, by_subject)


def test_single_candidate_is_returned(design_sample, unit_weights):
    fit = kaplan_meier_censoring(design_sample)
    estimator = ParametricEstimator(LinearIndexModel(4, 5.0))

    chosen, report = select_weight_measure(
        [unit_weights], unit_weights, estimator, design_sample, fit, ThetaDomain.box(4)
    )

    assert chosen is unit_weights
    assert report.chosen_measure is unit_weights
    assert report.variance_matrix.shape == (3, 3)
    assert report.mse_estimate is not None
    assert report.diagnostics["chosen_index"] == 0


def test_selection_takes_smallest_mse(design_sample, unit_weights):
    fit = kaplan_meier_censoring(design_sample)
    estimator = ParametricEstimator(LinearIndexModel(4, 5.0))
    candidates = weight_lattice(levels=(0.5, 1.0))

    chosen, report = select_weight_measure(candidates, unit_weights, estimator, design_sample, fit, ThetaDomain.box(4))

    table = report.diagnostics["candidate_mse"]
    assert len(table) == 16
    assert report.diagnostics["chosen_index"] == int(np.argmin(table))
    assert chosen is candidates[report.diagnostics["chosen_index"]]


def test_selection_ties_go_to_first_candidate(design_sample, unit_weights):
    fit = kaplan_meier_censoring(design_sample)
    estimator = ParametricEstimator(LinearIndexModel(4, 5.0))
    twin = DiscreteMeasure(unit_weights.support, unit_weights.masses)

    chosen, report = select_weight_measure([unit_weights, twin], unit_weights, estimator, design_sample, fit, ThetaDomain.box(4))

    assert chosen is unit_weights
    assert report.diagnostics["chosen_index"] == 0


def test_all_singular_candidates(design_sample, unit_weights):
    fit = kaplan_meier_censoring(design_sample)
    estimator = ParametricEstimator(LinearIndexModel(4, 5.0))
    empty = DiscreteMeasure(unit_weights.support, np.zeros(unit_weights.support.size))

    with pytest.raises(AllCandidatesSingular):
        select_weight_measure([empty, empty], unit_weights, estimator, design_sample, fit, ThetaDomain.box(4))


def test_lattice_order_and_size():
    lattice = weight_lattice()
    tails = [0.9, 1.0, 1.1, 1.2]

    assert len(lattice) == 256
    assert [lattice[0].mass_at(t) for t in tails] == [0.25] * 4
    assert [lattice[1].mass_at(t) for t in tails] == [0.25, 0.25, 0.25, 0.5]
    assert [lattice[-1].mass_at(t) for t in tails] == [1.0] * 4
    assert all(w.mass_at(0.5) == 1.0 for w in lattice)


def test_lattice_rejects_tail_outside_support():
    with pytest.raises(ValueError):
        weight_lattice(tail_points=(1.3,))


def test_lattice_file_round_trip(tmp_path):
    lattice = weight_lattice(levels=(0.5, 1.0))
    path = tmp_path / "lattice.json"

    save_lattice(lattice, path)
    restored = load_lattice(path)

    assert len(restored) == len(lattice)
    for a, b in zip(lattice, restored):
        assert np.array_equal(a.support, b.support)
        assert np.array_equal(a.masses, b.masses)


def test_lattice_file_schema_errors(tmp_path):
    path = tmp_path / "lattice.json"
    path.write_text("[]")
    with pytest.raises(SchemaError):
        load_lattice(path)
    path.write_text('[{"support": [0.2, 0.1], "masses": [1, 1]}]')
    with pytest.raises(SchemaError):
        load_lattice(path)
