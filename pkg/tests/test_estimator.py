import numpy as np
import pytest
from scipy.stats import norm

from src.core import Dataset, DictionarySpec, FoldPlan, make_folds
from src.errors import JackknifeSingularityError, ParameterError, WeakIdentificationError
from src.estimator import (
    ESTIMATORS,
    bisection_root,
    debiased_psi_bar,
    estimate_loo_jive,
    estimate_oracle,
    estimate_plugin,
    estimate_ujive_linear,
    estimate_variance,
    leave_one_out_examiner_means,
    solve_theta_debiased,
)
from src.learners import LearnerConfig
from src.nuisance import NuisanceFit, crossfit_gamma
from src.pipeline import ExaminerIVPipeline
from src.riesz import RieszFit


def _nuisance(g1, g2):
    g1, g2 = np.asarray(g1, dtype=float), np.asarray(g2, dtype=float)
    return NuisanceFit(g1, g2, np.zeros(g1.shape[0], dtype=int), "test")


def _riesz(a1, a2):
    return RieszFit(np.asarray(a1, dtype=float), np.asarray(a2, dtype=float), (), (), {}, (), ())


def _run(d, pipeline, plan, true_gamma=None, methods=ESTIMATORS):
    return ExaminerIVPipeline(pipeline, seed=3).estimate(d, methods, true_gamma=true_gamma, plan=plan)


@pytest.fixture
def hand_case():
    d = Dataset(y=[1.0, 2.0, 0.0, 1.0], t=[1, 1, 0, 0], x=None, z=[1, 1, 2, 2])
    nf = _nuisance([0.8, 0.6, 0.4, 0.2], [0.5, 0.5, 0.5, 0.5])
    rf = _riesz([0.1, -0.1, 0.2, 0.0], [0.0, 0.2, 0.0, -0.1])
    return d, nf, rf


def test_closed_form_solves_the_moment(hand_case):
    d, nf, rf = hand_case
    report = solve_theta_debiased(d, nf, rf)
    assert debiased_psi_bar(report.theta_hat, d, nf, rf) == pytest.approx(0.0, abs=1e-14)
    assert np.mean(report.psi) == pytest.approx(0.0, abs=1e-14)


def test_correction_terms_enter_the_numerator():
    d = Dataset(y=[1.0, 0.0], t=[1, 0], x=None, z=[1, 2])
    report = solve_theta_debiased(d, _nuisance([1.0, 0.0], [0.0, 0.0]), _riesz([0.0, 0.0], [0.2, 0.0]))
    assert report.theta_hat == pytest.approx(1.2)
    assert report.q_hat == pytest.approx(0.5)


def test_sandwich_variance_by_hand():
    var = estimate_variance(0.3, np.array([1.0, -1.0]), np.ones(2), np.full(2, 0.5), level=0.95)
    assert var.q_hat == pytest.approx(0.5)
    assert var.v_hat == pytest.approx(4.0)
    assert var.se == pytest.approx(np.sqrt(2.0))
    half = norm.ppf(0.975) * np.sqrt(2.0)
    assert (var.ci_low, var.ci_high) == pytest.approx((0.3 - half, 0.3 + half))


def test_zero_score_gives_degenerate_interval():
    var = estimate_variance(1.0, np.zeros(3), np.ones(3), np.ones(3), level=0.9)
    assert var.se == 0.0
    assert var.ci_low == var.ci_high == 1.0


def test_variance_rejects_bad_level():
    with pytest.raises(ParameterError):
        estimate_variance(0.0, np.ones(2), np.ones(2), np.ones(2), level=1.0)


def test_instrument_scale_leaves_theta_and_se_alone(hand_case):
    d, nf, _ = hand_case
    zero = _riesz(np.zeros(4), np.zeros(4))
    base = solve_theta_debiased(d, nf, zero)
    doubled = solve_theta_debiased(d, _nuisance(2 * nf.gamma1_hat, 2 * nf.gamma2_hat), zero)
    assert doubled.theta_hat == pytest.approx(base.theta_hat)
    assert doubled.se == pytest.approx(base.se)
    assert doubled.v_hat == pytest.approx(base.v_hat)
    assert doubled.q_hat == pytest.approx(2 * base.q_hat)
    assert np.allclose(doubled.psi, 2 * base.psi)
    rescaled = estimate_variance(base.theta_hat, 2 * base.psi, d.t, 2 * base.instrument, level=0.95)
    assert rescaled.v_hat == pytest.approx(base.v_hat)


def test_zero_first_stage_is_weak(hand_case):
    d, _, rf = hand_case
    with pytest.raises(WeakIdentificationError):
        solve_theta_debiased(d, _nuisance(np.full(4, 0.3), np.full(4, 0.3)), rf)


def test_without_corrections_debiased_equals_plugin(hand_case):
    d, nf, _ = hand_case
    zero = _riesz(np.zeros(4), np.zeros(4))
    assert solve_theta_debiased(d, nf, zero).theta_hat == pytest.approx(estimate_plugin(d, nf).theta_hat)


def test_moment_is_affine_in_theta(hand_case):
    d, nf, rf = hand_case
    a, b = debiased_psi_bar(-1.0, d, nf, rf), debiased_psi_bar(3.0, d, nf, rf)
    assert debiased_psi_bar(1.0, d, nf, rf) == pytest.approx(0.5 * (a + b))


def test_bisection_matches_closed_form(small_draw, fixed_pipeline):
    d = small_draw.dataset
    result = _run(d, fixed_pipeline, make_folds(d.n, 3, 9), methods=("debiased",))
    root = bisection_root(lambda th: debiased_psi_bar(th, d, result.nuisance, result.riesz), -1.0, 1.0)
    assert root == pytest.approx(result.reports["debiased"].theta_hat, abs=1e-10)


def test_bisection_widens_its_bracket():
    assert bisection_root(lambda x: x - 7.5, 0.0, 1.0) == pytest.approx(7.5)


def test_every_estimator_shifts_with_the_outcome(small_draw, fixed_pipeline):
    d = small_draw.dataset
    plan = make_folds(d.n, 3, 4)
    base = _run(d, fixed_pipeline, plan, small_draw.gamma_true)
    shifted = _run(d.with_outcome(d.y + 0.8 * d.t), fixed_pipeline, plan, small_draw.gamma_true)
    for method in ESTIMATORS:
        assert shifted.reports[method].theta_hat == pytest.approx(base.reports[method].theta_hat + 0.8, abs=1e-6)
        assert shifted.reports[method].se == pytest.approx(base.reports[method].se, rel=1e-5)


def test_fold_labels_do_not_matter(small_draw, fixed_pipeline):
    d = small_draw.dataset
    plan = make_folds(d.n, 3, 4)
    a = _run(d, fixed_pipeline, plan, methods=("debiased",)).reports["debiased"]
    b = _run(d, fixed_pipeline, plan.relabel([2, 0, 1]), methods=("debiased",)).reports["debiased"]
    assert b.theta_hat == pytest.approx(a.theta_hat, abs=1e-8)
    assert b.se == pytest.approx(a.se, rel=1e-6)


def test_row_order_does_not_matter(small_draw, fixed_pipeline):
    d = small_draw.dataset
    plan = make_folds(d.n, 3, 4)
    perm = np.random.default_rng(1).permutation(d.n)
    methods = ("debiased", "plugin", "loo_jive", "ujive_linear")
    a = _run(d, fixed_pipeline, plan, methods=methods)
    b = _run(d.take(perm), fixed_pipeline, plan.permute_rows(perm), methods=methods)
    for method in methods:
        assert b.reports[method].theta_hat == pytest.approx(a.reports[method].theta_hat, abs=1e-6)
    assert np.allclose(b.nuisance.gamma1_hat, a.nuisance.gamma1_hat[perm], atol=1e-6)


def test_proportional_outcome_is_recovered_exactly(small_draw, fixed_pipeline):
    d = small_draw.dataset
    d = d.with_outcome(-1.3 * d.t)
    result = _run(d, fixed_pipeline, make_folds(d.n, 3, 0), small_draw.gamma_true)
    for method in ESTIMATORS:
        assert result.reports[method].theta_hat == pytest.approx(-1.3, abs=1e-9)


def test_oracle_with_zero_instrument_is_weak(toy_dataset):
    with pytest.raises(WeakIdentificationError):
        estimate_oracle(toy_dataset, np.zeros(4))


def test_oracle_ignores_instrument_scale(small_draw):
    d = small_draw.dataset
    a = estimate_oracle(d, small_draw.gamma_true)
    b = estimate_oracle(d, 3.0 * small_draw.gamma_true)
    assert b.theta_hat == pytest.approx(a.theta_hat)
    assert b.se == pytest.approx(a.se)


def test_oracle_rejects_length_mismatch(toy_dataset):
    with pytest.raises(ParameterError, match="length mismatch"):
        estimate_oracle(toy_dataset, np.ones(3))


def test_leave_one_out_means_by_hand():
    d = Dataset(y=np.zeros(5), t=[1, 0, 1, 0, 1], x=None, z=[1, 1, 1, 2, 2])
    assert leave_one_out_examiner_means(d).tolist() == pytest.approx([0.5, 1.0, 0.5, 1.0, 0.0])


def test_leave_one_out_names_single_case_examiners():
    d = Dataset(y=np.zeros(3), t=[1, 0, 1], x=None, z=[4, 4, 9])
    with pytest.raises(ParameterError, match="9"):
        leave_one_out_examiner_means(d)


def test_loo_jive_without_treatment_variation_is_weak():
    d = Dataset(y=[1.0, 2.0, 3.0, 4.0], t=np.ones(4), x=None, z=[1, 1, 2, 2])
    with pytest.raises(WeakIdentificationError):
        estimate_loo_jive(d)


def test_loo_jive_with_equal_examiner_rates_is_weak():
    # own-case exclusion alone makes the instrument correlate with t here
    d = Dataset(y=[1.0, 0.0, 2.0, 1.0, 0.5, 1.5], t=[1, 0, 1, 0, 1, 0], x=None, z=[1, 1, 2, 2, 3, 3])
    assert np.allclose(leave_one_out_examiner_means(d), [0, 1, 0, 1, 0, 1])
    with pytest.raises(WeakIdentificationError, match="loo_jive"):
        estimate_loo_jive(d)


def test_loo_jive_instrument_is_crossfit_with_one_case_folds(small_draw):
    d = small_draw.dataset
    examiner_only = DictionarySpec(include_covariates=False)
    intercept_only = DictionarySpec(include_examiner_dummies=False, include_covariates=False, include_intercept=True)
    nf = crossfit_gamma(d, FoldPlan.from_labels(range(d.n)), examiner_only, intercept_only, LearnerConfig(method="ols"))
    assert np.allclose(leave_one_out_examiner_means(d), nf.gamma1_hat, atol=1e-10)
    report = estimate_loo_jive(d)
    assert np.allclose(report.instrument, nf.gamma1_hat - nf.gamma1_hat.mean(), atol=1e-10)


def test_ujive_instrument_without_controls():
    d = Dataset(y=[1.0, 0.0, 2.0, 1.0, 0.5, 1.5], t=[1, 0, 1, 1, 0, 0], x=None, z=[1, 1, 1, 2, 2, 2])
    report = estimate_ujive_linear(d)
    overall = (d.t.sum() - d.t) / (d.n - 1)
    expected = leave_one_out_examiner_means(d) - overall
    assert np.allclose(report.instrument, expected)


def test_ujive_with_one_examiner_per_stratum_is_weak():
    d = Dataset(y=[1.0, 0.0, 2.0, 1.0], t=[1, 0, 1, 0], x=None, z=[1, 1, 2, 2], stratum=[1, 1, 2, 2])
    with pytest.raises(WeakIdentificationError):
        estimate_ujive_linear(d)


def test_ujive_single_case_examiner_has_unit_leverage():
    d = Dataset(y=[1.0, 0.0, 2.0, 1.0, 0.5], t=[1, 0, 1, 0, 1], x=None, z=[1, 1, 2, 2, 3])
    with pytest.raises(JackknifeSingularityError) as info:
        estimate_ujive_linear(d)
    assert info.value.rows == [4]


def test_report_records(hand_case):
    d, nf, rf = hand_case
    report = solve_theta_debiased(d, nf, rf, level=0.9)
    record = report.to_dict()
    assert list(record) == ["method", "theta_hat", "se", "ci_low", "ci_high", "q_hat", "n", "level"]
    assert record["n"] == 4 and record["level"] == 0.9
    assert "p_value" in report.to_dict(extended=True)
    assert list(report.to_frame().columns) == ["i", "instrument", "psi"]


def test_observation_frame_columns(small_draw, fixed_pipeline):
    d = small_draw.dataset
    result = _run(d, fixed_pipeline, make_folds(d.n, 3, 0), methods=("debiased",))
    frame = result.observation_frame()
    assert list(frame.columns) == ["i", "fold", "gamma1_hat", "gamma2_hat", "alpha1_hat", "alpha2_hat", "psi"]
    assert len(frame) == d.n


def test_pipeline_requires_instrument_for_oracle(toy_dataset):
    with pytest.raises(ParameterError):
        ExaminerIVPipeline().estimate(toy_dataset, ("oracle",))


def test_extended_record_carries_asymptotic_variance(hand_case):
    d, nf, rf = hand_case
    report = solve_theta_debiased(d, nf, rf)
    extended = report.to_dict(extended=True)
    assert extended["v_hat"] == pytest.approx(report.se**2 * d.n)
    assert "v_hat" not in report.to_dict()
