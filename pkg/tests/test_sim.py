import math

import numpy as np
import pytest

from src.errors import ParameterError, WeakIdentificationError
from src.estimator import estimate_oracle
from src.learners import LearnerConfig
from src.pipeline import ExaminerIVPipeline, PipelineConfig
from src.sim import (
    DgpConfig,
    McSummary,
    ReplicationResult,
    draw_dgp,
    make_dgp_config,
    oracle_alpha,
    oracle_gamma,
    replication_generators,
    run_monte_carlo,
    run_replication,
)

TINY = dict(n=300, J=4, S=2, p=4, s_sparse=2)


@pytest.mark.parametrize(
    "values", [dict(J=5, S=2), dict(p=3, s_sparse=4), dict(n=0), dict(noise_sd=0.0), dict(spread=1.0)]
)
def test_invalid_configs_raise_parameter_error(values):
    with pytest.raises(ParameterError):
        make_dgp_config(**values)


def test_draws_are_reproducible(small_config):
    a, b = draw_dgp(small_config), draw_dgp(small_config)
    assert np.array_equal(a.dataset.y, b.dataset.y)
    assert np.array_equal(a.dataset.z, b.dataset.z)
    assert np.array_equal(a.gamma1_true, b.gamma1_true)


def test_examiners_sit_in_their_stratum(small_draw, small_config):
    d = small_draw.dataset
    m = small_config.examiners_per_stratum
    assert np.all((d.z - 1) // m + 1 == d.stratum)
    assert set(np.unique(d.t)) <= {0.0, 1.0}


def test_two_examiner_instrument_by_hand():
    config = DgpConfig(J=2, S=1, p=0, s_sparse=0, kappa=0.0, judge_effect_spread=0.5)
    g1, g2 = oracle_gamma(config, np.zeros((2, 0)), [1, 2], [1, 1])
    assert (g1 - g2).tolist() == pytest.approx([-0.1224593312, 0.1224593312], abs=1e-9)
    assert g2.tolist() == pytest.approx([0.5, 0.5])


def test_one_examiner_per_stratum_has_no_judge_effect():
    config = DgpConfig(J=3, S=3, p=2, s_sparse=1)
    assert np.all(config.judge_effects() == 0.0)
    draw = draw_dgp(config.model_copy(update={"n": 200}))
    assert np.allclose(draw.gamma_true, 0.0)


def test_treatment_regressed_on_oracle_propensity_has_unit_slope():
    draw = draw_dgp(DgpConfig(n=100_000, seed=5))
    slope, intercept = np.polyfit(draw.gamma1_true, draw.dataset.t, 1)
    assert slope == pytest.approx(1.0, abs=0.02)
    assert intercept == pytest.approx(0.0, abs=0.02)


def test_confounder_sign_does_not_matter(small_draw, small_config):
    d = small_draw.dataset
    flipped = small_config.model_copy(update={"kappa": -small_config.kappa})
    g1, g2 = oracle_gamma(flipped, d.x, d.z, d.stratum)
    assert np.allclose(g1, small_draw.gamma1_true)
    assert np.allclose(g2, small_draw.gamma2_true)


def test_gamma_is_the_difference(small_draw):
    assert np.array_equal(small_draw.gamma_true, small_draw.gamma1_true - small_draw.gamma2_true)


def test_gamma2_averages_gamma1_over_the_stratum(small_config):
    x = np.full(small_config.p, 0.3)
    m = small_config.examiners_per_stratum
    rows = [oracle_gamma(small_config, x, z, 2) for z in range(m + 1, 2 * m + 1)]
    assert np.mean([g1 for g1, _ in rows]) == pytest.approx(rows[0][1])


def test_alpha_at_the_truth_is_the_outcome_index(small_config):
    e1 = np.zeros(small_config.p)
    e1[0] = 1.0
    assert oracle_alpha(small_config, e1) == pytest.approx((1.0, -1.0))


def test_alpha_away_from_the_truth_needs_examiner(small_config):
    x = np.zeros(small_config.p)
    with pytest.raises(ParameterError):
        oracle_alpha(small_config, x, theta0=0.0)
    a1, a2 = oracle_alpha(small_config, x, theta0=small_config.theta0 - 1.0, z=1, stratum=1)
    g1, g2 = oracle_gamma(small_config, x, 1, 1)
    assert (a1, a2) == pytest.approx((g1, -g2))


def test_zero_spread_leaves_oracle_unidentified():
    draw = draw_dgp(DgpConfig(judge_effect_spread=0.0, **TINY))
    with pytest.raises(WeakIdentificationError):
        estimate_oracle(draw.dataset, draw.gamma_true)


def test_replications_get_distinct_streams():
    (rng0, fold0), (rng1, fold1) = replication_generators(5, 0), replication_generators(5, 1)
    assert fold0 != fold1
    assert rng0.random() != rng1.random()
    rng_again, fold_again = replication_generators(5, 0)
    assert fold_again == fold0


def test_replication_records_failures_instead_of_raising(fixed_pipeline):
    config = DgpConfig(judge_effect_spread=0.0, **TINY)
    results = run_replication(config, 0, ["oracle", "loo_jive"], seed=1, pipeline=fixed_pipeline)
    oracle = next(r for r in results if r.method == "oracle")
    assert not oracle.ok
    assert oracle.error.startswith("WeakIdentificationError")
    assert math.isnan(oracle.theta_hat)


def test_linear_algebra_failures_are_recorded(fixed_pipeline, monkeypatch):
    def singular(self, d, plan):
        raise np.linalg.LinAlgError("Singular matrix")

    monkeypatch.setattr(ExaminerIVPipeline, "fit_nuisance", singular)
    results = run_replication(DgpConfig(**TINY), 0, ["debiased", "plugin", "oracle"], seed=1, pipeline=fixed_pipeline)
    by_method = {r.method: r for r in results}
    assert by_method["debiased"].error == "LinAlgError: Singular matrix"
    assert by_method["plugin"].error == "LinAlgError: Singular matrix"
    assert by_method["oracle"].ok


def test_monte_carlo_smoke(fixed_pipeline):
    config = DgpConfig(**TINY)
    methods = ["debiased", "plugin", "oracle", "loo_jive"]
    summary = run_monte_carlo(config, methods, R=2, seed=3, pipeline=fixed_pipeline)
    frame = summary.to_frame()
    assert frame["method"].tolist() == methods
    assert (frame["R"] == 2).all()
    assert len(summary.replications_frame()) == 2 * len(methods)
    for method in methods:
        row = summary[method]
        assert row.rmse**2 >= row.bias**2 - 1e-15
        assert row.failures == 0


def test_monte_carlo_is_reproducible(fixed_pipeline):
    config = DgpConfig(**TINY)
    a = run_monte_carlo(config, ["plugin"], R=2, seed=8, pipeline=fixed_pipeline)
    b = run_monte_carlo(config, ["plugin"], R=2, seed=8, pipeline=fixed_pipeline, n_jobs=2)
    assert a.to_json() == b.to_json()


def test_monte_carlo_needs_two_replications(small_config):
    with pytest.raises(ParameterError):
        run_monte_carlo(small_config, ["oracle"], R=1)


def test_monte_carlo_rejects_unknown_backend(small_config):
    with pytest.raises(ParameterError):
        run_monte_carlo(small_config, ["oracle"], R=2, backend="spark")


def _records():
    return [
        ReplicationResult(0, "oracle", 0.4, 0.1, 0.2, 0.6),
        ReplicationResult(1, "oracle", 0.7, 0.1, 0.55, 0.85),
        ReplicationResult(0, "plugin", 0.3, 0.2, -0.1, 0.7),
        ReplicationResult(1, "plugin", error="WeakIdentificationError: weak"),
    ]


def test_summary_does_not_depend_on_record_order(small_config):
    records = _records()
    forward = McSummary(small_config, records)
    backward = McSummary(small_config, records[::-1])
    assert forward.to_json() == backward.to_json()


def test_summary_statistics_by_hand(small_config):
    summary = McSummary(small_config, _records())
    oracle = summary["oracle"]
    assert oracle.bias == pytest.approx(0.05)
    assert oracle.rmse == pytest.approx(np.sqrt((0.1**2 + 0.2**2) / 2))
    assert oracle.coverage == 0.5
    assert summary["plugin"].failures == 1
    assert summary["plugin"].coverage == 1.0


def test_summary_of_only_failures_is_nan(small_config):
    summary = McSummary(small_config, [ReplicationResult(0, "ujive_linear", error="x")] * 2)
    assert math.isnan(summary["ujive_linear"].coverage)
    assert summary["ujive_linear"].failures == 2


def test_merge_requires_same_config(small_config):
    records = _records()
    merged = McSummary(small_config, records[:2]).merge(McSummary(small_config, records[2:]))
    assert merged.to_json() == McSummary(small_config, records).to_json()
    other = McSummary(small_config.model_copy(update={"n": 10}), records)
    with pytest.raises(ParameterError):
        merged.merge(other)


@pytest.mark.slow
def test_oracle_interval_covers_at_nominal_rate():
    summary = run_monte_carlo(DgpConfig(), ["oracle"], R=500, seed=1, n_jobs=-1)
    assert 0.92 <= summary["oracle"].coverage <= 0.98


@pytest.mark.slow
def test_debiased_interval_covers_at_nominal_rate():
    summary = run_monte_carlo(DgpConfig(n=4000), ["debiased"], R=500, seed=2, n_jobs=-1)
    assert summary["debiased"].failures == 0
    assert 0.91 <= summary["debiased"].coverage <= 0.98


@pytest.mark.slow
def test_debiased_error_shrinks_at_root_n():
    small = run_monte_carlo(DgpConfig(n=2000), ["debiased"], R=200, seed=3, n_jobs=-1)
    large = run_monte_carlo(DgpConfig(n=8000), ["debiased"], R=200, seed=3, n_jobs=-1)
    assert large["debiased"].rmse / small["debiased"].rmse <= 0.65


@pytest.mark.slow
def test_correction_removes_inflated_penalty_bias():
    inflated = LearnerConfig(method="lasso", penalty_scale=4.0)
    pipeline = PipelineConfig(learner=inflated, riesz=inflated)
    summary = run_monte_carlo(DgpConfig(n=2000), ["debiased", "plugin"], R=200, seed=4, pipeline=pipeline, n_jobs=-1)
    debiased, plugin = summary["debiased"], summary["plugin"]
    assert abs(debiased.bias) < abs(plugin.bias)
    assert abs(plugin.bias) > 2 * plugin.bias_mcse
    assert abs(debiased.bias) <= 2 * debiased.bias_mcse
