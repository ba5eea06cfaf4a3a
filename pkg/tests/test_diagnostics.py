import dataclasses
import json

import numpy as np
import pytest

from src.diagnostics import (
    DiagnosticResult,
    affinity_check,
    boundedness_check,
    direction_vector,
    interaction_term_check,
    neyman_derivative_check,
    neyman_orthogonality_suite,
    quadratic_score,
    rate_product_scan,
    results_to_json,
    robustness_suite,
    run_diagnostics,
)
from src.errors import ParameterError
from src.pipeline import ExaminerIVPipeline
from src.sim import DgpConfig, draw_dgp


@pytest.fixture(scope="module")
def population():
    return draw_dgp(DgpConfig(n=100_000, J=10, S=2, p=10, s_sparse=5, seed=0))


@pytest.fixture
def fitted(small_draw, fixed_pipeline):
    result = ExaminerIVPipeline(fixed_pipeline, seed=1).fit(small_draw.dataset)
    return small_draw, result


def test_evaluate_compares_absolute_statistic():
    assert DiagnosticResult.evaluate("a", -0.5, 1.0).passed
    assert not DiagnosticResult.evaluate("b", 2.0, 1.0).passed
    record = DiagnosticResult.evaluate("c", 0.0, 0.0, note="x").to_dict()
    assert record == {"name": "c", "statistic": 0.0, "threshold": 0.0, "passed": True, "details": {"note": "x"}}


def test_results_serialize_to_json():
    payload = json.loads(results_to_json([DiagnosticResult.evaluate("a", 1.0, 2.0)]))
    assert payload[0]["name"] == "a"


def test_direction_is_rescaled_to_gamma_size(population):
    name, delta = direction_vector(population, "x1")
    assert name == "x1"
    assert np.sqrt(np.mean(delta**2)) == pytest.approx(np.sqrt(np.mean(population.gamma_true**2)))


def test_unknown_direction_rejected(population):
    with pytest.raises(ParameterError):
        direction_vector(population, "x99")
    with pytest.raises(ParameterError):
        direction_vector(population, "x1", target="psi")
    with pytest.raises(ParameterError):
        direction_vector(population, "examiner[1]", target="alpha2")


def test_orthogonal_score_is_flat_along_every_default_direction(population):
    results = neyman_orthogonality_suite(population)
    assert [r.name for r in results][:2] == ["neyman[gamma1:x1]", "neyman[gamma1:x2]"]
    assert all(r.passed for r in results), [(r.name, r.statistic, r.threshold) for r in results if not r.passed]


def test_plugin_moment_reacts_to_confounded_direction_only(population):
    confounded = neyman_derivative_check(population, "x1")
    irrelevant = neyman_derivative_check(population, "x10")
    assert abs(confounded.details["plugin_slope"]) > 0.03
    assert abs(irrelevant.details["plugin_slope"]) < 0.01


def test_gamma2_direction_is_flat_too(population):
    assert neyman_derivative_check(population, "x2", target="gamma2").passed


def test_suite_perturbs_every_nuisance(population):
    results = neyman_orthogonality_suite(population)
    targets = {r.details["target"] for r in results if "target" in r.details}
    assert targets == {"gamma1", "gamma2", "alpha1", "alpha2"}
    assert results[-1].name == "neyman[plugin_contrast]"


@pytest.mark.parametrize("target,direction", [("alpha1", "x1"), ("alpha1", "examiner[1]"), ("alpha2", "x10")])
def test_representer_directions_are_flat(population, target, direction):
    result = neyman_derivative_check(population, direction, target=target)
    assert result.passed, (result.statistic, result.threshold)
    assert abs(result.details["plugin_slope"]) < 1e-12


def test_wrong_representer_breaks_gamma2_orthogonality(population):
    broken = dataclasses.replace(population, alpha2_true=np.zeros(population.dataset.n))
    assert neyman_derivative_check(population, "x1", target="gamma2").passed
    assert not neyman_derivative_check(broken, "x1", target="gamma2").passed


def test_one_wrong_block_keeps_the_mean_at_zero(population):
    results = {r.name: r for r in robustness_suite(population)}
    assert set(results) == {
        "robustness[gamma1_wrong]",
        "robustness[gamma2_wrong]",
        "robustness[alpha_wrong]",
        "robustness[doubly_wrong]",
    }
    assert all(r.passed for r in results.values())
    assert abs(results["robustness[doubly_wrong]"].details["mean"]) > 0.0


def test_affinity_separates_orthogonal_from_quadratic(fitted):
    draw, result = fitted
    theta = result.reports["debiased"].theta_hat
    assert affinity_check(draw.dataset, result.nuisance, result.riesz, theta).passed
    bad = affinity_check(draw.dataset, result.nuisance, result.riesz, theta, quadratic_score)
    assert not bad.passed
    assert bad.details["gamma1"] > 1e-4


def test_interaction_within_cauchy_schwarz_bound(fitted):
    draw, result = fitted
    check = interaction_term_check(draw, result.nuisance, result.riesz)
    assert check.passed
    assert abs(check.details["interaction"]) <= check.details["bound"]


def test_boundedness_counts_nothing_on_finite_fits(fitted):
    draw, result = fitted
    check = boundedness_check(draw.dataset, result.nuisance, result.riesz, 0.5)
    assert check.passed
    assert check.statistic == 0.0
    assert 0.0 <= check.details["clipped_share"] <= 1.0


def test_oracle_rate_scan_is_zero(small_config):
    scan = rate_product_scan(small_config, [100, 200], R=2, use_oracle=True)
    assert scan.table["product"].tolist() == [0.0, 0.0]
    assert scan.non_increasing()
    assert scan.to_result().passed


@pytest.mark.parametrize("n_grid,R", [([200, 100], 5), ([100, 100], 5), ([100, 200], 1)])
def test_rate_scan_rejects_bad_arguments(small_config, n_grid, R):
    with pytest.raises(ParameterError):
        rate_product_scan(small_config, n_grid, R=R, use_oracle=True)


def test_run_diagnostics_runs_only_the_requested_checks(small_config, fixed_pipeline):
    results = run_diagnostics(small_config, ["boundedness", "affinity"], seed=2, pipeline=fixed_pipeline)
    assert [r.name for r in results] == ["affinity", "boundedness"]
    assert all(r.passed for r in results)


def test_run_diagnostics_flags_quadratic_score(small_config, fixed_pipeline):
    (result,) = run_diagnostics(small_config, ["affinity"], score="quadratic", pipeline=fixed_pipeline)
    assert not result.passed


def test_run_diagnostics_rejects_unknown_names(small_config):
    with pytest.raises(ParameterError):
        run_diagnostics(small_config, ["curvature"])
    with pytest.raises(ParameterError):
        run_diagnostics(small_config, ["affinity"], score="cubic")


@pytest.mark.slow
def test_lasso_error_product_shrinks_faster_than_root_n():
    scan = rate_product_scan(DgpConfig(), [500, 2000, 8000], R=50, seed=1, n_jobs=-1)
    assert scan.non_increasing("scaled_product")
    assert scan.non_increasing("product")
    assert scan.to_result().passed
    assert (scan.table["failures"] == 0).all()
