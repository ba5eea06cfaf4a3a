"""Numerical checks of the orthogonal score against simulated populations with known nuisances."""

from __future__ import annotations

import json
from collections.abc import Callable, Sequence
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd
from absl import logging
from joblib import Parallel, delayed

from .core import Dataset, DictionarySpec, build_dictionary
from .errors import ExaminerIVError, ParameterError
from .estimator import identifying_score, orthogonal_score
from .nuisance import NuisanceFit
from .pipeline import ExaminerIVPipeline, PipelineConfig
from .riesz import RieszFit
from .sim import DgpConfig, DgpDraw, draw_dgp

Score = Callable[..., np.ndarray]

DEFAULT_T_GRID = (-0.5, -0.25, 0.0, 0.25, 0.5)
CHECKS = ("neyman", "robustness", "affinity", "rate", "interaction", "boundedness")
DEFAULT_CHECKS = ("neyman", "robustness", "affinity", "rate")

NEYMAN_TOLERANCE = 0.02  # slope, in units of sd(psi)
PLUGIN_CONTRAST = 5.0
ROBUST_SE_MULTIPLE = 3.0
POWER_SE_MULTIPLE = 10.0
AFFINITY_TOLERANCE = 1e-12
WRONG_GAMMA = 0.5
WRONG_ALPHA = 0.0


@dataclass(frozen=True)
class DiagnosticResult:
    name: str
    statistic: float
    threshold: float
    passed: bool
    details: dict = field(default_factory=dict)

    @classmethod
    def evaluate(cls, name: str, statistic: float, threshold: float, **details) -> DiagnosticResult:
        statistic = float(statistic)
        return cls(name, statistic, float(threshold), bool(abs(statistic) <= threshold), details)

    def to_dict(self) -> dict:
        return asdict(self)


def results_to_json(results: Sequence[DiagnosticResult]) -> str:
    return json.dumps([r.to_dict() for r in results], indent=2, allow_nan=True)


def quadratic_score(theta, y, t, gamma1, gamma2, alpha1, alpha2) -> np.ndarray:
    """Orthogonal score plus gamma1^2; not affine in gamma1, used to show the affinity check bites."""
    return orthogonal_score(theta, y, t, gamma1, gamma2, alpha1, alpha2) + gamma1**2


SCORES: dict[str, Score] = {"orthogonal": orthogonal_score, "quadratic": quadratic_score}


def _oracle_args(pop: DgpDraw) -> dict:
    d = pop.dataset
    return dict(
        y=d.y, t=d.t, gamma1=pop.gamma1_true, gamma2=pop.gamma2_true, alpha1=pop.alpha1_true, alpha2=pop.alpha2_true
    )


def _rms(values) -> float:
    return float(np.sqrt(np.mean(np.square(values))))


def _slope(t_grid: Sequence[float], values: Sequence[float]) -> float:
    return float(np.polyfit(np.asarray(t_grid, dtype=float), np.asarray(values, dtype=float), 1)[0])


NUISANCES = ("gamma1", "gamma2", "alpha1", "alpha2")


def direction_vector(
    pop: DgpDraw,
    direction: str | int,
    target: str = "gamma1",
    dictionary: DictionarySpec | None = None,
) -> tuple[str, np.ndarray]:
    """Standardized dictionary column rescaled to the root-mean-square size of the true gamma.

    gamma2 and alpha2 depend on X only, so their directions come from the examiner-free dictionary.
    """
    if target not in NUISANCES:
        raise ParameterError(f"target must be one of {', '.join(NUISANCES)}, got {target!r}")
    d = pop.dataset
    spec = dictionary or DictionarySpec(include_stratum_dummies=d.stratum is not None)
    if target in ("gamma2", "alpha2"):
        spec = spec.without_examiner()
    design = build_dictionary(d, spec, standardize=True)
    if isinstance(direction, str):
        if direction not in design.column_names:
            raise ParameterError(f"direction {direction!r} is not a column of the {target} dictionary")
        j = design.column_names.index(direction)
    else:
        j = int(direction)
    if design.constant[j]:
        raise ParameterError(f"direction {design.column_names[j]!r} is constant")
    delta = design.values[:, j]
    return design.column_names[j], delta * (_rms(pop.gamma_true) / _rms(delta))


def neyman_derivative_check(
    pop: DgpDraw,
    direction: str | int,
    t_grid: Sequence[float] = DEFAULT_T_GRID,
    target: str = "gamma1",
    dictionary: DictionarySpec | None = None,
) -> DiagnosticResult:
    """Slope in t of the mean orthogonal score when one true nuisance moves to nuisance + t * delta.

    The other three nuisances stay at their true values. The plug-in moment's slope along the
    same path is reported as a contrast (it is flat in the alphas, which it does not use).
    """
    name, delta = direction_vector(pop, direction, target, dictionary)
    base = _oracle_args(pop)
    orth, plug = [], []
    for step in t_grid:
        args = dict(base)
        args[target] = base[target] + step * delta
        orth.append(float(np.mean(orthogonal_score(pop.theta0, **args))))
        plug.append(float(np.mean(identifying_score(pop.theta0, **args))))
    scale = float(np.std(orthogonal_score(pop.theta0, **base)))
    slope, plugin_slope = _slope(t_grid, orth), _slope(t_grid, plug)
    return DiagnosticResult.evaluate(
        f"neyman[{target}:{name}]",
        slope,
        NEYMAN_TOLERANCE * scale,
        plugin_slope=plugin_slope,
        scale=scale,
        direction=name,
        target=target,
    )


def default_directions(pop: DgpDraw) -> list[str]:
    """Two confounded covariates, one irrelevant covariate and two examiner dummies."""
    d = pop.dataset
    config = pop.config
    names = list(d.covariate_names[:2])
    if config is not None and d.p > config.s_sparse:
        names.append(d.covariate_names[-1])
    labels = d.examiner_labels
    names += [f"examiner[{labels[0]}]", f"examiner[{labels[-1]}]"]
    return names


def default_nuisance_directions(pop: DgpDraw) -> list[tuple[str, str]]:
    """(target, direction) rows for gamma2, alpha1 and alpha2."""
    d = pop.dataset
    first_examiner = f"examiner[{d.examiner_labels[0]}]"
    rows = [("alpha1", first_examiner)]
    if d.p:
        x1, x_last = d.covariate_names[0], d.covariate_names[-1]
        rows = [("gamma2", x1), ("gamma2", x_last), ("alpha1", x1)] + rows + [("alpha2", x1), ("alpha2", x_last)]
    return rows


def neyman_orthogonality_suite(
    pop: DgpDraw,
    directions: Sequence[str | int] | None = None,
    t_grid: Sequence[float] = DEFAULT_T_GRID,
    nuisance_directions: Sequence[tuple[str, str | int]] | None = None,
) -> list[DiagnosticResult]:
    """gamma1 rows for `directions`, rows for the other three nuisances, then the plug-in contrast.

    The contrast passes when the plug-in slope is clearly larger along some gamma1 direction.
    """
    directions = default_directions(pop) if directions is None else directions
    nuisance_directions = default_nuisance_directions(pop) if nuisance_directions is None else nuisance_directions
    gamma1_rows = [neyman_derivative_check(pop, k, t_grid) for k in directions]
    other_rows = [neyman_derivative_check(pop, k, t_grid, target=target) for target, k in nuisance_directions]
    # passes when |orth| / |plugin| < 1 / PLUGIN_CONTRAST for some direction
    ratios = [
        PLUGIN_CONTRAST * abs(r.statistic) / abs(r.details["plugin_slope"])
        for r in gamma1_rows
        if r.details["plugin_slope"] != 0.0
    ]
    contrast = DiagnosticResult.evaluate(
        "neyman[plugin_contrast]",
        min(ratios) if ratios else np.inf,
        1.0,
        best_ratio=(PLUGIN_CONTRAST / min(ratios)) if ratios and min(ratios) > 0 else np.inf,
    )
    return gamma1_rows + other_rows + [contrast]


def robustness_suite(pop: DgpDraw) -> list[DiagnosticResult]:
    """Mean score at theta0 with one nuisance block replaced by a wrong function."""
    base = _oracle_args(pop)
    n = pop.dataset.n
    wrong_gamma = np.full(n, WRONG_GAMMA)
    wrong_alpha = np.full(n, WRONG_ALPHA)
    cases = {
        "gamma1_wrong": dict(base, gamma1=wrong_gamma),
        "gamma2_wrong": dict(base, gamma2=wrong_gamma),
        "alpha_wrong": dict(base, alpha1=wrong_alpha, alpha2=wrong_alpha),
    }
    results = []
    for name, args in cases.items():
        psi = orthogonal_score(pop.theta0, **args)
        se = float(np.std(psi) / np.sqrt(n))
        results.append(
            DiagnosticResult.evaluate(f"robustness[{name}]", np.mean(psi), ROBUST_SE_MULTIPLE * se, se=se)
        )

    psi = orthogonal_score(pop.theta0, **dict(base, gamma1=wrong_gamma, alpha1=wrong_alpha))
    mean, se = float(np.mean(psi)), float(np.std(psi) / np.sqrt(n))
    # the control must fail: passes when |mean| exceeds POWER_SE_MULTIPLE standard errors
    results.append(
        DiagnosticResult.evaluate(
            "robustness[doubly_wrong]",
            POWER_SE_MULTIPLE * se / abs(mean) if mean else np.inf,
            1.0,
            mean=mean,
            se=se,
        )
    )
    return results


def affinity_check(
    d: Dataset,
    nf: NuisanceFit,
    rf: RieszFit,
    theta: float,
    score: Score = orthogonal_score,
    step: float = 0.2,
    seed: int = 0,
) -> DiagnosticResult:
    """Midpoint test |psi_bar(mid) - (psi_bar(a) + psi_bar(b)) / 2| along each nuisance and theta."""
    rng = np.random.default_rng(seed)
    base = dict(
        y=d.y, t=d.t, gamma1=nf.gamma1_hat, gamma2=nf.gamma2_hat, alpha1=rf.alpha1_hat, alpha2=rf.alpha2_hat
    )

    def psi_bar(th, args) -> float:
        return float(np.mean(score(th, **args)))

    deviations = {}
    for component in ("gamma1", "gamma2", "alpha1", "alpha2"):
        a = base[component]
        b = a + step * rng.standard_normal(d.n)
        mid = 0.5 * (a + b)
        deviations[component] = abs(
            psi_bar(theta, dict(base, **{component: mid}))
            - 0.5 * (psi_bar(theta, dict(base, **{component: a})) + psi_bar(theta, dict(base, **{component: b})))
        )
    theta_b = theta + step
    deviations["theta"] = abs(
        psi_bar(0.5 * (theta + theta_b), base) - 0.5 * (psi_bar(theta, base) + psi_bar(theta_b, base))
    )
    size = max(1.0, float(np.mean(np.abs(score(theta, **base)))))
    return DiagnosticResult.evaluate("affinity", max(deviations.values()), AFFINITY_TOLERANCE * size, **deviations)


def interaction_term_check(pop: DgpDraw, nf: NuisanceFit, rf: RieszFit) -> DiagnosticResult:
    """Mean of (alpha_true - alpha_hat)(gamma_hat - gamma_true), which Cauchy-Schwarz bounds."""
    pairs = (
        (pop.alpha1_true - rf.alpha1_hat, nf.gamma1_hat - pop.gamma1_true),
        (pop.alpha2_true - rf.alpha2_hat, nf.gamma2_hat - pop.gamma2_true),
    )
    delta = sum(float(np.mean(a * g)) for a, g in pairs)
    bound = sum(_rms(a) * _rms(g) for a, g in pairs)
    return DiagnosticResult.evaluate(
        "interaction", max(0.0, abs(delta) - bound), 1e-10, interaction=delta, bound=bound
    )


def boundedness_check(d: Dataset, nf: NuisanceFit, rf: RieszFit, theta: float) -> DiagnosticResult:
    """Counts non-finite representer or score values; reports their sizes and the clipped share."""
    psi = orthogonal_score(theta, d.y, d.t, nf.gamma1_hat, nf.gamma2_hat, rf.alpha1_hat, rf.alpha2_hat)
    bad = int(np.sum(~np.isfinite(rf.alpha1_hat)) + np.sum(~np.isfinite(rf.alpha2_hat)) + np.sum(~np.isfinite(psi)))
    return DiagnosticResult.evaluate(
        "boundedness",
        bad,
        0.0,
        max_abs_alpha1=float(np.max(np.abs(rf.alpha1_hat))),
        max_abs_alpha2=float(np.max(np.abs(rf.alpha2_hat))),
        mean_psi_sq=float(np.mean(psi**2)),
        clipped_share=nf.clipped_count / (2.0 * d.n),
    )


@dataclass(frozen=True)
class RateScan:
    table: pd.DataFrame

    def non_increasing(self, column: str = "scaled_product") -> bool:
        return bool(np.all(np.diff(self.table[column].to_numpy()) <= 1e-12))

    def to_result(self) -> DiagnosticResult:
        scaled = self.table["scaled_product"].to_numpy()
        worst = float(np.max(np.diff(scaled), initial=0.0))
        return DiagnosticResult.evaluate(
            "rate_product",
            max(0.0, worst),
            0.0,
            n_grid=[int(v) for v in self.table["n"]],
            scaled_product=[float(v) for v in scaled],
            product_decreasing=self.non_increasing("product"),
        )


def _rate_errors(config: DgpConfig, n: int, rep: int, seed: int, pipeline: PipelineConfig, use_oracle: bool):
    data_seq, fold_seq = np.random.SeedSequence([seed, n, rep]).spawn(2)
    pop = draw_dgp(config.model_copy(update={"n": n}), np.random.default_rng(data_seq))
    if use_oracle:
        return 0.0, 0.0, 0.0, 0.0
    runner = ExaminerIVPipeline(pipeline, seed=int(fold_seq.generate_state(1)[0]))
    d = pop.dataset
    plan = runner.make_plan(d)
    try:
        nf = runner.fit_nuisance(d, plan)
        rf = runner.fit_riesz(d, plan, nf)
    except ExaminerIVError as exc:
        logging.vlog(1, "rate scan n=%d rep=%d failed: %s", n, rep, exc)
        return None
    return (
        _rms(nf.gamma1_hat - pop.gamma1_true),
        _rms(nf.gamma2_hat - pop.gamma2_true),
        _rms(rf.alpha1_hat - pop.alpha1_true),
        _rms(rf.alpha2_hat - pop.alpha2_true),
    )


def rate_product_scan(
    config: DgpConfig,
    n_grid: Sequence[int],
    R: int,
    seed: int = 0,
    pipeline: PipelineConfig | None = None,
    use_oracle: bool = False,
    n_jobs: int | None = 1,
) -> RateScan:
    """Average ||alpha_hat - alpha|| * ||gamma_hat - gamma|| (per component, summed) over R draws per n."""
    n_grid = [int(v) for v in n_grid]
    if any(b <= a for a, b in zip(n_grid, n_grid[1:])):
        raise ParameterError(f"n_grid must be increasing, got {n_grid}")
    if R < 2:
        raise ParameterError(f"rate scan needs R >= 2, got {R}")
    if R < 50:
        logging.warning("rate scan with R=%d replications; averages will be noisy", R)
    pipeline = PipelineConfig() if pipeline is None else pipeline

    rows = []
    for n in n_grid:
        errors = Parallel(n_jobs=n_jobs)(
            delayed(_rate_errors)(config, n, rep, seed, pipeline, use_oracle) for rep in range(R)
        )
        good = np.array([e for e in errors if e is not None], dtype=float).reshape(-1, 4)
        product = good[:, 2] * good[:, 0] + good[:, 3] * good[:, 1]
        rows.append(
            {
                "n": n,
                "product": float(product.mean()) if product.size else np.nan,
                "scaled_product": float(np.sqrt(n) * product.mean()) if product.size else np.nan,
                "gamma1_rmse": float(good[:, 0].mean()) if good.size else np.nan,
                "gamma2_rmse": float(good[:, 1].mean()) if good.size else np.nan,
                "alpha1_rmse": float(good[:, 2].mean()) if good.size else np.nan,
                "alpha2_rmse": float(good[:, 3].mean()) if good.size else np.nan,
                "failures": R - good.shape[0],
            }
        )
        logging.info("rate scan n=%d: product %.5f scaled %.4f", n, rows[-1]["product"], rows[-1]["scaled_product"])
    return RateScan(pd.DataFrame(rows))


def run_diagnostics(
    config: DgpConfig,
    checks: Sequence[str] = DEFAULT_CHECKS,
    seed: int = 0,
    score: str = "orthogonal",
    population_n: int = 100_000,
    rate_n_grid: Sequence[int] = (500, 2000, 8000),
    rate_replications: int = 50,
    pipeline: PipelineConfig | None = None,
    n_jobs: int | None = 1,
) -> list[DiagnosticResult]:
    """Run the requested checks in a fixed order; results are reproducible given (config, seed)."""
    unknown = [c for c in checks if c not in CHECKS]
    if unknown:
        raise ParameterError(f"unknown diagnostic(s): {', '.join(unknown)}")
    if score not in SCORES:
        raise ParameterError(f"unknown score {score!r}; expected one of {sorted(SCORES)}")
    pipeline = PipelineConfig() if pipeline is None else pipeline
    results: list[DiagnosticResult] = []

    if "neyman" in checks or "robustness" in checks:
        pop = draw_dgp(config.model_copy(update={"n": population_n, "seed": seed}))
        if "neyman" in checks:
            results += neyman_orthogonality_suite(pop)
        if "robustness" in checks:
            results += robustness_suite(pop)

    fitted_checks = {"affinity", "interaction", "boundedness"} & set(checks)
    if fitted_checks:
        sample = draw_dgp(config.model_copy(update={"seed": seed}))
        runner = ExaminerIVPipeline(pipeline, seed=seed, n_jobs=n_jobs or 1)
        fit = runner.fit(sample.dataset)
        theta = fit.reports["debiased"].theta_hat
        if "affinity" in checks:
            results.append(affinity_check(sample.dataset, fit.nuisance, fit.riesz, theta, SCORES[score], seed=seed))
        if "interaction" in checks:
            results.append(interaction_term_check(sample, fit.nuisance, fit.riesz))
        if "boundedness" in checks:
            results.append(boundedness_check(sample.dataset, fit.nuisance, fit.riesz, theta))

    if "rate" in checks:
        scan = rate_product_scan(config, rate_n_grid, rate_replications, seed, pipeline, n_jobs=n_jobs)
        results.append(scan.to_result())

    for r in results:
        logging.info("%-40s %s (statistic %.3g, threshold %.3g)", r.name, "PASS" if r.passed else "FAIL", r.statistic, r.threshold)
    return results
