"""End-to-end estimation: folds, cross-fitted propensities, Riesz representers, moment solve."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from absl import logging
from pydantic import BaseModel, ConfigDict, Field

from .core import Dataset, DictionarySpec, FoldPlan, make_folds
from .errors import ParameterError
from .estimator import (
    ESTIMATORS,
    EstimateReport,
    estimate_loo_jive,
    estimate_oracle,
    estimate_plugin,
    estimate_ujive_linear,
    orthogonal_score,
    solve_theta_debiased,
)
from .learners import LearnerConfig
from .nuisance import NuisanceFit, clip_propensities, crossfit_gamma
from .riesz import RieszFit, fit_riesz, initial_theta_pairs
from .settings import settings


class PipelineConfig(BaseModel):
    """Everything the pipeline needs besides the data and the seed."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    folds: int = Field(default_factory=lambda: settings.DEFAULT_FOLDS, ge=2)
    learner: LearnerConfig = LearnerConfig()
    riesz: LearnerConfig = LearnerConfig()
    # None: examiner dummies + covariates (+ stratum dummies when the data has strata)
    dictionary: DictionarySpec | None = None
    clip_eps: float = Field(default_factory=lambda: settings.CLIP_EPS, ge=0.0, lt=0.5)
    level: float = Field(default_factory=lambda: settings.DEFAULT_LEVEL, gt=0.0, lt=1.0)


def default_dictionaries(d: Dataset, spec: DictionarySpec | None = None) -> tuple[DictionarySpec, DictionarySpec]:
    """(b(X,Z), b(X)) specs; the second is the first with every examiner column removed."""
    if spec is None:
        spec = DictionarySpec(
            include_examiner_dummies=True,
            include_stratum_dummies=d.stratum is not None,
            include_covariates=d.p > 0,
            include_intercept=d.p == 0 and d.stratum is None,
        )
    elif spec.include_stratum_dummies and d.stratum is None:
        spec = spec.model_copy(update={"include_stratum_dummies": False})
    spec2 = spec.without_examiner()
    if not (spec2.include_covariates and d.p) and not (spec2.include_stratum_dummies and d.stratum is not None):
        # nothing left to condition on: E[T|X] reduces to a constant
        spec2 = spec2.model_copy(update={"include_intercept": True})
    return spec, spec2


@dataclass(frozen=True, eq=False)
class PipelineResult:
    """Every intermediate fit of one run, kept for diagnostics and the per-row table."""

    dataset: Dataset
    plan: FoldPlan
    nuisance: NuisanceFit | None = None  # clipped cross-fitted propensities; None when no method needs them
    riesz: RieszFit | None = None  # only fitted for the debiased estimator
    reports: dict[str, EstimateReport] = field(default_factory=dict)  # keyed by method, in request order

    def observation_frame(self) -> pd.DataFrame:
        """Per-observation table: i, fold, gamma1_hat, gamma2_hat, alpha1_hat, alpha2_hat, psi."""
        if self.nuisance is None:
            raise ParameterError("no cross-fitted nuisances to tabulate")
        nan = np.full(self.dataset.n, np.nan)
        alpha1 = self.riesz.alpha1_hat if self.riesz is not None else nan
        alpha2 = self.riesz.alpha2_hat if self.riesz is not None else nan
        report = self.reports.get("debiased")
        psi = report.psi if report is not None else nan
        return pd.DataFrame(
            {
                "i": np.arange(self.dataset.n),
                "fold": self.plan.fold_of(),
                "gamma1_hat": self.nuisance.gamma1_hat,
                "gamma2_hat": self.nuisance.gamma2_hat,
                "alpha1_hat": alpha1,
                "alpha2_hat": alpha2,
                "psi": psi,
            }
        )


class ExaminerIVPipeline:
    """make_folds -> crossfit_gamma -> clip -> initial_theta_pairs -> fit_riesz -> solve."""

    def __init__(self, config: PipelineConfig | None = None, seed: int = 0, n_jobs: int = 1):
        self.config = PipelineConfig() if config is None else config
        self.seed = seed
        self.n_jobs = n_jobs

    def make_plan(self, d: Dataset) -> FoldPlan:
        return make_folds(d.n, self.config.folds, self.seed)

    def fit_nuisance(self, d: Dataset, plan: FoldPlan) -> NuisanceFit:
        spec1, spec2 = default_dictionaries(d, self.config.dictionary)
        nf = crossfit_gamma(d, plan, spec1, spec2, self.config.learner, self.n_jobs, self.seed)
        return clip_propensities(nf, self.config.clip_eps)

    def fit_riesz(self, d: Dataset, plan: FoldPlan, nf: NuisanceFit) -> RieszFit:
        spec1, spec2 = default_dictionaries(d, self.config.dictionary)
        theta_tilde = initial_theta_pairs(d, plan, nf)
        return fit_riesz(d, plan, spec1, spec2, theta_tilde, self.config.riesz, self.n_jobs, self.seed)

    def fit(self, d: Dataset, plan: FoldPlan | None = None) -> PipelineResult:
        """Debiased estimate with its fitted nuisances."""
        return self.estimate(d, ("debiased",), plan=plan)

    def estimate(
        self,
        d: Dataset,
        methods=("debiased",),
        true_gamma=None,
        plan: FoldPlan | None = None,
    ) -> PipelineResult:
        unknown = [m for m in methods if m not in ESTIMATORS]
        if unknown:
            raise ParameterError(f"unknown estimator(s): {', '.join(unknown)}")
        if "oracle" in methods and true_gamma is None:
            raise ParameterError("the oracle estimator needs the true instrument")
        plan = self.make_plan(d) if plan is None else plan
        level = self.config.level

        nf = rf = None
        if "debiased" in methods or "plugin" in methods:
            nf = self.fit_nuisance(d, plan)
        if "debiased" in methods:
            rf = self.fit_riesz(d, plan, nf)

        reports: dict[str, EstimateReport] = {}
        for method in methods:
            if method == "debiased":
                reports[method] = solve_theta_debiased(d, nf, rf, level)
            elif method == "plugin":
                reports[method] = estimate_plugin(d, nf, level)
            elif method == "oracle":
                reports[method] = estimate_oracle(d, true_gamma, level)
            elif method == "loo_jive":
                reports[method] = estimate_loo_jive(d, level)
            else:
                reports[method] = estimate_ujive_linear(d, level)
        logging.vlog(1, "pipeline finished %s on n=%d", list(reports), d.n)
        return PipelineResult(d, plan, nf, rf, reports)


def psi_at(result: PipelineResult, theta: float) -> np.ndarray:
    """Orthogonal score of a fitted pipeline evaluated at an arbitrary theta."""
    if result.nuisance is None or result.riesz is None:
        raise ParameterError("pipeline result has no Riesz fit")
    nf, rf, d = result.nuisance, result.riesz, result.dataset
    return orthogonal_score(theta, d.y, d.t, nf.gamma1_hat, nf.gamma2_hat, rf.alpha1_hat, rf.alpha2_hat)
