"""Cross-fitted estimation of gamma1 = E[T|X,Z] and gamma2 = E[T|X]."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from absl import logging
from joblib import Parallel, delayed

from .core import Dataset, DesignMatrix, DictionarySpec, FoldPlan, build_dictionary
from .errors import ParameterError
from .learners import LearnerConfig, predict_linear


@dataclass(frozen=True, eq=False)
class NuisanceFit:
    """Out-of-fold propensity predictions; row i comes from a model that never saw fold_of[i]."""

    gamma1_hat: np.ndarray
    gamma2_hat: np.ndarray
    fold_of: np.ndarray
    learner_tag: str
    clip_eps: float = 0.0
    clipped_count: int = 0
    fold_penalties: tuple[tuple[float, float], ...] = ()

    @property
    def n(self) -> int:
        return int(self.gamma1_hat.shape[0])


def _fold_design(B: DesignMatrix, train: np.ndarray, learner: LearnerConfig) -> DesignMatrix:
    # penalties are only comparable across columns after standardizing on the training rows
    return B if learner.method == "ols" else B.restandardize(train)


def fit_out_of_fold(
    B: DesignMatrix,
    target: np.ndarray,
    train: np.ndarray,
    test: np.ndarray,
    learner: LearnerConfig,
    seed: int,
) -> tuple[np.ndarray, float, object]:
    """Fit on `train`, predict `test`. Returns (predictions, penalty, fit)."""
    design = _fold_design(B, train, learner)
    fit = learner.build(seed).fit(design.take(train), target[train])
    return predict_linear(fit, design.take(test)), fit.penalty, fit


def _check_specs(spec1: DictionarySpec, spec2: DictionarySpec) -> None:
    if spec1.excludes_examiner():
        raise ParameterError("the E[T|X,Z] dictionary must include examiner information")
    if not spec2.excludes_examiner():
        raise ParameterError("the E[T|X] dictionary must not include examiner information")


def crossfit_gamma(
    d: Dataset,
    plan: FoldPlan,
    spec1: DictionarySpec,
    spec2: DictionarySpec,
    learner: LearnerConfig,
    n_jobs: int = 1,
    seed: int | None = None,
) -> NuisanceFit:
    """For each fold, fit gamma1 on b(X,Z) and gamma2 on b(X) using the other folds, predict the fold."""
    _check_specs(spec1, spec2)
    if plan.n != d.n:
        raise ParameterError(f"fold plan covers {plan.n} rows, dataset has {d.n}")
    if any(f.size == 0 for f in plan.folds):
        raise ParameterError("fold plan contains an empty fold")
    seed = plan.seed if seed is None else seed

    b1 = build_dictionary(d, spec1)
    b2 = build_dictionary(d, spec2)
    t = d.t

    def one_fold(l: int):
        test = plan.folds[l]
        train = plan.complement(l)
        g1, pen1, _ = fit_out_of_fold(b1, t, train, test, learner, seed + l)
        g2, pen2, _ = fit_out_of_fold(b2, t, train, test, learner, seed + l)
        return l, g1, g2, (pen1, pen2)

    results = Parallel(n_jobs=n_jobs)(delayed(one_fold)(l) for l in range(plan.L))

    gamma1 = np.empty(d.n)
    gamma2 = np.empty(d.n)
    penalties = [None] * plan.L
    for l, g1, g2, pens in results:
        gamma1[plan.folds[l]] = g1
        gamma2[plan.folds[l]] = g2
        penalties[l] = pens
        logging.vlog(1, "nuisance fold %d: penalties %.4g / %.4g", l, *pens)

    return NuisanceFit(
        gamma1_hat=gamma1,
        gamma2_hat=gamma2,
        fold_of=plan.fold_of(),
        learner_tag=learner.method,
        fold_penalties=tuple(penalties),
    )


def clip_propensities(fit: NuisanceFit, eps: float) -> NuisanceFit:
    """Clamp both propensity vectors to [eps, 1 - eps]."""
    if not 0.0 <= eps < 0.5:
        raise ParameterError(f"clip eps must lie in [0, 0.5), got {eps}")
    g1 = np.clip(fit.gamma1_hat, eps, 1.0 - eps)
    g2 = np.clip(fit.gamma2_hat, eps, 1.0 - eps)
    clipped = int(np.sum(g1 != fit.gamma1_hat) + np.sum(g2 != fit.gamma2_hat))
    if clipped:
        logging.info("clipped %d propensity predictions to [%g, %g]", clipped, eps, 1.0 - eps)
    return replace(fit, gamma1_hat=g1, gamma2_hat=g2, clip_eps=float(eps), clipped_count=clipped)


def gamma_hat(fit: NuisanceFit) -> np.ndarray:
    """gamma1_hat - gamma2_hat."""
    return fit.gamma1_hat - fit.gamma2_hat


def gamma_rmse(fit: NuisanceFit, gamma1_true, gamma2_true) -> tuple[float, float]:
    """Root mean squared error of each propensity against its oracle."""
    e1 = np.sqrt(np.mean((fit.gamma1_hat - np.asarray(gamma1_true)) ** 2))
    e2 = np.sqrt(np.mean((fit.gamma2_hat - np.asarray(gamma2_true)) ** 2))
    return float(e1), float(e2)
