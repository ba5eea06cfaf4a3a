"""Automatic Riesz representers for the two propensity directions.

alpha1(X, Z) is the LASSO fit of the pseudo-outcome y - theta * t on b(X, Z); alpha2(X) is the
fit of -(y - theta * t) on b(X). theta is an initial estimate computed without the fold being
predicted nor one other fold, then averaged over that other fold.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np
from absl import logging
from joblib import Parallel, delayed

from .core import Dataset, DictionarySpec, FoldPlan, build_dictionary
from .errors import ParameterError, WeakIdentificationError
from .learners import LearnerConfig, LinearFit
from .nuisance import NuisanceFit, fit_out_of_fold, gamma_hat
from .settings import settings

ThetaPairs = dict[tuple[int, int], float]


@dataclass(frozen=True, eq=False)
class RieszFit:
    alpha1_hat: np.ndarray
    alpha2_hat: np.ndarray
    rho1: tuple[np.ndarray, ...]  # raw-scale dictionary coefficients, one vector per fold
    rho2: tuple[np.ndarray, ...]
    theta_tilde: ThetaPairs
    fold_theta: tuple[float, ...]
    fold_penalties: tuple[tuple[float, float], ...]
    fold_fits: tuple[tuple[LinearFit, LinearFit], ...] = ()

    @property
    def penalty1(self) -> float:
        """Largest alpha1 penalty over folds."""
        return max(p for p, _ in self.fold_penalties)

    @property
    def penalty2(self) -> float:
        return max(p for _, p in self.fold_penalties)


def _pair(l: int, m: int) -> tuple[int, int]:
    return (l, m) if l < m else (m, l)


def initial_theta_pairs(d: Dataset, plan: FoldPlan, nf: NuisanceFit) -> ThetaPairs:
    """theta_tilde[(l, m)] = sum(y * gamma) / sum(t * gamma) over rows outside folds l and m."""
    if plan.L < 3:
        raise ParameterError(f"nested initial estimates need L >= 3 folds, got {plan.L}")
    if nf.n != d.n:
        raise ParameterError(f"nuisance fit has {nf.n} rows, dataset has {d.n}")
    g = gamma_hat(nf)
    pairs: ThetaPairs = {}
    for l, m in combinations(range(plan.L), 2):
        rows = plan.complement_of_pair(l, m)
        denominator = float(np.mean(d.t[rows] * g[rows]))
        if abs(denominator) < settings.WEAK_ID_TOL:
            raise WeakIdentificationError(denominator, f"initial estimate for folds ({l}, {m})")
        pairs[(l, m)] = float(np.mean(d.y[rows] * g[rows])) / denominator
    return pairs


def fold_average_theta(theta_tilde: ThetaPairs, l: int, L: int) -> float:
    """Average of theta_tilde over the pairs (l, m), m != l."""
    try:
        values = [theta_tilde[_pair(l, m)] for m in range(L) if m != l]
    except KeyError as exc:
        raise ParameterError(f"theta_tilde is missing fold pair {exc.args[0]}") from exc
    return float(np.mean(values))


def fit_riesz(
    d: Dataset,
    plan: FoldPlan,
    spec1: DictionarySpec,
    spec2: DictionarySpec,
    theta_tilde: ThetaPairs,
    penalties: LearnerConfig | None = None,
    n_jobs: int = 1,
    seed: int | None = None,
) -> RieszFit:
    penalties = LearnerConfig() if penalties is None else penalties
    if spec1.excludes_examiner():
        raise ParameterError("the alpha1 dictionary must include examiner information")
    if not spec2.excludes_examiner():
        raise ParameterError("the alpha2 dictionary must not include examiner information")
    if plan.n != d.n:
        raise ParameterError(f"fold plan covers {plan.n} rows, dataset has {d.n}")
    seed = plan.seed if seed is None else seed
    fold_theta = tuple(fold_average_theta(theta_tilde, l, plan.L) for l in range(plan.L))

    b1 = build_dictionary(d, spec1)
    b2 = build_dictionary(d, spec2)

    def one_fold(l: int):
        test = plan.folds[l]
        train = plan.complement(l)
        pseudo = d.y - fold_theta[l] * d.t
        a1, pen1, fit1 = fit_out_of_fold(b1, pseudo, train, test, penalties, seed + l)
        a2, pen2, fit2 = fit_out_of_fold(b2, -pseudo, train, test, penalties, seed + l)
        return l, a1, a2, fit1, fit2

    results = Parallel(n_jobs=n_jobs)(delayed(one_fold)(l) for l in range(plan.L))

    alpha1 = np.empty(d.n)
    alpha2 = np.empty(d.n)
    fits: list = [None] * plan.L
    for l, a1, a2, fit1, fit2 in results:
        alpha1[plan.folds[l]] = a1
        alpha2[plan.folds[l]] = a2
        fits[l] = (fit1, fit2)
        logging.vlog(
            1,
            "riesz fold %d: theta %.4f, penalties %.4g / %.4g, nonzero %d / %d",
            l,
            fold_theta[l],
            fit1.penalty,
            fit2.penalty,
            int(np.count_nonzero(fit1.coefficients)),
            int(np.count_nonzero(fit2.coefficients)),
        )

    return RieszFit(
        alpha1_hat=alpha1,
        alpha2_hat=alpha2,
        rho1=tuple(f1.coefficients for f1, _ in fits),
        rho2=tuple(f2.coefficients for _, f2 in fits),
        theta_tilde=dict(theta_tilde),
        fold_theta=fold_theta,
        fold_penalties=tuple((f1.penalty, f2.penalty) for f1, f2 in fits),
        fold_fits=tuple(fits),
    )


def riesz_moment_residuals(
    d: Dataset,
    plan: FoldPlan,
    spec: DictionarySpec,
    rf: RieszFit,
    l: int,
    component: int = 1,
) -> np.ndarray:
    """Per-column (1/m) * sum((pseudo - alpha_fit) * b_j) over the training complement of fold l.

    Columns are the dictionary standardized on that complement, the scale the penalty acts on;
    for a LASSO fit every entry is bounded by the fold's penalty.
    """
    if component not in (1, 2):
        raise ParameterError(f"component must be 1 or 2, got {component}")
    train = plan.complement(l)
    design = build_dictionary(d, spec).restandardize(train).take(train)
    fit = rf.fold_fits[l][component - 1]
    pseudo = d.y[train] - rf.fold_theta[l] * d.t[train]
    if component == 2:
        pseudo = -pseudo
    resid = pseudo - (fit.intercept + design.raw_values() @ fit.coefficients)
    return np.where(design.constant, 0.0, design.values.T @ resid / train.shape[0])
