"""Regularized linear learners used for the nuisance regressions and the Riesz representers.

All penalized fits share one loss normalization,

    (1/(2m)) * ||target - intercept - B rho||^2 + penalty(rho),

with an unpenalized intercept and columns that are constant on the fitting rows left out
(their coefficient is 0 and their level is absorbed by the intercept). The fit works on the
values stored in the DesignMatrix (standardized or not); coefficients are reported on the
raw scale so `predict_linear` can be applied to any DesignMatrix with the same columns.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Protocol, runtime_checkable

import numpy as np
from absl import logging
from pydantic import BaseModel, ConfigDict, Field
from scipy import linalg

from .core import DesignMatrix, make_folds
from .errors import ConvergenceError, ParameterError, SingularityError
from .settings import settings

Method = Literal["ols", "ridge", "lasso"]

_FALLBACK_RIDGE_PENALTY = 1e-6


@dataclass(frozen=True, eq=False)
class LinearFit:
    """Linear model on the raw scale of the dictionary columns."""

    coefficients: np.ndarray
    intercept: float
    penalty: float
    method: Method
    column_names: tuple[str, ...] = ()
    working_coefficients: np.ndarray | None = None  # on the DesignMatrix's stored scale
    n_sweeps: int = 0
    objective_path: tuple[float, ...] = field(default=())


@dataclass(frozen=True)
class _Problem:
    """Centred least-squares problem over the columns that vary on the fitting rows."""

    free: np.ndarray  # bool mask of non-constant columns
    x_mean: np.ndarray
    y_mean: float
    xc: np.ndarray
    yc: np.ndarray

    @property
    def m(self) -> int:
        return int(self.yc.shape[0])


def _check_inputs(B: DesignMatrix, target) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(target, dtype=float).reshape(-1)
    if y.shape[0] != B.n_rows:
        raise ParameterError(f"target has {y.shape[0]} rows, design has {B.n_rows}")
    if y.shape[0] == 0:
        raise ParameterError("cannot fit on zero rows")
    if not np.all(np.isfinite(y)) or not np.all(np.isfinite(B.values)):
        raise ParameterError("non-finite values in design or target")
    return B.values, y


def _centred(B: DesignMatrix, target) -> _Problem:
    x, y = _check_inputs(B, target)
    free = np.ptp(x, axis=0) > 0.0
    xf = x[:, free]
    x_mean = xf.mean(axis=0)
    y_mean = float(y.mean())
    return _Problem(free, x_mean, y_mean, xf - x_mean, y - y_mean)


def _to_linear_fit(
    B: DesignMatrix,
    problem_free: np.ndarray,
    beta_free: np.ndarray,
    intercept_w: float,
    penalty: float,
    method: Method,
    **extra,
) -> LinearFit:
    working = np.zeros(B.n_columns)
    working[problem_free] = beta_free
    if B.standardized:
        raw = working / B.column_scales
        intercept = intercept_w - float(np.dot(B.column_means, raw))
    else:
        raw = working.copy()
        intercept = intercept_w
    return LinearFit(
        coefficients=raw,
        intercept=float(intercept),
        penalty=float(penalty),
        method=method,
        column_names=B.column_names,
        working_coefficients=working,
        **extra,
    )


def _spans_constant(x: np.ndarray) -> bool:
    ones = np.ones(x.shape[0])
    coef, *_ = np.linalg.lstsq(x, ones, rcond=None)
    return bool(np.linalg.norm(x @ coef - ones) <= 1e-8 * np.sqrt(x.shape[0]))


def _dependent_columns(design: np.ndarray) -> np.ndarray:
    """Indices that pivoted QR pushes past the numerical rank."""
    if design.shape[1] == 0:
        return np.zeros(0, dtype=int)
    _, r, piv = linalg.qr(design, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    tol = max(design.shape) * np.finfo(float).eps * (diag[0] if diag.size else 0.0)
    rank = int(np.sum(diag > tol))
    if design.shape[0] < design.shape[1]:
        rank = min(rank, design.shape[0])
    return np.sort(piv[rank:])


def fit_ols(B: DesignMatrix, target, ridge_fallback: bool = False) -> LinearFit:
    """Least squares of `target` on the columns of B.

    An intercept is added unless the varying columns already span the constant (a full
    set of examiner dummies), in which case the intercept is 0.
    """
    x, y = _check_inputs(B, target)
    free = np.ptp(x, axis=0) > 0.0
    xf = x[:, free]
    names = [name for name, keep in zip(B.column_names, free) if keep]
    with_intercept = xf.shape[1] == 0 or not _spans_constant(xf)
    if with_intercept:
        design = np.column_stack([np.ones(x.shape[0]), xf])
        names = ["(intercept)", *names]
    else:
        design = xf

    dependent = _dependent_columns(design)
    if dependent.size:
        if ridge_fallback:
            logging.warning("rank-deficient OLS design, falling back to ridge")
            return fit_ridge(B, y, _FALLBACK_RIDGE_PENALTY)
        raise SingularityError("rank-deficient design", [names[k] for k in dependent])

    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    if with_intercept:
        intercept_w, beta = float(coef[0]), coef[1:]
    else:
        intercept_w, beta = 0.0, coef
    return _to_linear_fit(B, free, beta, intercept_w, 0.0, "ols")


def fit_ridge(B: DesignMatrix, target, lam: float) -> LinearFit:
    """Minimize (1/(2m))||target - b0 - B rho||^2 + (lam/2)||rho||^2 over the varying columns."""
    if not lam > 0.0:
        raise ParameterError(f"ridge penalty must be positive, got {lam}")
    prob = _centred(B, target)
    gram = prob.xc.T @ prob.xc / prob.m
    rhs = prob.xc.T @ prob.yc / prob.m
    if gram.size:
        beta = linalg.solve(gram + lam * np.eye(gram.shape[0]), rhs, assume_a="pos")
    else:
        beta = np.zeros(0)
    intercept_w = prob.y_mean - float(prob.x_mean @ beta)
    return _to_linear_fit(B, prob.free, beta, intercept_w, lam, "ridge")


def _soft_threshold(value: float, threshold: float) -> float:
    if value > threshold:
        return value - threshold
    if value < -threshold:
        return value + threshold
    return 0.0


def _coordinate_descent(
    gram: np.ndarray,
    corr: np.ndarray,
    r: float,
    beta: np.ndarray,
    tol: float,
    max_sweeps: int,
    base: float,
) -> tuple[np.ndarray, int, list[float]]:
    """Cyclic coordinate descent with covariance updates; full pass, then active-set sweeps."""
    p = corr.shape[0]
    diag = np.diag(gram).copy()
    g_beta = gram @ beta
    objectives: list[float] = []
    sweeps = 0
    full_pass = True
    gap = np.inf

    while sweeps < max_sweeps:
        coords = range(p) if full_pass else np.flatnonzero(beta)
        gap = 0.0
        for j in coords:
            old = beta[j]
            grad = corr[j] - g_beta[j] + diag[j] * old
            new = _soft_threshold(grad, r) / diag[j]
            if new != old:
                delta = new - old
                beta[j] = new
                g_beta += gram[:, j] * delta
                gap = max(gap, abs(delta))
        sweeps += 1
        objectives.append(base - corr @ beta + 0.5 * beta @ g_beta + r * np.abs(beta).sum())
        if gap < tol:
            if full_pass:
                return beta, sweeps, objectives
            full_pass = True  # active set settled; confirm with a full pass
        else:
            full_pass = False

    raise ConvergenceError(
        f"coordinate descent did not converge in {max_sweeps} sweeps", beta.copy(), gap
    )


def fit_lasso(
    B: DesignMatrix,
    target,
    r: float,
    init: np.ndarray | None = None,
    tol: float | None = None,
    max_sweeps: int | None = None,
) -> LinearFit:
    """Minimize (1/(2m))||target - b0 - B rho||^2 + r * ||rho||_1 by coordinate descent.

    Converged when the largest coefficient change in a full sweep is below `tol`.
    `init` warm-starts from working-scale coefficients (length B.n_columns).
    """
    if not r >= 0.0:
        raise ParameterError(f"lasso penalty must be nonnegative, got {r}")
    tol = settings.LASSO_TOL if tol is None else tol
    max_sweeps = settings.LASSO_MAX_SWEEPS if max_sweeps is None else max_sweeps
    prob = _centred(B, target)
    gram = prob.xc.T @ prob.xc / prob.m
    corr = prob.xc.T @ prob.yc / prob.m
    beta = np.zeros(corr.shape[0]) if init is None else np.asarray(init, dtype=float)[prob.free].copy()

    if corr.shape[0]:
        beta, sweeps, objectives = _coordinate_descent(
            gram, corr, r, beta, tol, max_sweeps, float(prob.yc @ prob.yc) / (2 * prob.m)
        )
    else:
        sweeps, objectives = 0, []
    intercept_w = prob.y_mean - float(prob.x_mean @ beta)
    return _to_linear_fit(
        B,
        prob.free,
        beta,
        intercept_w,
        r,
        "lasso",
        n_sweeps=sweeps,
        objective_path=tuple(objectives),
    )


def lambda_max(B: DesignMatrix, target) -> float:
    """Smallest penalty at which every penalized LASSO coefficient is zero."""
    prob = _centred(B, target)
    if prob.xc.shape[1] == 0:
        return 0.0
    return float(np.max(np.abs(prob.xc.T @ prob.yc)) / prob.m)


def penalty_grid(B: DesignMatrix, target, size: int | None = None, ratio: float | None = None) -> np.ndarray:
    """Log-spaced penalties from lambda_max down to ratio * lambda_max (descending)."""
    size = settings.PENALTY_GRID_SIZE if size is None else size
    ratio = settings.PENALTY_GRID_RATIO if ratio is None else ratio
    top = max(lambda_max(B, target), 1e-12)
    return np.geomspace(top, ratio * top, size)


def lasso_path(B: DesignMatrix, target, grid) -> list[LinearFit]:
    """LASSO fits along `grid` (any order), warm-started from the largest penalty down."""
    grid = np.asarray(grid, dtype=float)
    fits: dict[int, LinearFit] = {}
    init = None
    for k in np.argsort(-grid, kind="stable"):
        fit = fit_lasso(B, target, float(grid[k]), init=init)
        init = fit.working_coefficients
        fits[int(k)] = fit
    return [fits[k] for k in range(grid.shape[0])]


def lasso_kkt_residuals(fit: LinearFit, B: DesignMatrix, target) -> np.ndarray:
    """Per-column KKT slack on the fitting rows (0 where the conditions hold exactly)."""
    x, y = _check_inputs(B, target)
    resid = y - predict_linear(fit, B)
    grad = x.T @ resid / x.shape[0]
    rho = fit.working_coefficients
    free = np.ptp(x, axis=0) > 0.0
    slack = np.where(
        rho != 0.0,
        np.abs(grad - fit.penalty * np.sign(rho)),
        np.maximum(np.abs(grad) - fit.penalty, 0.0),
    )
    return np.where(free, slack, 0.0)


def predict_linear(fit: LinearFit, B: DesignMatrix) -> np.ndarray:
    """intercept + raw(B) @ coefficients."""
    if B.n_columns != fit.coefficients.shape[0]:
        raise ParameterError(
            f"design has {B.n_columns} columns, fit expects {fit.coefficients.shape[0]}"
        )
    return fit.intercept + B.raw_values() @ fit.coefficients


def _fit_method(method: Method, B: DesignMatrix, target, penalty: float) -> LinearFit:
    if method == "lasso":
        return fit_lasso(B, target, penalty)
    if method == "ridge":
        return fit_ridge(B, target, penalty)
    return fit_ols(B, target)


def select_penalty_cv(
    B: DesignMatrix,
    target,
    grid,
    K: int,
    seed: int,
    method: Method = "lasso",
) -> float:
    """Grid value with the smallest pooled K-fold out-of-fold MSE; ties go to the larger penalty."""
    grid = np.asarray(list(grid), dtype=float)
    if grid.size == 0:
        raise ParameterError("penalty grid is empty")
    if np.any(grid <= 0.0) and method == "ridge":
        raise ParameterError("ridge penalties must be positive")
    if K < 2:
        raise ParameterError(f"cross-validation needs K >= 2, got {K}")
    y = np.asarray(target, dtype=float).reshape(-1)
    if grid.size == 1:
        return float(grid[0])

    plan = make_folds(B.n_rows, K, seed)
    order = np.argsort(-grid, kind="stable")
    sse = np.zeros(grid.size)
    for l in range(plan.L):
        test = plan.folds[l]
        train = plan.complement(l)
        b_train, b_test = B.take(train), B.take(test)
        if method == "lasso":
            fits = lasso_path(b_train, y[train], grid)
        else:
            fits = [_fit_method(method, b_train, y[train], float(lam)) for lam in grid]
        for k, fit in enumerate(fits):
            err = y[test] - predict_linear(fit, b_test)
            sse[k] += float(err @ err)

    mse = sse / B.n_rows
    best_k, best = int(order[0]), np.inf
    for k in order:
        if mse[k] < best:
            best_k, best = int(k), mse[k]
    logging.vlog(1, "cv(%s) picked penalty %.4g (mse %.4g)", method, grid[best_k], best)
    return float(grid[best_k])


@runtime_checkable
class Learner(Protocol):
    """Anything that maps (design, target) to a fitted linear predictor."""

    def fit(self, B: DesignMatrix, target) -> LinearFit: ...


class LearnerConfig(BaseModel):
    """How to fit one regression: method, penalty (fixed or cross-validated) and grid."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    method: Method = "lasso"
    penalty: float | Literal["cv"] = "cv"
    penalty_scale: float = Field(1.0, gt=0.0)
    cv_folds: int = Field(default_factory=lambda: settings.CV_FOLDS, ge=2)
    grid_size: int = Field(default_factory=lambda: settings.PENALTY_GRID_SIZE, ge=1)
    grid_ratio: float = Field(default_factory=lambda: settings.PENALTY_GRID_RATIO, gt=0.0, lt=1.0)
    ridge_fallback: bool = False

    def build(self, seed: int = 0) -> Learner:
        return RegularizedLinearLearner(self, seed)


class RegularizedLinearLearner:
    """OLS / ridge / LASSO learner driven by a LearnerConfig."""

    def __init__(self, config: LearnerConfig, seed: int = 0):
        self.config = config
        self.seed = seed

    def choose_penalty(self, B: DesignMatrix, target) -> float:
        cfg = self.config
        if cfg.method == "ols":
            return 0.0
        if cfg.penalty != "cv":
            return float(cfg.penalty) * cfg.penalty_scale
        grid = penalty_grid(B, target, cfg.grid_size, cfg.grid_ratio)
        folds = min(cfg.cv_folds, B.n_rows)
        chosen = select_penalty_cv(B, target, grid, folds, self.seed, cfg.method)
        return chosen * cfg.penalty_scale

    def fit(self, B: DesignMatrix, target) -> LinearFit:
        if self.config.method == "ols":
            return fit_ols(B, target, ridge_fallback=self.config.ridge_fallback)
        return _fit_method(self.config.method, B, target, self.choose_penalty(B, target))
