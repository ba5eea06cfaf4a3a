"""Debiased moment solve, sandwich inference and the baseline IV estimators."""

from __future__ import annotations

import json
from collections.abc import Callable
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
import pandas as pd
from absl import logging
from scipy import linalg
from scipy.stats import norm

from .core import Dataset
from .errors import JackknifeSingularityError, ParameterError, WeakIdentificationError
from .nuisance import NuisanceFit, gamma_hat
from .riesz import RieszFit
from .settings import settings

EstimatorName = Literal["debiased", "plugin", "oracle", "loo_jive", "ujive_linear"]
ESTIMATORS: tuple[str, ...] = ("debiased", "plugin", "oracle", "loo_jive", "ujive_linear")

_REPORT_KEYS = ("method", "theta_hat", "se", "ci_low", "ci_high", "q_hat", "n", "level")


@dataclass(frozen=True, eq=False)
class EstimateReport:
    """Point estimate, per-row score and normal-approximation inference for one estimator."""

    method: str
    theta_hat: float
    q_hat: float  # first-stage strength mean(t * instrument); V = mean(psi^2) / q_hat^2
    psi: np.ndarray  # per-row score at theta_hat (orthogonal for debiased, (y - theta t) * gamma otherwise)
    se: float  # sqrt(V / n)
    ci_low: float  # theta_hat -/+ z_{level} * se
    ci_high: float
    level: float
    n: int
    instrument: np.ndarray = field(repr=False, default=None)  # the gamma the ratio used
    z_stat: float = float("nan")  # (theta_hat - null_value) / se
    p_value: float = float("nan")  # two-sided
    null_value: float = 0.0
    first_stage_t: float = float("nan")  # q_hat over its own standard error
    v_hat: float = float("nan")  # asymptotic variance of sqrt(n) (theta_hat - theta)

    def to_dict(self, extended: bool = False) -> dict:
        """Flat record; `extended` adds the test statistics."""
        out = {key: getattr(self, key) for key in _REPORT_KEYS}
        out["n"] = int(out["n"])
        for key in ("theta_hat", "se", "ci_low", "ci_high", "q_hat", "level"):
            out[key] = float(out[key])
        if extended:
            out.update(
                z_stat=float(self.z_stat),
                p_value=float(self.p_value),
                null_value=float(self.null_value),
                first_stage_t=float(self.first_stage_t),
                v_hat=float(self.v_hat),
            )
        return out

    def to_json(self, extended: bool = False) -> str:
        return json.dumps(self.to_dict(extended), indent=2)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"i": np.arange(self.n), "instrument": self.instrument, "psi": self.psi})


def _check_lengths(**arrays) -> int:
    lengths = {name: np.shape(a)[0] for name, a in arrays.items()}
    if len(set(lengths.values())) != 1:
        raise ParameterError(f"length mismatch: {lengths}")
    return next(iter(lengths.values()))


def orthogonal_score(theta, y, t, gamma1, gamma2, alpha1, alpha2) -> np.ndarray:
    """psi_i = (y - theta t)(gamma1 - gamma2) + alpha1 (t - gamma1) + alpha2 (t - gamma2)."""
    return (y - theta * t) * (gamma1 - gamma2) + alpha1 * (t - gamma1) + alpha2 * (t - gamma2)


def identifying_score(theta, y, t, gamma1, gamma2, alpha1=None, alpha2=None) -> np.ndarray:
    """The uncorrected moment g_i = (y - theta t)(gamma1 - gamma2)."""
    return (y - theta * t) * (gamma1 - gamma2)


def debiased_psi_bar(theta: float, d: Dataset, nf: NuisanceFit, rf: RieszFit) -> float:
    _check_lengths(
        y=d.y, gamma1=nf.gamma1_hat, gamma2=nf.gamma2_hat, alpha1=rf.alpha1_hat, alpha2=rf.alpha2_hat
    )
    psi = orthogonal_score(
        theta, d.y, d.t, nf.gamma1_hat, nf.gamma2_hat, rf.alpha1_hat, rf.alpha2_hat
    )
    return float(np.mean(psi))


@dataclass(frozen=True)
class VarianceEstimate:
    q_hat: float
    v_hat: float
    se: float
    ci_low: float
    ci_high: float


def _q_hat(t: np.ndarray, instrument: np.ndarray, context: str) -> float:
    q = float(np.mean(t * instrument))
    if abs(q) < settings.WEAK_ID_TOL:
        raise WeakIdentificationError(q, context)
    return q


def estimate_variance(
    theta_hat: float,
    psi: np.ndarray,
    t: np.ndarray,
    instrument: np.ndarray,
    level: float,
    context: str = "variance",
) -> VarianceEstimate:
    """V = mean(psi^2) / Q^2 with Q = mean(t * instrument); se = sqrt(V / n)."""
    if not 0.0 < level < 1.0:
        raise ParameterError(f"level must lie in (0, 1), got {level}")
    n = _check_lengths(psi=psi, t=t, instrument=instrument)
    q = _q_hat(t, instrument, context)
    v = float(np.mean(psi**2)) / q**2
    se = float(np.sqrt(v / n))
    z = float(norm.ppf(0.5 + level / 2.0))
    return VarianceEstimate(q, v, se, theta_hat - z * se, theta_hat + z * se)


def _first_stage_t(t: np.ndarray, instrument: np.ndarray) -> float:
    terms = t * instrument
    sd = float(np.std(terms, ddof=1)) if terms.shape[0] > 1 else 0.0
    if sd == 0.0:
        return float("nan")
    return float(np.mean(terms) / (sd / np.sqrt(terms.shape[0])))


def _report(
    method: str,
    theta_hat: float,
    psi: np.ndarray,
    d: Dataset,
    instrument: np.ndarray,
    level: float,
    null_value: float,
) -> EstimateReport:
    var = estimate_variance(theta_hat, psi, d.t, instrument, level, method)
    if var.se > 0.0:
        z_stat = (theta_hat - null_value) / var.se
        p_value = float(2.0 * norm.sf(abs(z_stat)))
    else:
        z_stat, p_value = float("nan"), float("nan")
    logging.info("%s: theta_hat=%.6f se=%.6f q_hat=%.4g", method, theta_hat, var.se, var.q_hat)
    return EstimateReport(
        method=method,
        theta_hat=float(theta_hat),
        q_hat=var.q_hat,
        psi=psi,
        se=var.se,
        ci_low=var.ci_low,
        ci_high=var.ci_high,
        level=float(level),
        n=d.n,
        instrument=instrument,
        z_stat=float(z_stat),
        p_value=p_value,
        null_value=float(null_value),
        first_stage_t=_first_stage_t(d.t, instrument),
        v_hat=var.v_hat,
    )


def solve_theta_debiased(
    d: Dataset,
    nf: NuisanceFit,
    rf: RieszFit,
    level: float | None = None,
    null_value: float = 0.0,
) -> EstimateReport:
    """Closed-form root of the cross-fitted orthogonal moment, which is affine in theta."""
    level = settings.DEFAULT_LEVEL if level is None else level
    _check_lengths(
        y=d.y, gamma1=nf.gamma1_hat, gamma2=nf.gamma2_hat, alpha1=rf.alpha1_hat, alpha2=rf.alpha2_hat
    )
    g = gamma_hat(nf)
    q = _q_hat(d.t, g, "debiased")
    numerator = (
        np.mean(d.y * g)
        + np.mean(rf.alpha1_hat * (d.t - nf.gamma1_hat))
        + np.mean(rf.alpha2_hat * (d.t - nf.gamma2_hat))
    )
    theta_hat = float(numerator) / q
    psi = orthogonal_score(
        theta_hat, d.y, d.t, nf.gamma1_hat, nf.gamma2_hat, rf.alpha1_hat, rf.alpha2_hat
    )
    return _report("debiased", theta_hat, psi, d, g, level, null_value)


def _ratio_estimate(
    method: str, d: Dataset, instrument: np.ndarray, level: float | None, null_value: float
) -> EstimateReport:
    level = settings.DEFAULT_LEVEL if level is None else level
    instrument = np.asarray(instrument, dtype=float)
    _check_lengths(y=d.y, instrument=instrument)
    q = _q_hat(d.t, instrument, method)
    theta_hat = float(np.mean(d.y * instrument)) / q
    g = identifying_score(theta_hat, d.y, d.t, instrument, 0.0)
    return _report(method, theta_hat, g, d, instrument, level, null_value)


def estimate_plugin(
    d: Dataset, nf: NuisanceFit, level: float | None = None, null_value: float = 0.0
) -> EstimateReport:
    """IV ratio with the cross-fitted gamma plugged in, no correction terms."""
    return _ratio_estimate("plugin", d, gamma_hat(nf), level, null_value)


def estimate_oracle(
    d: Dataset, true_gamma, level: float | None = None, null_value: float = 0.0
) -> EstimateReport:
    """IV ratio with the true instrument (simulation only)."""
    return _ratio_estimate("oracle", d, np.asarray(true_gamma, dtype=float), level, null_value)


def leave_one_out_examiner_means(d: Dataset) -> np.ndarray:
    """Mean of t over the other cases of the same examiner."""
    codes = d.examiner_codes
    counts = np.bincount(codes, minlength=d.J)
    singles = d.examiner_labels[counts == 1]
    if singles.size:
        shown = ", ".join(str(s) for s in singles[:20])
        raise ParameterError(f"examiners with a single case: {shown}")
    sums = np.bincount(codes, weights=d.t, minlength=d.J)
    return (sums[codes] - d.t) / (counts[codes] - 1)


def estimate_loo_jive(d: Dataset, level: float | None = None, null_value: float = 0.0) -> EstimateReport:
    """Leave-one-out examiner leniency, centred, used as the instrument.

    Examiners with identical treatment rates leave only the mechanical own-case correlation
    in the instrument, so that case is reported as weak identification.
    """
    loo = leave_one_out_examiner_means(d)
    counts = np.bincount(d.examiner_codes, minlength=d.J)
    rates = np.bincount(d.examiner_codes, weights=d.t, minlength=d.J) / counts
    spread = float(np.var(rates))
    if spread < settings.WEAK_ID_TOL:
        raise WeakIdentificationError(spread, "loo_jive (examiner treatment rates have no spread)")
    return _ratio_estimate("loo_jive", d, loo - loo.mean(), level, null_value)


def _independent_columns(design: np.ndarray) -> np.ndarray:
    """A column subset spanning the same space (pivoted QR)."""
    _, r, piv = linalg.qr(design, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    tol = max(design.shape) * np.finfo(float).eps * (diag[0] if diag.size else 0.0)
    rank = int(np.sum(diag > tol))
    return design[:, np.sort(piv[:rank])]


def leave_one_out_fitted(design: np.ndarray, target: np.ndarray) -> np.ndarray:
    """OLS prediction for each row from the fit that excludes it: (yhat_i - h_i y_i) / (1 - h_i)."""
    basis = _independent_columns(design)
    q, _ = linalg.qr(basis, mode="economic")
    leverage = np.sum(q**2, axis=1)
    bad = np.flatnonzero(leverage >= 1.0 - 1e-10)
    if bad.size:
        raise JackknifeSingularityError(bad)
    fitted = q @ (q.T @ target)
    return (fitted - leverage * target) / (1.0 - leverage)


def _one_hot(codes: np.ndarray, k: int) -> np.ndarray:
    return (codes[:, None] == np.arange(k)[None, :]).astype(float)


def estimate_ujive_linear(
    d: Dataset, level: float | None = None, null_value: float = 0.0
) -> EstimateReport:
    """Jackknife-residualized leniency.

    gamma_i = LOO fit of t on (examiner dummies, W) minus LOO fit of t on W, where W holds the
    covariates plus stratum dummies (or an intercept when there is no stratum).
    """
    n = d.n
    controls = [d.x]
    if d.stratum is not None:
        controls.append(_one_hot(d.stratum_codes, d.stratum_labels.shape[0]))
    else:
        controls.append(np.ones((n, 1)))
    w = np.column_stack(controls)
    full = np.column_stack([_one_hot(d.examiner_codes, d.J), w])
    instrument = leave_one_out_fitted(full, d.t) - leave_one_out_fitted(w, d.t)
    return _ratio_estimate("ujive_linear", d, instrument, level, null_value)


def bisection_root(
    f: Callable[[float], float],
    lo: float,
    hi: float,
    tol: float = 1e-14,
    max_iter: int = 500,
) -> float:
    """Root of a continuous f on [lo, hi]; the bracket is widened until the signs differ."""
    f_lo, f_hi = f(lo), f(hi)
    widen = 0
    while f_lo * f_hi > 0.0:
        if widen >= 60:
            raise ParameterError("bisection bracket does not contain a sign change")
        width = hi - lo
        lo, hi = lo - width, hi + width
        f_lo, f_hi = f(lo), f(hi)
        widen += 1
    if f_lo == 0.0:
        return lo
    if f_hi == 0.0:
        return hi
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        f_mid = f(mid)
        if f_mid == 0.0 or (hi - lo) < tol * max(1.0, abs(mid)):
            return mid
        if f_lo * f_mid < 0.0:
            hi, f_hi = mid, f_mid
        else:
            lo, f_lo = mid, f_mid
    return 0.5 * (lo + hi)
