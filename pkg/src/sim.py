"""Synthetic examiner design with closed-form oracles, and the Monte Carlo harness.

Cases are split uniformly over S strata; within a stratum the case goes to one of J/S examiners
uniformly at random. A binary confounder u shifts both the treatment index and the outcome:

    t ~ Bernoulli(sigmoid(a_z + x'beta_t + kappa u))
    y = theta0 t + x'beta_y + lambda_conf u + noise_sd eps
"""

from __future__ import annotations

import json
from collections.abc import Iterable, Sequence
from dataclasses import asdict, dataclass

import numpy as np
import pandas as pd
from absl import logging
from joblib import Parallel, delayed
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from scipy.special import expit

from .core import Dataset
from .errors import ExaminerIVError, ParameterError
from .estimator import (
    ESTIMATORS,
    estimate_loo_jive,
    estimate_oracle,
    estimate_plugin,
    estimate_ujive_linear,
    solve_theta_debiased,
)
from .pipeline import ExaminerIVPipeline, PipelineConfig


class DgpConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    n: int = Field(2000, gt=0)
    J: int = Field(40, ge=2)
    S: int = Field(4, ge=1)
    p: int = Field(60, ge=0)
    s_sparse: int = Field(5, ge=0)
    theta0: float = 0.5
    kappa: float = 1.0
    lambda_conf: float = 1.0
    judge_effect_spread: float = 1.0
    noise_sd: float = Field(1.0, gt=0.0)
    seed: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _consistent(self):
        if self.J % self.S:
            raise ValueError(f"J={self.J} must be divisible by S={self.S}")
        if self.s_sparse > self.p:
            raise ValueError(f"s_sparse={self.s_sparse} exceeds p={self.p}")
        return self

    @property
    def examiners_per_stratum(self) -> int:
        return self.J // self.S

    def stratum_effects(self) -> np.ndarray:
        """Judge effects within one stratum (the same grid in every stratum)."""
        m = self.examiners_per_stratum
        if m == 1:
            return np.zeros(1)
        return np.linspace(-self.judge_effect_spread, self.judge_effect_spread, m)

    def judge_effects(self) -> np.ndarray:
        """Effect a_j for examiner j = 1..J (index j-1); examiner j sits in stratum (j-1)//(J/S)+1."""
        return np.tile(self.stratum_effects(), self.S)

    def beta_t(self) -> np.ndarray:
        beta = np.zeros(self.p)
        beta[: self.s_sparse] = 0.5
        return beta

    def beta_y(self) -> np.ndarray:
        beta = np.zeros(self.p)
        beta[: self.s_sparse] = 1.0
        return beta


def make_dgp_config(**values) -> DgpConfig:
    """DgpConfig(**values) with validation failures raised as ParameterError."""
    try:
        return DgpConfig(**values)
    except ValidationError as exc:
        raise ParameterError(f"invalid simulation config: {exc}") from exc


@dataclass(frozen=True, eq=False)
class DgpDraw:
    dataset: Dataset
    gamma1_true: np.ndarray
    gamma2_true: np.ndarray
    gamma_true: np.ndarray
    alpha1_true: np.ndarray
    alpha2_true: np.ndarray
    theta0: float
    config: DgpConfig | None = None


def _marginal_propensity(index: np.ndarray, kappa: float) -> np.ndarray:
    # u is +1 or -1 with equal probability
    return 0.5 * (expit(index + kappa) + expit(index - kappa))


def oracle_gamma(config: DgpConfig, x, z, stratum) -> tuple:
    """(E[T|X,Z], E[T|X,stratum]) for one row or a matrix of rows; z and stratum are 1-based."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    z = np.atleast_1d(np.asarray(z, dtype=int))
    stratum = np.atleast_1d(np.asarray(stratum, dtype=int))
    if x.shape[1] != config.p:
        raise ParameterError(f"x has {x.shape[1]} covariates, config has p={config.p}")

    base = x @ config.beta_t() if config.p else np.zeros(x.shape[0])
    effects = config.judge_effects()
    gamma1 = _marginal_propensity(effects[z - 1] + base, config.kappa)
    # averaging over the stratum's examiners; the effect grid is the same in every stratum
    m = config.examiners_per_stratum
    grid = effects.reshape(config.S, m)[stratum - 1]
    gamma2 = _marginal_propensity(grid + base[:, None], config.kappa).mean(axis=1)
    if single:
        return float(gamma1[0]), float(gamma2[0])
    return gamma1, gamma2


def oracle_alpha(config: DgpConfig, x, theta0: float | None = None, z=None, stratum=None) -> tuple:
    """Riesz representers (E[Y - theta T | X, Z], -E[Y - theta T | X]).

    At the true effect both are +-x'beta_y. Away from it the gap (theta0 - theta) times the
    propensity enters, which needs z and stratum.
    """
    theta0 = config.theta0 if theta0 is None else theta0
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    alpha1 = x @ config.beta_y() if config.p else np.zeros(x.shape[0])
    alpha2 = -alpha1
    shift = config.theta0 - theta0
    if shift != 0.0:
        if z is None or stratum is None:
            raise ParameterError("alpha away from the true effect needs z and stratum")
        g1, g2 = oracle_gamma(config, x, np.atleast_1d(z), np.atleast_1d(stratum))
        alpha1 = alpha1 + shift * g1
        alpha2 = alpha2 - shift * g2
    if single:
        return float(alpha1[0]), float(alpha2[0])
    return alpha1, alpha2


def draw_dgp(config: DgpConfig, rng: np.random.Generator | None = None) -> DgpDraw:
    """One sample of size config.n; `rng` defaults to a generator seeded with config.seed."""
    if not isinstance(config, DgpConfig):
        raise ParameterError("draw_dgp needs a DgpConfig")
    rng = np.random.default_rng(config.seed) if rng is None else rng
    n, m = config.n, config.examiners_per_stratum

    x = rng.standard_normal((n, config.p))
    stratum = rng.integers(1, config.S + 1, size=n)
    z = (stratum - 1) * m + rng.integers(0, m, size=n) + 1
    u = 2.0 * rng.integers(0, 2, size=n) - 1.0
    index = config.judge_effects()[z - 1] + (x @ config.beta_t() if config.p else 0.0)
    t = (rng.random(n) < expit(index + config.kappa * u)).astype(float)
    eps = rng.standard_normal(n)
    y = (
        config.theta0 * t
        + (x @ config.beta_y() if config.p else 0.0)
        + config.lambda_conf * u
        + config.noise_sd * eps
    )

    gamma1, gamma2 = oracle_gamma(config, x, z, stratum)
    alpha1, alpha2 = oracle_alpha(config, x)
    return DgpDraw(
        dataset=Dataset(y=y, t=t, x=x, z=z, stratum=stratum),
        gamma1_true=gamma1,
        gamma2_true=gamma2,
        gamma_true=gamma1 - gamma2,
        alpha1_true=alpha1,
        alpha2_true=alpha2,
        theta0=config.theta0,
        config=config,
    )


@dataclass(frozen=True)
class ReplicationResult:
    rep: int
    method: str
    theta_hat: float = float("nan")
    se: float = float("nan")
    ci_low: float = float("nan")
    ci_high: float = float("nan")
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


def replication_generators(seed: int, rep: int) -> tuple[np.random.Generator, int]:
    """Independent data generator and fold seed for replication `rep`."""
    data_seq, fold_seq = np.random.SeedSequence([seed, rep]).spawn(2)
    return np.random.default_rng(data_seq), int(fold_seq.generate_state(1)[0])


def run_replication(
    config: DgpConfig,
    rep: int,
    estimators: Sequence[str],
    seed: int,
    pipeline: PipelineConfig | None = None,
) -> list[ReplicationResult]:
    """Draw one dataset and run every estimator; estimation and linear-algebra failures are
    recorded, not raised."""
    rng, fold_seed = replication_generators(seed, rep)
    draw = draw_dgp(config, rng)
    runner = ExaminerIVPipeline(pipeline, seed=fold_seed)
    d = draw.dataset
    plan = runner.make_plan(d)

    shared: dict = {}
    results = []
    for method in estimators:
        try:
            if method in ("debiased", "plugin") and "nuisance" not in shared:
                shared["nuisance"] = runner.fit_nuisance(d, plan)
            if method == "debiased" and "riesz" not in shared:
                shared["riesz"] = runner.fit_riesz(d, plan, shared["nuisance"])
            report = _single_estimate(runner, method, draw, shared)
        except (ExaminerIVError, np.linalg.LinAlgError) as exc:
            logging.vlog(1, "replication %d %s failed: %s", rep, method, exc)
            results.append(ReplicationResult(rep, method, error=f"{type(exc).__name__}: {exc}"))
            continue
        results.append(
            ReplicationResult(rep, method, report.theta_hat, report.se, report.ci_low, report.ci_high)
        )
    return results


def _single_estimate(runner: ExaminerIVPipeline, method: str, draw: DgpDraw, shared: dict):
    d, level = draw.dataset, runner.config.level
    if method == "debiased":
        return solve_theta_debiased(d, shared["nuisance"], shared["riesz"], level)
    if method == "plugin":
        return estimate_plugin(d, shared["nuisance"], level)
    if method == "oracle":
        return estimate_oracle(d, draw.gamma_true, level)
    if method == "loo_jive":
        return estimate_loo_jive(d, level)
    return estimate_ujive_linear(d, level)


@dataclass(frozen=True)
class MethodSummary:
    method: str
    n: int
    J: int
    p: int
    R: int
    bias: float
    median_bias: float
    rmse: float
    sd: float
    mean_se: float
    coverage: float
    failures: int
    bias_mcse: float


SUMMARY_COLUMNS = ("method", "n", "J", "p", "R", "bias", "rmse", "sd", "mean_se", "coverage", "failures")


def _summarize_method(method: str, rows: list[ReplicationResult], config: DgpConfig) -> MethodSummary:
    good = [r for r in rows if r.ok]
    failures = len(rows) - len(good)
    if not good:
        nan = float("nan")
        return MethodSummary(method, config.n, config.J, config.p, len(rows), nan, nan, nan, nan, nan, nan, failures, nan)
    theta = np.array([r.theta_hat for r in good])
    err = theta - config.theta0
    sd = float(np.std(theta, ddof=1)) if theta.size > 1 else 0.0
    covered = [(r.ci_low <= config.theta0 <= r.ci_high) for r in good]
    return MethodSummary(
        method=method,
        n=config.n,
        J=config.J,
        p=config.p,
        R=len(rows),
        bias=float(np.mean(err)),
        median_bias=float(np.median(err)),
        rmse=float(np.sqrt(np.mean(err**2))),
        sd=sd,
        mean_se=float(np.mean([r.se for r in good])),
        coverage=float(np.mean(covered)),
        failures=failures,
        bias_mcse=sd / np.sqrt(theta.size),
    )


class McSummary:
    """Per-estimator Monte Carlo summary built from replication records.

    Records are sorted by (rep, method) before aggregating, so the result does not depend on
    the order in which replications finished.
    """

    def __init__(self, config: DgpConfig, results: Iterable[ReplicationResult]):
        self.config = config
        self.results = tuple(sorted(results, key=lambda r: (r.rep, r.method)))
        methods = list(dict.fromkeys(r.method for r in self.results))
        order = {m: k for k, m in enumerate(ESTIMATORS)}
        methods.sort(key=lambda m: order.get(m, len(order)))
        self.rows = {
            m: _summarize_method(m, [r for r in self.results if r.method == m], config) for m in methods
        }

    def merge(self, other: McSummary) -> McSummary:
        if other.config != self.config:
            raise ParameterError("cannot merge summaries of different simulation configs")
        return McSummary(self.config, self.results + other.results)

    def __getitem__(self, method: str) -> MethodSummary:
        return self.rows[method]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(row) for row in self.rows.values()], columns=list(SUMMARY_COLUMNS))

    def to_json(self) -> str:
        payload = {
            "config": self.config.model_dump(),
            "estimators": [asdict(row) for row in self.rows.values()],
        }
        return json.dumps(payload, indent=2, allow_nan=True)

    def replications_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(r) for r in self.results])


def _chunks(reps: list[int], size: int) -> list[list[int]]:
    return [reps[k : k + size] for k in range(0, len(reps), size)]


def run_monte_carlo(
    config: DgpConfig,
    estimators: Sequence[str],
    R: int,
    L: int | None = None,
    seed: int = 0,
    pipeline: PipelineConfig | None = None,
    n_jobs: int | None = 1,
    backend: str = "local",
    chunk_size: int = 10,
) -> McSummary:
    """R independent replications of every estimator; replication r uses the stream (seed, r)."""
    if R < 2:
        raise ParameterError(f"Monte Carlo needs R >= 2 replications, got {R}")
    unknown = [e for e in estimators if e not in ESTIMATORS]
    if unknown:
        raise ParameterError(f"unknown estimator(s): {', '.join(unknown)}")
    pipeline = PipelineConfig() if pipeline is None else pipeline
    if L is not None:
        pipeline = pipeline.model_copy(update={"folds": L})

    logging.info(
        "monte carlo: R=%d n=%d J=%d p=%d estimators=%s backend=%s",
        R, config.n, config.J, config.p, ",".join(estimators), backend,
    )
    if backend == "local":
        batches = Parallel(n_jobs=n_jobs)(
            delayed(run_replication)(config, rep, list(estimators), seed, pipeline) for rep in range(R)
        )
        results = [r for batch in batches for r in batch]
    elif backend == "celery":
        from celery import group

        from .tasks import run_replication_chunk

        job = group(
            run_replication_chunk.s(config.model_dump_json(), pipeline.model_dump_json(), list(estimators), seed, reps)
            for reps in _chunks(list(range(R)), chunk_size)
        )
        payloads = job.apply_async().get()
        results = [ReplicationResult(**row) for chunk in payloads for row in chunk]
    else:
        raise ParameterError(f"unknown backend {backend!r}")

    summary = McSummary(config, results)
    for row in summary.rows.values():
        logging.info(
            "%s: bias=%.4f rmse=%.4f coverage=%.3f failures=%d", row.method, row.bias, row.rmse, row.coverage, row.failures
        )
    return summary
