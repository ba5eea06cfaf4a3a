"""Command-line front end: `estimate` on a CSV, `simulate` Monte Carlo studies, `diagnose` checks.

    python -m src.cli estimate --data cases.csv --out results/
    python -m src.cli simulate --config mc.json --out results/ --threads 8
    python -m src.cli diagnose --config diag.json --out results/

Exit codes: 0 success, 1 a diagnostic failed, 2 invalid input or config, 3 weak identification.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Literal

from absl import logging
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .core import DictionarySpec, load_dataset_csv, validate_dataset
from .diagnostics import CHECKS, DEFAULT_CHECKS, results_to_json, run_diagnostics
from .errors import ExaminerIVError, ParameterError, WeakIdentificationError
from .estimator import ESTIMATORS
from .learners import LearnerConfig, Method
from .pipeline import ExaminerIVPipeline, PipelineConfig
from .settings import settings
from .sim import DgpConfig, run_monte_carlo

EXIT_OK = 0
EXIT_DIAGNOSTIC_FAILED = 1
EXIT_INVALID = 2
EXIT_WEAK_ID = 3


class RunConfig(BaseModel):
    """Fully resolved run description; written next to every output as manifest.json."""

    model_config = ConfigDict(extra="forbid")

    mode: Literal["estimate", "simulate", "diagnose"]
    data_path: Path | None = None
    dgp: DgpConfig | None = None
    folds: int = Field(default_factory=lambda: settings.DEFAULT_FOLDS, ge=2)
    learner: Method = "lasso"
    penalties: float | Literal["cv"] = "cv"
    penalty_scale: float = Field(1.0, gt=0.0)
    dictionary: DictionarySpec | None = None
    estimators: list[str] = Field(default_factory=lambda: ["debiased"])
    level: float = Field(default_factory=lambda: settings.DEFAULT_LEVEL, gt=0.0, lt=1.0)
    clip_eps: float = Field(default_factory=lambda: settings.CLIP_EPS, ge=0.0, lt=0.5)
    output_path: Path = Path("results")
    seed: int = Field(0, ge=0)
    threads: int | None = None
    # simulate
    replications: int = Field(100, ge=2)
    # diagnose
    checks: list[str] = Field(default_factory=lambda: list(DEFAULT_CHECKS))
    score: Literal["orthogonal", "quadratic"] = "orthogonal"
    population_n: int = Field(100_000, ge=1000)
    rate_n_grid: list[int] = Field(default_factory=lambda: [500, 2000, 8000])
    rate_replications: int = Field(50, ge=2)

    @model_validator(mode="after")
    def _mode_requirements(self):
        if self.mode == "estimate" and self.data_path is None:
            raise ValueError("estimate mode requires data_path")
        if self.mode in ("simulate", "diagnose") and self.dgp is None:
            raise ValueError(f"{self.mode} mode requires dgp")
        unknown = [e for e in self.estimators if e not in ESTIMATORS]
        if unknown:
            raise ValueError(f"unknown estimator(s): {', '.join(unknown)}")
        unknown = [c for c in self.checks if c not in CHECKS]
        if unknown:
            raise ValueError(f"unknown check(s): {', '.join(unknown)}")
        return self

    def pipeline(self) -> PipelineConfig:
        learner = LearnerConfig(method=self.learner, penalty=self.penalties, penalty_scale=self.penalty_scale)
        # the representers are always LASSO fits; a fixed penalty applies to both stages
        riesz = LearnerConfig(method="lasso", penalty=self.penalties, penalty_scale=self.penalty_scale)
        return PipelineConfig(
            folds=self.folds,
            learner=learner,
            riesz=riesz,
            dictionary=self.dictionary,
            clip_eps=self.clip_eps,
            level=self.level,
        )

    def n_jobs(self) -> int:
        return self.threads or settings.THREADS or os.cpu_count() or 1


def parse_args(argv: list[str] | None = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(prog="examiner-iv", description="Debiased examiner-IV estimation")
    parser.add_argument("-v", "--verbosity", type=int, default=None, help="absl verbosity (vlog level)")
    sub = parser.add_subparsers(dest="mode", required=True)
    for mode, help_text in (
        ("estimate", "Estimate the treatment effect on a case-level CSV"),
        ("simulate", "Run a Monte Carlo study on the synthetic examiner design"),
        ("diagnose", "Check orthogonality, robustness, affinity and rate conditions"),
    ):
        cmd = sub.add_parser(mode, help=help_text)
        cmd.add_argument("--config", type=Path, help="JSON run config; flags override its values")
        cmd.add_argument("--out", type=Path, help="Output directory")
        cmd.add_argument("--seed", type=int, help="Seed for folds and simulation streams")
        cmd.add_argument("--folds", type=int, help="Number of cross-fitting folds")
        cmd.add_argument("--threads", type=int, help="Cap on worker processes (default: all cores)")
        if mode == "estimate":
            cmd.add_argument("--data", type=Path, help="Case-level CSV (y, t, z, x1..xp, stratum)")
            cmd.add_argument("--estimators", help="Comma-separated estimators, e.g. debiased,plugin")
        if mode == "simulate":
            cmd.add_argument("--replications", type=int, help="Monte Carlo replications R")
            cmd.add_argument("--estimators", help="Comma-separated estimators")
        if mode == "diagnose":
            cmd.add_argument("--checks", help=f"Comma-separated subset of {','.join(CHECKS)}")
            cmd.add_argument("--score", choices=["orthogonal", "quadratic"], help="Score under test")
    return parser.parse_args(argv)


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Merge the config file (if any) with command-line overrides."""
    values: dict = {}
    if args.config is not None:
        values = json.loads(Path(args.config).read_text(encoding="utf-8"))
    values["mode"] = args.mode
    overrides = {
        "data_path": getattr(args, "data", None),
        "output_path": args.out,
        "seed": args.seed,
        "folds": args.folds,
        "threads": args.threads,
        "replications": getattr(args, "replications", None),
        "score": getattr(args, "score", None),
    }
    for key in ("estimators", "checks"):
        raw = getattr(args, key, None)
        overrides[key] = [s.strip() for s in raw.split(",") if s.strip()] if raw else None
    values.update({k: v for k, v in overrides.items() if v is not None})
    if args.mode in ("simulate", "diagnose") and values.get("dgp") is None:
        values["dgp"] = {}
    return RunConfig.model_validate(values)


def write_manifest(config: RunConfig, out: Path, extra: dict | None = None) -> Path:
    manifest = {"config": json.loads(config.model_dump_json()), "seed": config.seed, **(extra or {})}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    return path


def cmd_estimate(config: RunConfig) -> int:
    out = config.output_path
    try:
        d = load_dataset_csv(config.data_path)
    except (OSError, ValueError) as exc:
        print(f"cannot read {config.data_path}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    report = validate_dataset(d)
    if not report.ok:
        for message in report.messages():
            print(message, file=sys.stderr)
        return EXIT_INVALID
    if "oracle" in config.estimators:
        print("the oracle estimator needs simulated data with a known instrument", file=sys.stderr)
        return EXIT_INVALID

    runner = ExaminerIVPipeline(config.pipeline(), seed=config.seed, n_jobs=config.n_jobs())
    try:
        result = runner.estimate(d, config.estimators)
    except WeakIdentificationError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_WEAK_ID
    except ExaminerIVError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_INVALID

    out.mkdir(parents=True, exist_ok=True)
    for method, est in result.reports.items():
        (out / f"estimate_{method}.json").write_text(est.to_json(), encoding="utf-8")
        print(f"{method:>14}: theta_hat={est.theta_hat:.6f} se={est.se:.6f} [{est.ci_low:.6f}, {est.ci_high:.6f}]")
    if result.nuisance is not None:
        result.observation_frame().to_csv(out / "observations.csv", index=False)
    write_manifest(config, out, {"n": d.n, "J": d.J, "p": d.p})
    return EXIT_OK


def cmd_simulate(config: RunConfig) -> int:
    out = config.output_path
    summary = run_monte_carlo(
        config.dgp,
        config.estimators,
        config.replications,
        config.folds,
        config.seed,
        config.pipeline(),
        n_jobs=config.n_jobs(),
    )
    out.mkdir(parents=True, exist_ok=True)
    summary.to_frame().to_csv(out / "summary.csv", index=False)
    (out / "summary.json").write_text(summary.to_json(), encoding="utf-8")
    summary.replications_frame().to_csv(out / "replications.csv", index=False)
    write_manifest(config, out)
    print(summary.to_frame().to_string(index=False))
    return EXIT_OK


def cmd_diagnose(config: RunConfig) -> int:
    out = config.output_path
    results = run_diagnostics(
        config.dgp,
        config.checks,
        seed=config.seed,
        score=config.score,
        population_n=config.population_n,
        rate_n_grid=config.rate_n_grid,
        rate_replications=config.rate_replications,
        pipeline=config.pipeline(),
        n_jobs=config.n_jobs(),
    )
    out.mkdir(parents=True, exist_ok=True)
    (out / "diagnostics.json").write_text(results_to_json(results), encoding="utf-8")
    write_manifest(config, out)
    width = max((len(r.name) for r in results), default=10)
    for r in results:
        print(f"{r.name:<{width}}  {'PASS' if r.passed else 'FAIL'}  {r.statistic:.3e} <= {r.threshold:.3e}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_DIAGNOSTIC_FAILED


COMMANDS = {"estimate": cmd_estimate, "simulate": cmd_simulate, "diagnose": cmd_diagnose}


def main(argv: list[str] | None = None) -> int:
    args = parse_args(argv)
    logging.set_verbosity(args.verbosity if args.verbosity is not None else settings.LOG_LEVEL)
    try:
        config = resolve_config(args)
    except (ValidationError, ValueError, OSError) as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_INVALID
    try:
        return COMMANDS[config.mode](config)
    except WeakIdentificationError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_WEAK_ID
    except ParameterError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
