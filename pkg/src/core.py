"""Data model, validation, fold construction and dictionary building shared by all estimators."""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Literal

import numpy as np
import pandas as pd
from absl import logging
from pydantic import BaseModel, ConfigDict, Field

from .errors import ParameterError

_COVARIATE_COLUMN = re.compile(r"^x(\d+)$")


def _frozen(array: np.ndarray) -> np.ndarray:
    array.flags.writeable = False
    return array


@dataclass(frozen=True, eq=False)
class Dataset:
    """One row per case: outcome, binary treatment, covariates, examiner and optional stratum.

    Construction only coerces shapes and dtypes; use `validate_dataset` to check invariants.
    """

    y: np.ndarray
    t: np.ndarray
    x: np.ndarray
    z: np.ndarray
    stratum: np.ndarray | None = None
    covariate_names: tuple[str, ...] = ()

    def __post_init__(self):
        y = np.array(self.y, dtype=float).reshape(-1)
        t = np.array(self.t, dtype=float).reshape(-1)
        z = np.array(self.z).reshape(-1)
        x = np.zeros((y.shape[0], 0)) if self.x is None else np.array(self.x, dtype=float)
        if x.ndim == 1:
            x = x.reshape(-1, 1)
        stratum = None if self.stratum is None else np.array(self.stratum).reshape(-1)
        names = tuple(self.covariate_names) or tuple(f"x{j + 1}" for j in range(x.shape[1]))
        object.__setattr__(self, "y", _frozen(y))
        object.__setattr__(self, "t", _frozen(t))
        object.__setattr__(self, "x", _frozen(x))
        object.__setattr__(self, "z", _frozen(z))
        object.__setattr__(self, "stratum", None if stratum is None else _frozen(stratum))
        object.__setattr__(self, "covariate_names", names)

    @property
    def n(self) -> int:
        return int(self.y.shape[0])

    @property
    def p(self) -> int:
        return int(self.x.shape[1])

    @property
    def examiner_labels(self) -> np.ndarray:
        return np.unique(self.z)

    @property
    def examiner_codes(self) -> np.ndarray:
        """Examiner ids remapped to dense codes 0..J-1 (sorted by original label)."""
        return np.unique(self.z, return_inverse=True)[1].reshape(-1)

    @property
    def J(self) -> int:
        return int(self.examiner_labels.shape[0])

    @property
    def stratum_labels(self) -> np.ndarray:
        if self.stratum is None:
            return np.zeros(0)
        return np.unique(self.stratum)

    @property
    def stratum_codes(self) -> np.ndarray | None:
        if self.stratum is None:
            return None
        return np.unique(self.stratum, return_inverse=True)[1].reshape(-1)

    def take(self, rows) -> Dataset:
        """Subset (or permute) rows."""
        rows = np.asarray(rows)
        return Dataset(
            y=self.y[rows],
            t=self.t[rows],
            x=self.x[rows],
            z=self.z[rows],
            stratum=None if self.stratum is None else self.stratum[rows],
            covariate_names=self.covariate_names,
        )

    def with_outcome(self, y) -> Dataset:
        return replace(self, y=np.asarray(y, dtype=float))

    def with_treatment(self, t) -> Dataset:
        return replace(self, t=np.asarray(t, dtype=float))


@dataclass(frozen=True)
class Violation:
    code: str
    message: str
    index: int | None = None


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def messages(self) -> list[str]:
        return [v.message for v in self.violations]


def _non_finite(values: np.ndarray) -> np.ndarray:
    if values.dtype.kind not in "fc":
        return np.zeros(values.shape[0], dtype=bool)
    bad = ~np.isfinite(values)
    return bad.any(axis=1) if bad.ndim == 2 else bad


def validate_dataset(d: Dataset, max_reported: int = 50) -> ValidationReport:
    """Check every Dataset invariant and list the violations with the offending row index.

    Row indices are 0-based. At most `max_reported` per-row violations are listed per check.
    """
    violations: list[Violation] = []
    n = d.n

    if n < 2:
        violations.append(Violation("n_too_small", f"n < 2 (n={n})"))
    for name, length in (
        ("t", d.t.shape[0]),
        ("z", d.z.shape[0]),
        ("x", d.x.shape[0]),
        ("stratum", None if d.stratum is None else d.stratum.shape[0]),
    ):
        if length is not None and length != n:
            violations.append(
                Violation("length_mismatch", f"length mismatch: {name} has {length} rows, y has {n}")
            )
    if any(v.code == "length_mismatch" for v in violations):
        return ValidationReport(tuple(violations))

    for name, values in (("y", d.y), ("t", d.t), ("x", d.x), ("z", d.z), ("stratum", d.stratum)):
        if values is None:
            continue
        for i in np.flatnonzero(_non_finite(values))[:max_reported]:
            violations.append(Violation("non_finite", f"non-finite {name} at {i}", int(i)))

    not_binary = np.flatnonzero(np.isfinite(d.t) & (d.t != 0.0) & (d.t != 1.0))
    for i in not_binary[:max_reported]:
        violations.append(Violation("treatment_not_binary", f"treatment not binary at {i}", int(i)))

    if n >= 1 and d.J < 2:
        violations.append(Violation("too_few_examiners", f"J < 2 (J={d.J})"))

    return ValidationReport(tuple(violations))


@dataclass(frozen=True, eq=False)
class FoldPlan:
    """Random partition of 0..n-1 into L disjoint folds."""

    folds: tuple[np.ndarray, ...]
    seed: int
    n: int

    @property
    def L(self) -> int:
        return len(self.folds)

    def fold_of(self) -> np.ndarray:
        labels = np.empty(self.n, dtype=int)
        for l, idx in enumerate(self.folds):
            labels[idx] = l
        return labels

    def complement(self, l: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of() != l)

    def complement_of_pair(self, l: int, m: int) -> np.ndarray:
        labels = self.fold_of()
        return np.flatnonzero((labels != l) & (labels != m))

    def relabel(self, order) -> FoldPlan:
        """Same partition with folds listed in `order`."""
        return FoldPlan(tuple(self.folds[k] for k in order), self.seed, self.n)

    def permute_rows(self, perm) -> FoldPlan:
        """Plan for a dataset whose row k is old row perm[k]."""
        perm = np.asarray(perm)
        inverse = np.empty_like(perm)
        inverse[perm] = np.arange(perm.shape[0])
        return FoldPlan(tuple(np.sort(inverse[idx]) for idx in self.folds), self.seed, self.n)

    @classmethod
    def from_labels(cls, labels, seed: int = 0) -> FoldPlan:
        labels = np.asarray(labels, dtype=int)
        uniq = np.unique(labels)
        folds = tuple(np.flatnonzero(labels == l) for l in uniq)
        if any(f.size == 0 for f in folds) or len(folds) < 2:
            raise ParameterError("fold labels must define at least two non-empty folds")
        return cls(folds, seed, int(labels.shape[0]))


def make_folds(n: int, L: int, seed: int) -> FoldPlan:
    """Shuffle 0..n-1 with a seeded generator and deal the indices round-robin into L folds."""
    if seed < 0:
        raise ParameterError(f"seed must be unsigned, got {seed}")
    if not 2 <= L <= n:
        raise ParameterError(f"number of folds L={L} must lie in [2, n={n}]")
    order = np.random.default_rng(seed).permutation(n)
    folds = tuple(_frozen(np.sort(order[l::L])) for l in range(L))
    logging.vlog(1, "fold plan n=%d L=%d seed=%d sizes=%s", n, L, seed, [f.size for f in folds])
    return FoldPlan(folds, int(seed), int(n))


Interactions = Literal["none", "examiner_by_stratum", "covariate_pairs", "full"]


class DictionarySpec(BaseModel):
    """Which feature-map columns b(X,Z) or b(X) to generate."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    include_examiner_dummies: bool = True
    include_stratum_dummies: bool = False
    include_covariates: bool = True
    polynomial_degree: int = Field(1, ge=1)
    interactions: Interactions = "none"
    include_intercept: bool = False

    def excludes_examiner(self) -> bool:
        return not self.include_examiner_dummies and self.interactions not in {
            "examiner_by_stratum",
            "full",
        }

    def without_examiner(self) -> DictionarySpec:
        """Same covariate side with every examiner-dependent column removed."""
        interactions = {"examiner_by_stratum": "none", "full": "covariate_pairs"}.get(
            self.interactions, self.interactions
        )
        return self.model_copy(
            update={"include_examiner_dummies": False, "interactions": interactions}
        )


@dataclass(frozen=True, eq=False)
class DesignMatrix:
    """Dictionary values b(X,Z) for every row plus the statistics used to standardize them."""

    values: np.ndarray
    column_names: tuple[str, ...]
    column_means: np.ndarray
    column_scales: np.ndarray
    standardized: bool
    constant: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.constant is None:
            object.__setattr__(self, "constant", _constant_columns(self.values))

    @property
    def n_rows(self) -> int:
        return int(self.values.shape[0])

    @property
    def n_columns(self) -> int:
        return int(self.values.shape[1])

    @property
    def penalized(self) -> np.ndarray:
        return ~self.constant

    def raw_values(self) -> np.ndarray:
        """Undo standardization (identity when not standardized)."""
        if not self.standardized:
            return self.values
        return self.values * self.column_scales + self.column_means

    def take(self, rows) -> DesignMatrix:
        return replace(self, values=self.values[np.asarray(rows)])

    def restandardize(self, train_rows) -> DesignMatrix:
        """Standardize every row with statistics computed on `train_rows` only."""
        raw = self.raw_values()
        means, scales, constant = _column_stats(raw[np.asarray(train_rows)])
        return DesignMatrix(
            values=(raw - means) / scales,
            column_names=self.column_names,
            column_means=means,
            column_scales=scales,
            standardized=True,
            constant=constant,
        )


def _constant_columns(values: np.ndarray) -> np.ndarray:
    if values.shape[0] == 0:
        return np.ones(values.shape[1], dtype=bool)
    return np.ptp(values, axis=0) == 0.0


def _column_stats(values: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    constant = _constant_columns(values)
    means = values.mean(axis=0) if values.shape[0] else np.zeros(values.shape[1])
    scales = values.std(axis=0) if values.shape[0] else np.ones(values.shape[1])
    # constant columns are neither centred nor scaled
    means = np.where(constant, 0.0, means)
    scales = np.where(constant, 1.0, scales)
    return means, scales, constant


def _is_binary(column: np.ndarray) -> bool:
    return bool(np.all((column == 0.0) | (column == 1.0)))


def build_dictionary(d: Dataset, spec: DictionarySpec, standardize: bool = False) -> DesignMatrix:
    """Generate the dictionary columns for `d` in a fixed order.

    Order: intercept, examiner dummies, stratum dummies, covariates, polynomial powers
    (degree-major), covariate pair products, examiner-by-stratum products, examiner-by-covariate
    products. Interaction columns that are all zero or repeat an earlier column are skipped.
    Powers are not generated for 0/1 covariates.
    """
    names: list[str] = []
    columns: list[np.ndarray] = []
    n = d.n

    def add(name: str, column: np.ndarray) -> None:
        names.append(name)
        columns.append(np.asarray(column, dtype=float))

    examiners = d.examiner_labels
    codes = d.examiner_codes
    examiner_dummies = [(f"examiner[{lab}]", (codes == j).astype(float)) for j, lab in enumerate(examiners)]

    needs_stratum = spec.include_stratum_dummies or spec.interactions in {"examiner_by_stratum"}
    if needs_stratum and d.stratum is None:
        raise ParameterError("dictionary asks for stratum columns but the dataset has no stratum")
    stratum_dummies = []
    if d.stratum is not None:
        scodes = d.stratum_codes
        stratum_dummies = [
            (f"stratum[{lab}]", (scodes == s).astype(float)) for s, lab in enumerate(d.stratum_labels)
        ]
    covariates = [(name, d.x[:, j]) for j, name in enumerate(d.covariate_names)]

    if spec.include_intercept:
        add("intercept", np.ones(n))
    if spec.include_examiner_dummies:
        for name, col in examiner_dummies:
            add(name, col)
    if spec.include_stratum_dummies:
        for name, col in stratum_dummies:
            add(name, col)
    if spec.include_covariates:
        for name, col in covariates:
            add(name, col)
        for degree in range(2, spec.polynomial_degree + 1):
            for name, col in covariates:
                if not _is_binary(col):
                    add(f"{name}^{degree}", col**degree)

    seen = {col.tobytes() for col in columns}

    def add_interaction(name: str, column: np.ndarray) -> None:
        key = column.tobytes()
        if not np.any(column) or key in seen:
            return
        seen.add(key)
        add(name, column)

    if spec.include_covariates and spec.interactions in {"covariate_pairs", "full"}:
        for a in range(len(covariates)):
            for b in range(a + 1, len(covariates)):
                (na, ca), (nb, cb) = covariates[a], covariates[b]
                add_interaction(f"{na}*{nb}", ca * cb)
    if spec.interactions in {"examiner_by_stratum", "full"} and stratum_dummies:
        for ne, ce in examiner_dummies:
            for ns, cs in stratum_dummies:
                add_interaction(f"{ne}*{ns}", ce * cs)
    if spec.interactions == "full" and spec.include_covariates:
        for ne, ce in examiner_dummies:
            for nc, cc in covariates:
                add_interaction(f"{ne}*{nc}", ce * cc)

    if not columns:
        raise ParameterError("dictionary specification produced zero columns")

    raw = np.column_stack(columns)
    if not standardize:
        return DesignMatrix(
            values=raw,
            column_names=tuple(names),
            column_means=np.zeros(raw.shape[1]),
            column_scales=np.ones(raw.shape[1]),
            standardized=False,
        )
    means, scales, constant = _column_stats(raw)
    return DesignMatrix(
        values=(raw - means) / scales,
        column_names=tuple(names),
        column_means=means,
        column_scales=scales,
        standardized=True,
        constant=constant,
    )


def dataset_from_frame(frame: pd.DataFrame) -> Dataset:
    """Build a Dataset from a frame with columns y, t, z, x1..xp and optional stratum."""
    missing = [c for c in ("y", "t", "z") if c not in frame.columns]
    if missing:
        raise ParameterError(f"missing required column(s): {', '.join(missing)}")
    covariates = sorted(
        (c for c in frame.columns if _COVARIATE_COLUMN.match(str(c))),
        key=lambda c: int(_COVARIATE_COLUMN.match(str(c)).group(1)),
    )
    return Dataset(
        y=frame["y"].to_numpy(dtype=float),
        t=frame["t"].to_numpy(dtype=float),
        x=frame[covariates].to_numpy(dtype=float) if covariates else None,
        z=frame["z"].to_numpy(),
        stratum=frame["stratum"].to_numpy() if "stratum" in frame.columns else None,
        covariate_names=tuple(covariates),
    )


def load_dataset_csv(path: str | Path) -> Dataset:
    """Read the case-level CSV (UTF-8, header row, decimal point)."""
    frame = pd.read_csv(path, encoding="utf-8", thousands=None)
    logging.info("loaded %s: %d rows, %d columns", path, len(frame), frame.shape[1])
    return dataset_from_frame(frame)


def dataset_to_frame(d: Dataset) -> pd.DataFrame:
    frame = pd.DataFrame({"y": d.y, "t": d.t, "z": d.z})
    for j, name in enumerate(d.covariate_names):
        frame[name] = d.x[:, j]
    if d.stratum is not None:
        frame["stratum"] = d.stratum
    return frame
