"""
Experimental designs and factor screening.

Plackett-Burman two-level designs (cyclic generators plus a final all-low row),
full factorials, decoding to process parameters, main-effect estimation and a
Fisher test with error pooled from dummy columns and replicate runs.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.special import betainc

from artifacts import write_csv
from errors import CapacityError, InferenceError, RangeError, ShapeError
from plant import MACHINE_RANGES, PARAM_FIELDS, ProcessParams

logger = logging.getLogger("doe")

PB_SIZES = (8, 12, 16, 20, 24)
# First-row generators of the 1946 cyclic construction
PB_GENERATORS = {
    12: "++-+++---+-",
    16: "++++-+-++--+---",
    20: "++--++++-+-+----++-",
    24: "+++++-+-++--++--+-+----",
}
MAX_FACTORIAL_RUNS = 10_000
DEFAULT_ALPHA = 0.05


@dataclass(frozen=True, eq=False)
class DesignMatrix:
    """Coded design. Columns [0, n_factors) are assigned to factor_names, the rest are dummy columns."""

    runs: np.ndarray
    factor_names: tuple[str, ...]
    dummy_columns: tuple[int, ...] = ()
    levels: int = 2
    replicates: int = 1

    def __post_init__(self) -> None:
        if self.runs.ndim != 2:
            raise ShapeError("design runs must be a 2-D matrix")
        allowed = {-1, 1} if self.levels == 2 else {-1, 0, 1}
        if not set(np.unique(self.runs).tolist()) <= allowed:
            raise RangeError(f"coded entries must be in {sorted(allowed)}")
        if len(self.factor_names) + len(self.dummy_columns) != self.runs.shape[1]:
            raise ShapeError("every column must be either assigned or dummy")
        if self.n_runs <= len(self.factor_names):
            raise RangeError("design needs more runs than assigned factors")

    @property
    def n_runs(self) -> int:
        return self.runs.shape[0]

    @property
    def n_columns(self) -> int:
        return self.runs.shape[1]

    @property
    def column_names(self) -> tuple[str, ...]:
        return self.factor_names + tuple(f"dummy_{j}" for j in self.dummy_columns)

    def replicate(self, times: int) -> "DesignMatrix":
        """Repeat the whole design `times` times (block order)."""
        if times < 1:
            raise RangeError(f"replicates must be >= 1, got {times}")
        return DesignMatrix(
            runs=np.tile(self.runs, (times, 1)),
            factor_names=self.factor_names,
            dummy_columns=self.dummy_columns,
            levels=self.levels,
            replicates=self.replicates * times,
        )


def _sylvester_8() -> np.ndarray:
    h2 = np.array([[1, 1], [1, -1]])
    return np.kron(np.kron(h2, h2), h2)[:, 1:]


def _cyclic(generator: str) -> np.ndarray:
    first = np.array([1 if c == "+" else -1 for c in generator])
    rows = [np.roll(first, i) for i in range(len(first))]
    rows.append(-np.ones(len(first), dtype=int))
    return np.array(rows, dtype=int)


def _factor_names(n_factors: int, factor_names: Sequence[str] | None) -> tuple[str, ...]:
    if factor_names is None:
        return tuple(f"x{i + 1}" for i in range(n_factors))
    names = tuple(factor_names)
    if len(names) != n_factors:
        raise ShapeError(f"{len(names)} factor names for {n_factors} factors")
    if len(set(names)) != len(names):
        raise ShapeError("factor names must be unique")
    return names


def pb_design(
    n_factors: int, *, n_runs: int | None = None, factor_names: Sequence[str] | None = None
) -> DesignMatrix:
    """Smallest Plackett-Burman design with more runs than factors (or exactly n_runs when given)."""
    if not 1 <= n_factors <= 23:
        raise RangeError(f"n_factors must be in [1, 23], got {n_factors}")
    if n_runs is None:
        n_runs = next(n for n in PB_SIZES if n >= n_factors + 1)
    elif n_runs not in PB_SIZES or n_runs < n_factors + 1:
        raise RangeError(f"n_runs must be one of {PB_SIZES} and > n_factors, got {n_runs}")
    runs = _sylvester_8() if n_runs == 8 else _cyclic(PB_GENERATORS[n_runs])
    names = _factor_names(n_factors, factor_names)
    return DesignMatrix(runs=runs, factor_names=names, dummy_columns=tuple(range(n_factors, n_runs - 1)))


def factorial_design(n_factors: int, levels: int = 2, *, factor_names: Sequence[str] | None = None) -> DesignMatrix:
    """Full factorial in lexicographic order (first factor varies slowest)."""
    if n_factors < 1:
        raise RangeError(f"n_factors must be >= 1, got {n_factors}")
    if levels not in (2, 3):
        raise RangeError(f"levels must be 2 or 3, got {levels}")
    if levels**n_factors > MAX_FACTORIAL_RUNS:
        raise CapacityError(f"{levels}^{n_factors} runs exceeds the {MAX_FACTORIAL_RUNS}-run bound")
    coded = (-1, 1) if levels == 2 else (-1, 0, 1)
    runs = np.array(list(itertools.product(coded, repeat=n_factors)), dtype=int)
    return DesignMatrix(runs=runs, factor_names=_factor_names(n_factors, factor_names), levels=levels)


def decode(
    design: DesignMatrix,
    factor_ranges: Mapping[str, tuple[float, float]],
    base: ProcessParams | None = None,
) -> list[ProcessParams]:
    """
    Map coded runs to ProcessParams: -1 -> low, +1 -> high, 0 -> midpoint.
    Assigned factors that are not process parameters (placeholders) and dummy columns are ignored.
    """
    base = base or ProcessParams()
    columns: list[tuple[int, str, float, float]] = []
    for j, name in enumerate(design.factor_names):
        if name not in PARAM_FIELDS:
            continue
        if name not in factor_ranges:
            raise RangeError(f"no range given for factor {name}")
        lo, hi = (float(v) for v in factor_ranges[name])
        m_lo, m_hi = MACHINE_RANGES[name]
        if not (m_lo <= lo < hi <= m_hi):
            raise RangeError(f"range ({lo}, {hi}) for {name} outside machine range [{m_lo}, {m_hi}]")
        columns.append((j, name, lo, hi))
    out: list[ProcessParams] = []
    for row in design.runs:
        values = {name: {-1: lo, 0: (lo + hi) / 2.0, 1: hi}[int(row[j])] for j, name, lo, hi in columns}
        out.append(base.with_values(**values))
    return out


def _responses(design: DesignMatrix, responses: Sequence[float]) -> np.ndarray:
    y = np.asarray(responses, dtype=float)
    if y.shape != (design.n_runs,):
        raise ShapeError(f"expected {design.n_runs} responses, got {y.shape}")
    if not np.all(np.isfinite(y)):
        raise RangeError("responses must be finite")
    return y


def effects(design: DesignMatrix, responses: Sequence[float]) -> np.ndarray:
    """Per-column effect: mean response at +1 minus mean response at -1 (assigned and dummy columns)."""
    y = _responses(design, responses)
    x = design.runs
    high = np.where(x == 1, 1.0, 0.0)
    low = np.where(x == -1, 1.0, 0.0)
    return (y @ high) / high.sum(axis=0) - (y @ low) / low.sum(axis=0)


@dataclass(frozen=True)
class FactorResult:
    name: str
    column: int
    effect: float
    sum_squares: float
    f_statistic: float
    p_value: float
    significant: bool


@dataclass(frozen=True)
class ScreeningReport:
    factors: tuple[FactorResult, ...]
    error_df: int
    error_mean_square: float
    alpha: float
    dummy_effects: tuple[float, ...] = field(default=())

    def significant_factors(self) -> list[str]:
        return [f.name for f in self.factors if f.significant]

    def factor(self, name: str) -> FactorResult:
        return next(f for f in self.factors if f.name == name)


def f_survival(f_stat: float, df1: int, df2: int) -> float:
    """P(F > f_stat) for an F(df1, df2) variable via the regularized incomplete beta function."""
    if f_stat <= 0:
        return 1.0
    if np.isinf(f_stat):
        return 0.0
    return float(betainc(df2 / 2.0, df1 / 2.0, df2 / (df2 + df1 * f_stat)))


def fisher_screen(design: DesignMatrix, responses: Sequence[float], alpha: float = DEFAULT_ALPHA) -> ScreeningReport:
    """
    F test of every assigned column against the pooled error: dummy-column sums of
    squares plus the pure error between replicated runs.
    """
    if not 0 < alpha < 1:
        raise RangeError(f"alpha must be in (0, 1), got {alpha}")
    y = _responses(design, responses)
    x = design.runs.astype(float)
    contrast = y @ x
    ss = contrast**2 / np.sum(x * x, axis=0)
    effect = effects(design, y)

    n_assigned = len(design.factor_names)
    error_ss = float(np.sum(ss[n_assigned:]))
    error_df = design.n_columns - n_assigned
    _, groups = np.unique(design.runs, axis=0, return_inverse=True)
    groups = np.asarray(groups).reshape(-1)
    n_groups = int(groups.max()) + 1
    if n_groups < design.n_runs:
        means = np.bincount(groups, weights=y) / np.bincount(groups)
        error_ss += float(np.sum((y - means[groups]) ** 2))
        error_df += design.n_runs - n_groups
    if error_df == 0:
        raise InferenceError("no error estimate: design has no dummy columns and no replicates; add replicates")
    ms_error = error_ss / error_df

    results = []
    for j, name in enumerate(design.factor_names):
        ss_j = float(ss[j])
        if ss_j == 0:
            f_stat = 0.0
        elif ms_error == 0:
            f_stat = float("inf")
        else:
            f_stat = ss_j / ms_error
        p = f_survival(f_stat, 1, error_df)
        results.append(FactorResult(name, j, float(effect[j]), ss_j, f_stat, p, p < alpha))
    report = ScreeningReport(
        factors=tuple(results),
        error_df=error_df,
        error_mean_square=ms_error,
        alpha=alpha,
        dummy_effects=tuple(float(e) for e in effect[n_assigned:]),
    )
    logger.info("Screening: %d factors, error df %d, significant: %s", n_assigned, error_df, report.significant_factors())
    return report


def write_design_csv(
    path: str | Path, design: DesignMatrix, params: Sequence[ProcessParams], responses: Sequence[float]
) -> Path:
    """One run per row: coded columns, decoded parameters, response."""
    if len(params) != design.n_runs or len(responses) != design.n_runs:
        raise ShapeError("params and responses must have one entry per run")
    header = ["run", *design.column_names, *PARAM_FIELDS, "response"]
    rows = [
        [i, *design.runs[i].tolist(), *(getattr(p, n) for n in PARAM_FIELDS), float(responses[i])]
        for i, p in enumerate(params)
    ]
    return write_csv(path, header, rows)


def write_report_csv(path: str | Path, report: ScreeningReport) -> Path:
    header = ["factor", "effect", "SS", "F", "p", "significant"]
    rows = [[f.name, f.effect, f.sum_squares, f.f_statistic, f.p_value, f.significant] for f in report.factors]
    return write_csv(path, header, rows)
