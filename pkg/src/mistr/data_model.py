"""Core domain types: survival datasets, outcome transforms, survival curves.

All containers are immutable after construction (arrays are frozen), so they
can be shared freely across parallel workers. Every operation is a pure
function of its inputs plus an explicit seed.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DegenerateConditioningError, ValidationError

__all__ = [
    "SurvivalDataset",
    "OutcomeTransform",
    "StudyConfig",
    "SurvivalCurve",
    "CsvSchema",
    "transform_outcome",
    "effective_noncensoring",
    "load_dataset",
    "save_dataset",
    "apply_extra_censoring",
]


def _frozen(a: np.ndarray, dtype) -> np.ndarray:
    out = np.ascontiguousarray(a, dtype=dtype)
    if out is a:
        out = out.copy()
    out.setflags(write=False)
    return out


def _check_binary(a: np.ndarray, name: str) -> None:
    bad = np.flatnonzero((a != 0) & (a != 1))
    if bad.size:
        raise ValidationError(
            f"{name} must be 0/1; found value {a[bad[0]]!r} at row {bad[0] + 1}"
        )


@dataclass(frozen=True)
class SurvivalDataset:
    """One unit per row: covariates, binary treatment, observed time, event flag.

    ``event == 1`` means the event time was observed; ``event == 0`` means the
    unit was right-censored at ``time``. ``instrument`` is optional and, when
    present, is a binary encouragement variable.
    """

    covariates: np.ndarray
    treatment: np.ndarray
    time: np.ndarray
    event: np.ndarray
    instrument: np.ndarray | None = None

    def __post_init__(self):
        x = np.asarray(self.covariates, dtype=np.float64)
        if x.ndim != 2:
            raise ValidationError("covariates must be a 2-D matrix")
        n, p = x.shape
        if n < 2 or p < 1:
            raise ValidationError(f"need n >= 2 and p >= 1, got n={n}, p={p}")
        w = np.asarray(self.treatment, dtype=np.float64)
        t = np.asarray(self.time, dtype=np.float64)
        d = np.asarray(self.event, dtype=np.float64)
        for name, arr in (("treatment", w), ("time", t), ("event", d)):
            if arr.shape != (n,):
                raise ValidationError(f"{name} must have length {n}, got {arr.shape}")
        if not np.all(np.isfinite(x)):
            raise ValidationError("covariates contain non-finite cells")
        if not np.all(np.isfinite(t)):
            raise ValidationError("time contains non-finite cells")
        if np.any(t < 0):
            bad = int(np.flatnonzero(t < 0)[0])
            raise ValidationError(f"negative time {t[bad]} at row {bad + 1}")
        _check_binary(w, "treatment")
        _check_binary(d, "event")
        z = self.instrument
        if z is not None:
            z = np.asarray(z, dtype=np.float64)
            if z.shape != (n,):
                raise ValidationError(f"instrument must have length {n}")
            _check_binary(z, "instrument")
            object.__setattr__(self, "instrument", _frozen(z, np.float64))
        object.__setattr__(self, "covariates", _frozen(x, np.float64))
        object.__setattr__(self, "treatment", _frozen(w, np.float64))
        object.__setattr__(self, "time", _frozen(t, np.float64))
        object.__setattr__(self, "event", _frozen(d, np.float64))

    @property
    def n(self) -> int:
        return self.covariates.shape[0]

    @property
    def p(self) -> int:
        return self.covariates.shape[1]

    @property
    def censoring_rate(self) -> float:
        return float(1.0 - self.event.mean())

    def with_outcomes(self, time: np.ndarray, event: np.ndarray) -> "SurvivalDataset":
        """Copy of this dataset with replaced (time, event) columns."""
        return SurvivalDataset(
            covariates=self.covariates,
            treatment=self.treatment,
            time=np.asarray(time, dtype=np.float64),
            event=np.asarray(event, dtype=np.float64),
            instrument=self.instrument,
        )

    def subset(self, mask_or_index: np.ndarray) -> "SurvivalDataset":
        idx = np.asarray(mask_or_index)
        return SurvivalDataset(
            covariates=self.covariates[idx],
            treatment=self.treatment[idx],
            time=self.time[idx],
            event=self.event[idx],
            instrument=None if self.instrument is None else self.instrument[idx],
        )


@dataclass(frozen=True)
class OutcomeTransform:
    """Horizon-capped transform of the event time.

    ``rmst`` maps t to min(t, horizon) (restricted mean survival time scale);
    ``survival_indicator`` maps t to 1{t >= horizon}. Both are constant for
    t >= horizon, which is what makes censored units that reach the horizon
    fully informative.
    """

    kind: str
    horizon: float

    RMST = "rmst"
    SURVIVAL_INDICATOR = "survival_indicator"

    def __post_init__(self):
        if self.kind not in (self.RMST, self.SURVIVAL_INDICATOR):
            raise ValidationError(f"unknown transform kind {self.kind!r}")
        if not (self.horizon > 0):
            raise ValidationError("horizon must be positive")

    def __call__(self, t):
        return transform_outcome(self, t)


@dataclass(frozen=True)
class StudyConfig:
    """Imputation cap ``t_max`` and estimand horizon ``h`` with h <= t_max."""

    t_max: float
    horizon: float

    def __post_init__(self):
        if not (0 < self.horizon <= self.t_max):
            raise ValidationError(
                f"need 0 < horizon <= t_max, got horizon={self.horizon}, t_max={self.t_max}"
            )


@dataclass(frozen=True)
class SurvivalCurve:
    """Right-continuous nonincreasing step function S(t) on a time grid.

    ``values[i]`` is S(t) for t in [grid[i], grid[i+1]); S(t) = 1 for
    t < grid[0].
    """

    grid: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=np.float64)
        v = np.asarray(self.values, dtype=np.float64)
        if g.ndim != 1 or g.shape != v.shape or g.size == 0:
            raise ValidationError("grid and values must be equal-length 1-D arrays")
        if np.any(np.diff(g) <= 0):
            raise ValidationError("grid must be strictly increasing")
        if np.any(g < 0):
            raise ValidationError("grid times must be nonnegative")
        if np.any(v < -1e-12) or np.any(v > 1 + 1e-12):
            raise ValidationError("survival values must lie in [0, 1]")
        if np.any(np.diff(v) > 1e-12):
            raise ValidationError("survival values must be nonincreasing")
        object.__setattr__(self, "grid", _frozen(g, np.float64))
        object.__setattr__(self, "values", _frozen(np.clip(v, 0.0, 1.0), np.float64))

    def __call__(self, t) -> np.ndarray | float:
        """Evaluate S(t); right-continuous, 1 before the first grid point."""
        t_arr = np.asarray(t, dtype=np.float64)
        idx = np.searchsorted(self.grid, t_arr, side="right") - 1
        out = np.where(idx >= 0, self.values[np.maximum(idx, 0)], 1.0)
        return float(out) if np.isscalar(t) or t_arr.ndim == 0 else out

    def before(self, t) -> np.ndarray | float:
        """Left limit S(t-): the value just before t."""
        t_arr = np.asarray(t, dtype=np.float64)
        idx = np.searchsorted(self.grid, t_arr, side="left") - 1
        out = np.where(idx >= 0, self.values[np.maximum(idx, 0)], 1.0)
        return float(out) if np.isscalar(t) or t_arr.ndim == 0 else out


def transform_outcome(g: OutcomeTransform, t):
    """Apply the outcome transform to a time (scalar or array), t >= 0."""
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0):
        raise ValidationError("transform_outcome requires t >= 0")
    if g.kind == OutcomeTransform.RMST:
        out = np.minimum(t_arr, g.horizon)
    else:
        out = (t_arr >= g.horizon).astype(np.float64)
    return float(out) if np.isscalar(t) or t_arr.ndim == 0 else out


def effective_noncensoring(t_observed, event, h):
    """Whether a unit carries full information for the horizon-h estimand.

    Observed events always do. Censored units do exactly when their observed
    time already reached the horizon: nothing after h affects the estimand.
    Accepts scalars or arrays.
    """
    t_arr = np.asarray(t_observed, dtype=np.float64)
    if np.any(t_arr < 0) or not h > 0:
        raise ValidationError("need t_observed >= 0 and h > 0")
    d_arr = np.asarray(event)
    out = ((d_arr == 1) | (t_arr >= h)).astype(np.int64)
    return int(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class CsvSchema:
    """Column-name mapping for dataset CSV files.

    ``covariates=None`` means: every column not claimed by another role is a
    covariate, in file order.
    """

    time: str = "time"
    event: str = "event"
    treatment: str = "w"
    instrument: str | None = "z"
    covariates: tuple[str, ...] | None = None


def _parse_cell(raw: str, row: int, col: str) -> float:
    try:
        return float(raw)
    except ValueError:
        raise ValidationError(
            f"non-numeric cell {raw!r} at row {row}, column {col!r}"
        ) from None


def load_dataset(path, schema: CsvSchema = CsvSchema()) -> SurvivalDataset:
    """Read a dataset from a headered CSV file.

    Rows are reported 1-based (header excluded) in error messages. The
    instrument column is optional: it is picked up when present and the
    schema names it.
    """
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValidationError(f"{path}: empty file") from None
        rows = list(reader)
    if not rows:
        raise ValidationError(f"{path}: no data rows")

    col_idx = {name: i for i, name in enumerate(header)}
    for role, name in (("time", schema.time), ("event", schema.event),
                       ("treatment", schema.treatment)):
        if name not in col_idx:
            raise ValidationError(f"{path}: missing {role} column {name!r}")
    has_z = schema.instrument is not None and schema.instrument in col_idx
    claimed = {schema.time, schema.event, schema.treatment}
    if has_z:
        claimed.add(schema.instrument)
    if schema.covariates is None:
        cov_names = [c for c in header if c not in claimed]
    else:
        cov_names = list(schema.covariates)
        for c in cov_names:
            if c not in col_idx:
                raise ValidationError(f"{path}: missing covariate column {c!r}")
    if not cov_names:
        raise ValidationError(f"{path}: no covariate columns")

    n = len(rows)
    x = np.empty((n, len(cov_names)))
    t = np.empty(n)
    d = np.empty(n)
    w = np.empty(n)
    z = np.empty(n) if has_z else None
    for r, row in enumerate(rows, start=1):
        if len(row) != len(header):
            raise ValidationError(f"{path}: row {r} has {len(row)} cells, expected {len(header)}")
        for j, c in enumerate(cov_names):
            x[r - 1, j] = _parse_cell(row[col_idx[c]], r, c)
        t[r - 1] = _parse_cell(row[col_idx[schema.time]], r, schema.time)
        d[r - 1] = _parse_cell(row[col_idx[schema.event]], r, schema.event)
        w[r - 1] = _parse_cell(row[col_idx[schema.treatment]], r, schema.treatment)
        if has_z:
            z[r - 1] = _parse_cell(row[col_idx[schema.instrument]], r, schema.instrument)

    for name, arr in (("time", t),):
        neg = np.flatnonzero(arr < 0)
        if neg.size:
            raise ValidationError(
                f"{path}: negative time {arr[neg[0]]} at row {neg[0] + 1}, column {schema.time!r}"
            )
    for name, colname, arr in (
        ("event", schema.event, d),
        ("treatment", schema.treatment, w),
    ) + ((("instrument", schema.instrument, z),) if has_z else ()):
        bad = np.flatnonzero((arr != 0) & (arr != 1))
        if bad.size:
            raise ValidationError(
                f"{path}: non-binary {name} value {arr[bad[0]]} at row {bad[0] + 1}, "
                f"column {colname!r}"
            )
    return SurvivalDataset(covariates=x, treatment=w, time=t, event=d, instrument=z)


def _fmt(v: float) -> str:
    # repr round-trips doubles exactly and writes integers compactly
    if not np.isfinite(v):
        return repr(float(v))
    if v == int(v) and abs(v) < 1e15:
        return str(int(v))
    return repr(float(v))


def save_dataset(ds: SurvivalDataset, path, schema: CsvSchema = CsvSchema(),
                 covariate_names: list[str] | None = None) -> None:
    """Write a dataset as CSV, mirroring the ingestion format exactly."""
    path = Path(path)
    names = covariate_names or [f"x{j + 1}" for j in range(ds.p)]
    if len(names) != ds.p:
        raise ValidationError("covariate_names length must equal p")
    header = list(names) + [schema.treatment]
    if ds.instrument is not None:
        header.append(schema.instrument or "z")
    header += [schema.time, schema.event]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for i in range(ds.n):
            row = [_fmt(v) for v in ds.covariates[i]]
            row.append(_fmt(ds.treatment[i]))
            if ds.instrument is not None:
                row.append(_fmt(ds.instrument[i]))
            row.append(_fmt(ds.time[i]))
            row.append(_fmt(ds.event[i]))
            writer.writerow(row)


def apply_extra_censoring(
    ds: SurvivalDataset,
    driver: int,
    p0: float,
    p1: float,
    fraction: float,
    rng_seed: int,
    t_max: float | None = None,
    lower: float = 1.0,
) -> SurvivalDataset:
    """Inject covariate-driven additional censoring into a dataset.

    Each unit is selected with probability ``p0 + p1 * x[driver]`` (driver
    must be a binary column). Selected units are re-censored at a uniform
    draw on [lower, min(T_i, floor(fraction * t_max))], where ``t_max``
    defaults to the longest observed follow-up. Never increases a time and
    never turns a censored unit into an event.
    """
    if not (0 <= p0 and p0 + p1 <= 1 and 0 <= p0 + p1):
        raise ValidationError("need 0 <= p0 and 0 <= p0 + p1 <= 1")
    if not (0 < fraction <= 1):
        raise ValidationError("fraction must lie in (0, 1]")
    drv = ds.covariates[:, driver]
    if np.any((drv != 0) & (drv != 1)):
        raise ValidationError(f"driver column {driver} is not binary")
    if t_max is None:
        t_max = float(ds.time.max())
    cap = math.floor(fraction * t_max)
    rng = np.random.default_rng(rng_seed)
    take = rng.random(ds.n) < (p0 + p1 * drv)
    hi = np.minimum(ds.time, cap)
    lo = np.minimum(lower, hi)
    draws = lo + rng.random(ds.n) * (hi - lo)
    new_t = np.where(take, draws, ds.time)
    new_d = np.where(take, 0.0, ds.event)
    return ds.with_outcomes(new_t, new_d)
