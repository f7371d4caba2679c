"""Observed-data representation, outcome bounding, and CSV ingestion.

A trial row is (covariates, arm indicator, missingness indicator, outcome).
The outcome is defined exactly when the missingness indicator is one; rows
with an unobserved outcome carry an explicit absent state rather than a
sentinel value.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "ObservationRecord",
    "Dataset",
    "OutcomeBounds",
    "DataError",
    "load_csv",
    "write_csv",
    "bound_outcomes",
    "back_transform",
]

# Transformed outcomes are clipped into this open interval so that logits of
# fitted means stay finite downstream.
UNIT_CLIP_LO = 0.0005
UNIT_CLIP_HI = 0.9995

# Auto bounds widen the observed [min, max] by this fraction on each side.
AUTO_WIDEN = 0.001


class DataError(ValueError):
    """Raised for malformed input files or degenerate datasets."""


@dataclass(frozen=True)
class ObservationRecord:
    """One trial row: covariates, arm, missingness indicator, outcome.

    ``y`` is ``None`` exactly when ``m == 0``.
    """

    w: tuple[float, ...]
    a: int
    m: int
    y: float | None

    def __post_init__(self):
        if self.a not in (0, 1):
            raise DataError(f"non-binary arm value {self.a!r}")
        if self.m not in (0, 1):
            raise DataError(f"non-binary missingness value {self.m!r}")
        if self.m == 1 and self.y is None:
            raise DataError("outcome absent on a row with m = 1")
        if self.m == 0 and self.y is not None:
            raise DataError("outcome present on a row with m = 0")


class Dataset:
    """An immutable column-typed collection of observation records.

    Internally stores numpy arrays; the missing-outcome slots of ``_y`` are
    NaN but are never exposed: record views return ``None`` and the ``y``
    property returns a masked copy.
    """

    def __init__(self, w, a, m, y, covariate_names: Sequence[str]):
        w = np.asarray(w, dtype=float)
        a = np.asarray(a, dtype=int)
        m = np.asarray(m, dtype=int)
        y = np.asarray(y, dtype=float)
        if w.ndim != 2:
            raise DataError("covariate matrix must be 2-dimensional")
        n, p = w.shape
        if n < 1:
            raise DataError("dataset must contain at least one record")
        if len(covariate_names) != p:
            raise DataError("covariate_names length does not match covariate dimension")
        if a.shape != (n,) or m.shape != (n,) or y.shape != (n,):
            raise DataError("column length mismatch")
        if not np.isin(a, (0, 1)).all():
            raise DataError("non-binary arm")
        if not np.isin(m, (0, 1)).all():
            raise DataError("non-binary missingness")
        obs = m == 1
        if np.isnan(y[obs]).any():
            raise DataError("outcome absent on a row with m = 1")
        if not np.isnan(y[~obs]).all():
            raise DataError("outcome present on a row with m = 0")
        if not np.isfinite(w).all():
            raise DataError("covariates must be complete and finite")
        self._w = w
        self._a = a
        self._m = m
        self._y = y
        self.covariate_names = list(covariate_names)
        for arr in (self._w, self._a, self._m, self._y):
            arr.setflags(write=False)

    @property
    def n(self) -> int:
        return self._w.shape[0]

    @property
    def p(self) -> int:
        return self._w.shape[1]

    @property
    def w(self) -> np.ndarray:
        return self._w

    @property
    def a(self) -> np.ndarray:
        return self._a

    @property
    def m(self) -> np.ndarray:
        return self._m

    @property
    def y_filled(self) -> np.ndarray:
        """Outcomes with missing slots replaced by 0.0.

        Every estimator multiplies the outcome by ``a * m``, so the fill value
        never contributes.
        """
        return np.where(self._m == 1, self._y, 0.0)

    @property
    def y_observed(self) -> np.ndarray:
        """Outcomes of the m = 1 rows, in row order."""
        return self._y[self._m == 1]

    @property
    def records(self) -> list[ObservationRecord]:
        return [
            ObservationRecord(
                w=tuple(self._w[i]),
                a=int(self._a[i]),
                m=int(self._m[i]),
                y=float(self._y[i]) if self._m[i] == 1 else None,
            )
            for i in range(self.n)
        ]

    @classmethod
    def from_records(cls, records: Iterable[ObservationRecord], covariate_names: Sequence[str]) -> "Dataset":
        records = list(records)
        if not records:
            raise DataError("dataset must contain at least one record")
        p = len(records[0].w)
        if any(len(r.w) != p for r in records):
            raise DataError("all records must share the covariate dimension")
        w = np.array([r.w for r in records], dtype=float)
        a = np.array([r.a for r in records])
        m = np.array([r.m for r in records])
        y = np.array([r.y if r.y is not None else np.nan for r in records], dtype=float)
        return cls(w, a, m, y, covariate_names)

    def with_arm(self, indicator: np.ndarray) -> "Dataset":
        """Return a copy with the arm column replaced by ``indicator``."""
        return Dataset(self._w, indicator, self._m, self._y, self.covariate_names)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.covariate_names == other.covariate_names
            and np.array_equal(self._w, other._w)
            and np.array_equal(self._a, other._a)
            and np.array_equal(self._m, other._m)
            and np.array_equal(self._y, other._y, equal_nan=True)
        )


@dataclass(frozen=True)
class OutcomeBounds:
    """Affine bounds mapping raw outcomes onto [0, 1]."""

    lo: float
    hi: float
    source: str  # {"user_supplied", "data_min_max", "already_unit"}

    def __post_init__(self):
        if not self.lo < self.hi:
            raise DataError(
                "degenerate outcome bounds: lo must be strictly below hi "
                "(a constant outcome makes the estimand degenerate)"
            )
        if self.source not in ("user_supplied", "data_min_max", "already_unit"):
            raise DataError(f"unknown bounds source {self.source!r}")


UNIT_BOUNDS = OutcomeBounds(0.0, 1.0, "already_unit")


def load_csv(
    path,
    arm_col: str,
    outcome_col: str,
    covariate_cols: Sequence[str],
    miss_col: str | None = None,
    derive_missing: bool = False,
    arm_value: str | None = None,
) -> Dataset:
    """Read a trial dataset from an RFC-4180-style CSV file.

    Missingness comes from ``miss_col`` when given; otherwise
    ``derive_missing`` must be set and a blank outcome cell marks m = 0.
    ``arm_value`` recodes a multi-arm column into the indicator of one arm;
    without it the arm column must already be binary 0/1.
    """
    if miss_col is None and not derive_missing:
        raise DataError("either miss_col or derive_missing must be specified")
    if not covariate_cols:
        raise DataError("at least one covariate column is required")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataError("empty file: header row required")
        needed = [arm_col, outcome_col, *covariate_cols]
        if miss_col is not None:
            needed.append(miss_col)
        for col in needed:
            if col not in reader.fieldnames:
                raise DataError(f"missing column {col!r}")
        w_rows, a_rows, m_rows, y_rows = [], [], [], []
        for lineno, row in enumerate(reader, start=2):
            a_rows.append(_parse_arm(row[arm_col], arm_value, lineno, arm_col))
            wvals = []
            for col in covariate_cols:
                cell = (row[col] or "").strip()
                if cell == "":
                    raise DataError(
                        f"row {lineno}, column {col!r}: missing covariate cell "
                        "(covariate imputation is out of scope)"
                    )
                wvals.append(_parse_float(cell, lineno, col))
            w_rows.append(wvals)
            ycell = (row[outcome_col] or "").strip()
            if miss_col is not None:
                mcell = (row[miss_col] or "").strip()
                if mcell not in ("0", "1"):
                    raise DataError(
                        f"row {lineno}, column {miss_col!r}: non-binary missingness value {mcell!r}"
                    )
                m = int(mcell)
            else:
                m = 0 if ycell == "" else 1
            m_rows.append(m)
            if m == 1:
                if ycell == "":
                    raise DataError(
                        f"row {lineno}, column {outcome_col!r}: outcome blank but m = 1"
                    )
                y_rows.append(_parse_float(ycell, lineno, outcome_col))
            else:
                y_rows.append(math.nan)
    if not w_rows:
        raise DataError("file contains no data rows")
    return Dataset(w_rows, a_rows, m_rows, y_rows, list(covariate_cols))


def _parse_arm(cell: str, arm_value: str | None, lineno: int, col: str) -> int:
    cell = (cell or "").strip()
    if arm_value is not None:
        return 1 if cell == arm_value else 0
    if cell not in ("0", "1"):
        raise DataError(f"row {lineno}, column {col!r}: non-binary arm value {cell!r}")
    return int(cell)


def _parse_float(cell: str, lineno: int, col: str) -> float:
    try:
        v = float(cell)
    except ValueError:
        raise DataError(f"row {lineno}, column {col!r}: malformed value {cell!r}") from None
    if not math.isfinite(v):
        raise DataError(f"row {lineno}, column {col!r}: non-finite value {cell!r}")
    return v


def write_csv(d: Dataset, path, arm_col: str = "arm", outcome_col: str = "outcome") -> None:
    """Write a dataset back to CSV with blank cells for missing outcomes."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([arm_col, outcome_col, *d.covariate_names])
        yf = d.y_filled
        for i in range(d.n):
            ycell = repr(float(yf[i])) if d.m[i] == 1 else ""
            writer.writerow([int(d.a[i]), ycell, *[repr(float(v)) for v in d.w[i]]])


def bound_outcomes(d: Dataset, bounds: OutcomeBounds | str = "auto") -> tuple[Dataset, OutcomeBounds]:
    """Map observed outcomes onto (0, 1) by an affine transform.

    With ``"auto"`` the bounds are the observed min/max among m = 1 rows,
    widened by 0.1% on each side. Transformed values are clipped into
    [0.0005, 0.9995] so logits of fitted means stay finite (identity for
    ``already_unit`` bounds).
    """
    obs = d.m == 1
    if not obs.any():
        raise DataError("all outcomes are missing; nothing to bound")
    yobs = d.y_observed
    if isinstance(bounds, str):
        if bounds != "auto":
            raise DataError(f"unknown bounds spec {bounds!r}")
        lo = float(yobs.min())
        hi = float(yobs.max())
        if lo == hi:
            raise DataError(
                "constant observed outcome: the estimand is degenerate, "
                "supply explicit bounds if this is intended"
            )
        span = hi - lo
        bounds = OutcomeBounds(lo - AUTO_WIDEN * span, hi + AUTO_WIDEN * span, "data_min_max")
    if bounds.source == "already_unit":
        if yobs.min() < 0.0 or yobs.max() > 1.0:
            raise DataError("already_unit bounds but observed outcomes leave [0, 1]")
        return d, bounds
    if yobs.min() < bounds.lo or yobs.max() > bounds.hi:
        raise DataError("observed outcomes fall outside the supplied bounds")
    scaled = (d.y_filled - bounds.lo) / (bounds.hi - bounds.lo)
    scaled = np.clip(scaled, UNIT_CLIP_LO, UNIT_CLIP_HI)
    ynew = np.where(obs, scaled, np.nan)
    return Dataset(d.w, d.a, d.m, ynew, d.covariate_names), bounds


def back_transform(value, bounds: OutcomeBounds):
    """Map a value on the bounded [0, 1] scale back to the raw outcome scale."""
    return bounds.lo + np.asarray(value) * (bounds.hi - bounds.lo)
