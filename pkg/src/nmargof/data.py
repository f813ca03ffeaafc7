"""Observed-data container: covariates, partially observed outcome, response flag."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import InvalidInputError


@dataclass(frozen=True)
class Observation:
    x: np.ndarray
    y: Optional[float]
    r: int

    def __post_init__(self):
        if self.r not in (0, 1):
            raise InvalidInputError(f"response indicator must be 0 or 1, got {self.r!r}")
        if (self.y is None) != (self.r == 0):
            raise InvalidInputError("outcome must be present exactly when r == 1")
        if not np.all(np.isfinite(self.x)):
            raise InvalidInputError("covariates must be finite")


@dataclass
class Dataset:
    """Rows of ``(x, y, r)`` held column-wise.

    Parameters
    ----------
    X : ndarray, shape (n, d)
        Fully observed covariates.
    y : ndarray, shape (n,)
        Outcome, ``nan`` where missing.
    r : ndarray, shape (n,)
        Response indicator, 1 iff ``y`` is observed.
    prop_cols, out_cols : sequence of int
        Columns of ``X`` entering the propensity and outcome models.
    names : sequence of str, optional
        Column labels for ``X``.
    """

    X: np.ndarray
    y: np.ndarray
    r: np.ndarray
    prop_cols: Sequence[int]
    out_cols: Sequence[int]
    names: Sequence[str] = field(default=())

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.y = np.asarray(self.y, dtype=float).reshape(-1)
        self.r = np.asarray(self.r).reshape(-1).astype(np.int8)
        self.prop_cols = tuple(int(j) for j in self.prop_cols)
        self.out_cols = tuple(int(j) for j in self.out_cols)
        n, d = self.X.shape
        if self.y.shape[0] != n or self.r.shape[0] != n:
            raise InvalidInputError("X, y and r must have the same number of rows")
        if not np.isin(self.r, (0, 1)).all():
            raise InvalidInputError("r must be binary")
        if not np.all(np.isfinite(self.X)):
            raise InvalidInputError("covariates must be fully observed and finite")
        observed = np.isfinite(self.y)
        if np.any(observed != (self.r == 1)):
            raise InvalidInputError("y must be present if and only if r == 1")
        for j in self.prop_cols + self.out_cols:
            if not 0 <= j < d:
                raise InvalidInputError(f"column index {j} outside [0, {d})")
        if not self.names:
            self.names = tuple(f"x{j + 1}" for j in range(d))
        else:
            self.names = tuple(self.names)
            if len(self.names) != d:
                raise InvalidInputError("names must label every covariate column")

    @classmethod
    def from_rows(cls, rows: Iterable[Observation], prop_cols, out_cols, names=()):
        rows = list(rows)
        if not rows:
            raise InvalidInputError("empty dataset")
        X = np.array([np.asarray(o.x, dtype=float) for o in rows])
        y = np.array([np.nan if o.y is None else o.y for o in rows], dtype=float)
        r = np.array([o.r for o in rows])
        return cls(X, y, r, prop_cols, out_cols, names)

    def __len__(self):
        return self.X.shape[0]

    def __iter__(self):
        for i in range(len(self)):
            yield self.row(i)

    def row(self, i) -> Observation:
        yi = None if self.r[i] == 0 else float(self.y[i])
        return Observation(self.X[i].copy(), yi, int(self.r[i]))

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def n_missing(self):
        return int(self.n - self.r.sum())

    @property
    def missing_rate(self):
        return self.n_missing / self.n

    @property
    def prop_design(self):
        """``r(x)``: the propensity covariates, shape (n, m)."""
        return self.X[:, list(self.prop_cols)]

    @property
    def outcome_design(self):
        """Outcome covariates with a leading intercept column, shape (n, q)."""
        return np.column_stack([np.ones(self.n), self.X[:, list(self.out_cols)]])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.X[idx], self.y[idx], self.r[idx], self.prop_cols,
                       self.out_cols, self.names)

    def check_instrument(self):
        """Warn unless some outcome covariate is excluded from the propensity model."""
        if not set(self.out_cols) - set(self.prop_cols):
            warnings.warn("no outcome covariate is excluded from the propensity model; "
                          "gamma may not be identified", stacklevel=2)
            return False
        return True

    def canonical_order(self):
        """Row permutation that sorts rows by content; ties keep input order."""
        y_key = np.where(self.r == 1, self.y, -np.inf)
        keys = [y_key, self.r] + [self.X[:, j] for j in range(self.X.shape[1] - 1, -1, -1)]
        return np.lexsort(keys)
