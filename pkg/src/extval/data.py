"""Observed-data container for the non-nested two-sample design.

A dataset pools trial rows (s=1, with treatment and outcome) and
external target rows (s=0, covariates only). Treatment and outcome are
stored as float arrays with NaN on target rows so that a single row
index works across both samples.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, DimensionError


@dataclass(frozen=True)
class Dataset:
    """Pooled trial + target sample.

    Attributes
    ----------
    s : (n,) float array of 0/1 participation flags.
    a : (n,) float array; binary treatment on trial rows, NaN on target rows.
    y : (n,) float array; outcome on trial rows, NaN on target rows.
    x : (n, q) float design matrix with a leading constant-1 column.
    """

    s: np.ndarray
    a: np.ndarray
    y: np.ndarray
    x: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.s, dtype=float)
        a = np.asarray(self.a, dtype=float)
        y = np.asarray(self.y, dtype=float)
        x = np.asarray(self.x, dtype=float)
        object.__setattr__(self, "s", s)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)
        if x.ndim != 2:
            raise DimensionError("x must be a 2-d design matrix")
        n = x.shape[0]
        if not (s.shape == a.shape == y.shape == (n,)):
            raise DimensionError("s, a, y must be 1-d arrays matching x rows")
        if not np.all((s == 0) | (s == 1)):
            raise DataError("participation flag s must be 0 or 1")
        trial = s == 1
        if np.any(np.isnan(a[trial])) or np.any(np.isnan(y[trial])):
            raise DataError("trial rows (s=1) must carry treatment and outcome")
        if np.any(~np.isnan(a[~trial])) or np.any(~np.isnan(y[~trial])):
            raise DataError(
                "target rows (s=0) must not carry treatment or outcome; "
                "check the column role assignment"
            )
        if not np.all(np.isin(a[trial], (0.0, 1.0))):
            raise DataError("treatment must be binary 0/1 on trial rows")
        if not np.all(np.isfinite(x)):
            raise DataError("covariates must be finite")

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def q(self) -> int:
        return self.x.shape[1]

    @property
    def trial_mask(self) -> np.ndarray:
        return self.s == 1

    @property
    def target_mask(self) -> np.ndarray:
        return self.s == 0

    @property
    def n1(self) -> int:
        return int(np.sum(self.s == 1))

    @property
    def n2(self) -> int:
        return int(np.sum(self.s == 0))

    def require_both_samples(self):
        """Estimation entry points need at least one row of each sample."""
        if self.n1 < 1 or self.n2 < 1:
            raise DataError("need at least one trial row and one target row")

    def subset(self, idx: np.ndarray) -> "Dataset":
        """Row-indexed subset (used by the stratified bootstrap)."""
        return Dataset(self.s[idx], self.a[idx], self.y[idx], self.x[idx])


def make_dataset(
    x_trial: np.ndarray,
    a: np.ndarray,
    y: np.ndarray,
    x_target: np.ndarray,
) -> Dataset:
    """Assemble a Dataset from separate trial and target blocks."""
    x_trial = np.atleast_2d(np.asarray(x_trial, dtype=float))
    x_target = np.atleast_2d(np.asarray(x_target, dtype=float))
    if x_trial.shape[1] != x_target.shape[1]:
        raise DimensionError("trial and target covariate dimensions differ")
    n1, n2 = x_trial.shape[0], x_target.shape[0]
    nan = np.full(n2, np.nan)
    return Dataset(
        s=np.concatenate([np.ones(n1), np.zeros(n2)]),
        a=np.concatenate([np.asarray(a, dtype=float), nan]),
        y=np.concatenate([np.asarray(y, dtype=float), nan]),
        x=np.vstack([x_trial, x_target]),
    )
