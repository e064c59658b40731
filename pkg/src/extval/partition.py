"""Division of the target sample by representedness.

Target rows fall into three groups: rows matching known exclusion
criteria (unrepresented), rows whose participation-by-treatment score
products fall below a threshold delta (underrepresented), and the rest
(well-represented). The threshold is solved so that the well-represented
group is a requested share of the full target sample.

Group membership is smoothed through a normal CDF with a tiny scale so
that threshold estimation can be stacked into standard M-estimation
machinery; with the default scale of 1e-8 the smooth weights are
numerically indistinguishable from the hard indicator away from the
threshold.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np
from scipy.special import ndtr

from .data import Dataset
from .errors import (
    ConfigError,
    DataError,
    DegenerateScoresError,
    DimensionError,
    NotConvergedError,
    UnattainableProportionError,
)
from .glm import GlmFit, predict_mean

DEFAULT_EPSILON = 1e-8
MEAN_TOL = 1e-6
BISECT_ITER = 200
INTERVAL_FLOOR = 1e-10

_OPS = {
    "==": lambda v, c: v == c,
    "!=": lambda v, c: v != c,
    ">=": lambda v, c: v >= c,
    "<=": lambda v, c: v <= c,
    ">": lambda v, c: v > c,
    "<": lambda v, c: v < c,
    "in": lambda v, c: np.isin(v, np.asarray(c, dtype=float)),
}


@dataclass(frozen=True)
class Predicate:
    """Atomic comparison against one covariate column."""

    var: int
    op: str
    value: Union[float, Sequence[float]]

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        if not 0 <= self.var < x.shape[1]:
            raise ConfigError(f"exclusion rule references invalid covariate index {self.var}")
        if self.op not in _OPS:
            raise ConfigError(f"unknown comparator {self.op!r} in exclusion rule")
        try:
            return _OPS[self.op](x[:, self.var], self.value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"comparator {self.op!r} incompatible with value {self.value!r}") from exc


@dataclass(frozen=True)
class ExclusionRule:
    """Disjunction of conjunctive clauses over covariate columns.

    A row is excluded when every predicate of at least one clause holds.
    The empty rule excludes nothing.
    """

    clauses: tuple[tuple[Predicate, ...], ...] = ()

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        mask = np.zeros(x.shape[0], dtype=bool)
        for clause in self.clauses:
            m = np.ones(x.shape[0], dtype=bool)
            for pred in clause:
                m &= pred.evaluate(x)
            mask |= m
        return mask

    def to_json(self) -> list:
        return [
            [{"var": p.var, "op": p.op, "value": p.value} for p in clause]
            for clause in self.clauses
        ]

    @classmethod
    def from_json(cls, obj: list) -> "ExclusionRule":
        clauses = tuple(
            tuple(Predicate(int(p["var"]), str(p["op"]), p["value"]) for p in clause)
            for clause in obj
        )
        return cls(clauses)


@dataclass(frozen=True)
class SmoothInclusionParams:
    """Threshold delta and smoothing scale epsilon."""

    delta: float
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        if self.delta < 0:
            raise ConfigError("threshold delta must be nonnegative")
        if self.epsilon <= 0:
            raise ConfigError("smoothing scale epsilon must be positive")


@dataclass(frozen=True)
class PartitionResult:
    """Per-target-row labels and smooth weights plus solved threshold.

    ``labels`` holds 1/2/3 for unrepresented/underrepresented/well-
    represented. ``p_hat`` is (p1, p2, p3) where p1 is the labeled
    exclusion share, p3 the achieved mean smooth weight (= p3_star up to
    solver tolerance), and p2 the remainder; hard label counts can
    differ from p_hat by less than one row when the threshold sits
    inside a smoothing window.
    """

    labels: np.ndarray
    k_smooth: np.ndarray
    delta_star: float
    p_hat: tuple[float, float, float]
    p3_star: float
    epsilon: float

    @property
    def r1_mask(self) -> np.ndarray:
        return self.labels == 1

    @property
    def counts(self) -> tuple[int, int, int]:
        return tuple(int(np.sum(self.labels == g)) for g in (1, 2, 3))


def smooth_inclusion(hs, e1, e0, params: SmoothInclusionParams):
    """Smoothed indicator that both score products clear the threshold.

    Product of two normal CDFs centered at delta with scale epsilon,
    evaluated at hs*e1 and hs*e0. Scalar in, scalar out; arrays in,
    arrays out.
    """
    hs = np.asarray(hs, dtype=float)
    p1 = hs * np.asarray(e1, dtype=float)
    p0 = hs * np.asarray(e0, dtype=float)
    k = _smooth_k(p1, p0, params.delta, params.epsilon)
    return float(k) if np.ndim(k) == 0 else k


def _smooth_k(prod1, prod0, delta: float, epsilon: float):
    return ndtr((prod1 - delta) / epsilon) * ndtr((prod0 - delta) / epsilon)


def solve_threshold(
    target_scores,
    p3_star: float,
    epsilon: float = DEFAULT_EPSILON,
    r1_mask: np.ndarray | None = None,
) -> float:
    """Solve for the threshold delta* by bisection.

    ``target_scores`` is (hs, e1, e0), arrays over target rows. The
    objective is the mean smooth inclusion weight over all target rows,
    with excluded rows forced to zero; it is nonincreasing in delta.
    Plateau ties resolve to the smallest delta achieving mean <= p3*.
    """
    hs, e1, e0 = (np.asarray(v, dtype=float) for v in target_scores)
    m = hs.shape[0]
    if m == 0:
        raise DataError("no target rows to solve the threshold on")
    if r1_mask is None:
        r1_mask = np.zeros(m, dtype=bool)
    r1_mask = np.asarray(r1_mask, dtype=bool)
    prod1 = (hs * e1)[~r1_mask]
    prod0 = (hs * e0)[~r1_mask]
    p1_hat = float(np.mean(r1_mask))
    if not 0.0 < p3_star <= 1.0 - p1_hat + 1e-12:
        raise UnattainableProportionError(
            f"p3*={p3_star} not attainable with excluded share {p1_hat:.4f}"
        )
    if prod1.size == 0:
        raise UnattainableProportionError("all target rows are excluded")
    min_prods = np.minimum(prod1, prod0)
    if np.ptp(min_prods) == 0.0 and prod1.size > 1:
        # single plateau: solvable only at the full attainable mass
        if abs(p3_star - (1.0 - p1_hat)) > 1e-12:
            raise DegenerateScoresError(
                "all score products are identical; threshold is undetermined"
            )

    def mean_k(delta: float) -> float:
        return float(np.sum(_smooth_k(prod1, prod0, delta, epsilon))) / m

    lo = 0.0
    hi = float(min_prods.max()) + max(1.0, 50.0 * epsilon)
    f_lo = mean_k(lo) - p3_star
    if f_lo < -MEAN_TOL:
        raise UnattainableProportionError(
            f"attainable mass {f_lo + p3_star:.8f} below requested p3*={p3_star} "
            "(score products too close to zero for the smoothing scale)"
        )
    if f_lo <= 1e-9:
        return lo
    delta = None
    for _ in range(BISECT_ITER):
        mid = 0.5 * (lo + hi)
        f = mean_k(mid) - p3_star
        if abs(f) <= 1e-9:
            delta = mid
            break
        if f > 0:
            lo = mid
        else:
            hi = mid
        if hi - lo < INTERVAL_FLOOR and abs(f) <= MEAN_TOL:
            delta = mid
            break
    if delta is None:
        delta = 0.5 * (lo + hi)
    if abs(mean_k(delta) - p3_star) > MEAN_TOL:
        raise NotConvergedError("threshold bisection did not reach the mean tolerance")
    # plateau tie-break: smallest delta achieving mean <= p3*; keeps the
    # boundary row inside any finite-difference window of the threshold
    if not np.any(np.abs(min_prods - delta) <= 8.0 * epsilon):
        below = min_prods[min_prods < delta]
        if below.size:
            snapped = float(below.max()) + 4.0 * epsilon
            if abs(mean_k(snapped) - p3_star) <= MEAN_TOL:
                delta = snapped
    return float(delta)


def apply_exclusion_rules(data: Dataset, rules: ExclusionRule) -> np.ndarray:
    """Boolean mask over target rows: true where any clause matches."""
    return rules.evaluate(data.x[data.target_mask])


def _resolve_r1_mask(data: Dataset, rules) -> np.ndarray:
    n2 = data.n2
    if rules is None:
        return np.zeros(n2, dtype=bool)
    if isinstance(rules, ExclusionRule):
        return apply_exclusion_rules(data, rules)
    mask = np.asarray(rules, dtype=bool)
    if mask.shape != (n2,):
        raise DimensionError("exclusion mask must align with target rows")
    return mask


def partition_population(
    data: Dataset,
    sampling_fit: GlmFit,
    propensity_fit: GlmFit,
    rules,
    p3_star: float,
    epsilon: float = DEFAULT_EPSILON,
) -> PartitionResult:
    """Label every target row and solve the inclusion threshold.

    ``rules`` may be an ExclusionRule over covariate columns, a boolean
    mask aligned with the target rows (for criteria expressed outside
    the model covariates), or None.
    """
    data.require_both_samples()
    for fit in (sampling_fit, propensity_fit):
        if not fit.converged:
            raise NotConvergedError("partition requires converged score fits")
    x_t = data.x[data.target_mask]
    hs = predict_mean(sampling_fit, x_t)
    e1 = predict_mean(propensity_fit, x_t)
    e0 = 1.0 - e1
    r1 = _resolve_r1_mask(data, rules)
    delta = solve_threshold((hs, e1, e0), p3_star, epsilon, r1)

    k = _smooth_k(hs * e1, hs * e0, delta, epsilon)
    k = np.where(r1, 0.0, k)
    hard = (hs * e1 >= delta) & (hs * e0 >= delta) & ~r1
    labels = np.full(data.n2, 2, dtype=np.int8)
    labels[r1] = 1
    labels[hard] = 3

    p1 = float(np.mean(r1))
    p3 = float(np.mean(k))
    return PartitionResult(
        labels=labels,
        k_smooth=k,
        delta_star=delta,
        p_hat=(p1, 1.0 - p1 - p3, p3),
        p3_star=p3_star,
        epsilon=epsilon,
    )
