"""Weighting and augmented-weighting estimators with stacked-equation
variance.

All point estimators are self-normalized (Hajek) weighted means, so
they are invariant to rescaling the weights. Variances come from
M-estimation: every nuisance fit contributes its score rows, the
threshold contributes its defining equation, and the targets of
inference enter as weighted-mean residual rows. The asymptotic variance
of the contrast eta'Xi is eta' A^-1 B A^-T eta / n with A the Jacobian
of the mean estimating function and B its second moment; A is estimated
by central finite differences because the smoothed inclusion weight has
no convenient closed-form derivative at machine-small smoothing scales.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import expit

from .data import Dataset
from .errors import (
    ConfigError,
    NegativeVarianceError,
    NotConvergedError,
    NumericalError,
    SingularSystemError,
    StationarityError,
    ZeroWeightError,
)
from .glm import GlmFamily, GlmFit, predict_mean
from .partition import PartitionResult, _smooth_k

Z95 = 1.96
FD_REL_STEP = 1e-5
FD_ABS_FLOOR = 1e-7
STATIONARITY_TOL = 1e-5


@dataclass(frozen=True)
class EstimateReport:
    """Point estimate with variance, CI and provenance tags."""

    estimate: float
    variance: float
    ci_low: float
    ci_high: float
    method: str                 # "ipw" | "aipw"
    trimmed: bool
    variance_method: str        # "sandwich" | "bootstrap" | "none"
    n1: int
    n2: int
    p_hat: tuple[float, float, float] | None = None
    delta_star: float | None = None

    @property
    def se(self) -> float:
        return float(np.sqrt(self.variance)) if np.isfinite(self.variance) else float("nan")

    def to_dict(self) -> dict:
        return {
            "estimate": self.estimate,
            "se": self.se,
            "ci": [self.ci_low, self.ci_high],
            "method": self.method,
            "trimmed": self.trimmed,
            "variance_method": self.variance_method,
            "n1": self.n1,
            "n2": self.n2,
            "p_hat": list(self.p_hat) if self.p_hat is not None else None,
            "delta_star": self.delta_star,
        }


@dataclass(frozen=True)
class StackedSystem:
    """Estimating-function system evaluated around a plug-in solution.

    ``psi`` maps a parameter vector to the (n, dim) matrix of per-row
    estimating-function values; ``eta`` is the contrast whose variance
    is wanted.
    """

    xi: np.ndarray
    eta: np.ndarray
    psi: Callable[[np.ndarray], np.ndarray]
    labels: tuple[str, ...] = field(default=())

    @property
    def dim(self) -> int:
        return self.xi.shape[0]


def participation_weights(
    data: Dataset, sampling_fit: GlmFit, propensity_fit: GlmFit
) -> tuple[np.ndarray, np.ndarray]:
    """Arm-specific transport weights over all rows.

    w_a = 1{s=1, a} * (1 - hs) / (hs * e_a); identically zero on target
    rows. Raises when a trial row's score underflows to zero.
    """
    hs = predict_mean(sampling_fit, data.x)
    e1 = predict_mean(propensity_fit, data.x)
    trial = data.trial_mask
    if np.any(hs[trial] <= 0.0) or np.any(e1[trial] <= 0.0) or np.any(e1[trial] >= 1.0):
        raise ZeroWeightError("sampling or propensity score is numerically 0/1 on a trial row")
    a = np.where(trial, data.a, 0.0)
    base = np.where(trial, (1.0 - hs) / hs, 0.0)
    w1 = np.where(trial & (a == 1), base / e1, 0.0)
    w0 = np.where(trial & (a == 0), base / (1.0 - e1), 0.0)
    if not (np.all(np.isfinite(w1)) and np.all(np.isfinite(w0))):
        raise ZeroWeightError("non-finite transport weight")
    return w1, w0


def _hajek(values: np.ndarray, weights: np.ndarray, what: str) -> float:
    total = float(np.sum(weights))
    if total <= 0.0:
        raise ZeroWeightError(f"total weight for {what} is not positive")
    return float(np.sum(weights * values) / total)


def _k_all_rows(data: Dataset, hs, e1, partition: PartitionResult) -> np.ndarray:
    """Smooth inclusion weight on every row; exclusion forcing applies to
    target rows only (trial rows are study-eligible by construction)."""
    k = _smooth_k(hs * e1, hs * (1.0 - e1), partition.delta_star, partition.epsilon)
    k[np.flatnonzero(data.target_mask)[partition.r1_mask]] = 0.0
    return k


def _filled(data: Dataset) -> tuple[np.ndarray, np.ndarray]:
    a = np.where(data.trial_mask, data.a, 0.0)
    y = np.where(data.trial_mask, data.y, 0.0)
    return a, y


def _outcome_link(outcome_fits: tuple[GlmFit, GlmFit]):
    fam = outcome_fits[0].family
    if outcome_fits[1].family is not fam:
        raise ConfigError("outcome fits must share a family")
    if fam is GlmFamily.BERNOULLI_LOGIT:
        return lambda eta: expit(eta)
    return lambda eta: eta


def _check_fits(*fits: GlmFit):
    for fit in fits:
        if not fit.converged:
            raise NotConvergedError("estimator requires converged component fits")


# ---------------------------------------------------------------------------
# point estimators
# ---------------------------------------------------------------------------

def hajek_ipw(
    data: Dataset,
    sampling_fit: GlmFit,
    propensity_fit: GlmFit,
    variance: str = "sandwich",
) -> EstimateReport:
    """Self-normalized weighting estimator of the target-population ATE."""
    data.require_both_samples()
    _check_fits(sampling_fit, propensity_fit)
    w1, w0 = participation_weights(data, sampling_fit, propensity_fit)
    _, y = _filled(data)
    est = _hajek(y, w1, "treated arm") - _hajek(y, w0, "control arm")
    var, lo, hi = _maybe_sandwich(
        variance, est,
        lambda: build_stacked_system("ipw", data, sampling_fit, propensity_fit),
    )
    return EstimateReport(est, var, lo, hi, "ipw", False, variance, data.n1, data.n2)


def trimmed_ipw(
    data: Dataset,
    sampling_fit: GlmFit,
    propensity_fit: GlmFit,
    partition: PartitionResult,
    variance: str = "sandwich",
) -> EstimateReport:
    """Weighting estimator for the well-represented group."""
    data.require_both_samples()
    _check_fits(sampling_fit, propensity_fit)
    w1, w0 = participation_weights(data, sampling_fit, propensity_fit)
    hs = predict_mean(sampling_fit, data.x)
    e1 = predict_mean(propensity_fit, data.x)
    k = _k_all_rows(data, hs, e1, partition)
    _, y = _filled(data)
    mu31 = _hajek(y, k * w1, "trimmed treated arm")
    mu30 = _hajek(y, k * w0, "trimmed control arm")
    est = mu31 - mu30
    var, lo, hi = _maybe_sandwich(
        variance, est,
        lambda: build_stacked_system("ipw", data, sampling_fit, propensity_fit, partition=partition),
    )
    return EstimateReport(
        est, var, lo, hi, "ipw", True, variance, data.n1, data.n2,
        p_hat=partition.p_hat, delta_star=partition.delta_star,
    )


def augmented_ipw(
    data: Dataset,
    sampling_fit: GlmFit,
    propensity_fit: GlmFit,
    outcome_fits: tuple[GlmFit, GlmFit],
    variance: str = "sandwich",
) -> EstimateReport:
    """Doubly robust estimator: weighted residuals plus an outcome-model
    projection averaged over all target rows."""
    data.require_both_samples()
    _check_fits(sampling_fit, propensity_fit, *outcome_fits)
    w1, w0 = participation_weights(data, sampling_fit, propensity_fit)
    link = _outcome_link(outcome_fits)
    m1 = link(data.x @ outcome_fits[0].coefficients)
    m0 = link(data.x @ outcome_fits[1].coefficients)
    a, y = _filled(data)
    resid = data.s * (y - a * m1 - (1.0 - a) * m0)
    target = data.target_mask
    augmentation = float(np.mean((m1 - m0)[target]))
    est = _hajek(resid, w1, "treated arm") - _hajek(resid, w0, "control arm") + augmentation
    var, lo, hi = _maybe_sandwich(
        variance, est,
        lambda: build_stacked_system("aipw", data, sampling_fit, propensity_fit, outcome_fits),
    )
    return EstimateReport(est, var, lo, hi, "aipw", False, variance, data.n1, data.n2)


def trimmed_aipw(
    data: Dataset,
    sampling_fit: GlmFit,
    propensity_fit: GlmFit,
    outcome_fits: tuple[GlmFit, GlmFit],
    partition: PartitionResult,
    variance: str = "sandwich",
) -> EstimateReport:
    """Augmented weighting estimator for the well-represented group."""
    data.require_both_samples()
    _check_fits(sampling_fit, propensity_fit, *outcome_fits)
    w1, w0 = participation_weights(data, sampling_fit, propensity_fit)
    hs = predict_mean(sampling_fit, data.x)
    e1 = predict_mean(propensity_fit, data.x)
    k = _k_all_rows(data, hs, e1, partition)
    link = _outcome_link(outcome_fits)
    m1 = link(data.x @ outcome_fits[0].coefficients)
    m0 = link(data.x @ outcome_fits[1].coefficients)
    a, y = _filled(data)
    resid = data.s * (y - a * m1 - (1.0 - a) * m0)
    v1 = _hajek(resid, k * w1, "trimmed treated arm")
    v2 = _hajek(resid, k * w0, "trimmed control arm")
    v3 = _hajek(m1 - m0, k * (1.0 - data.s), "trimmed target mean")
    est = v1 - v2 + v3
    var, lo, hi = _maybe_sandwich(
        variance, est,
        lambda: build_stacked_system(
            "aipw", data, sampling_fit, propensity_fit, outcome_fits, partition
        ),
    )
    return EstimateReport(
        est, var, lo, hi, "aipw", True, variance, data.n1, data.n2,
        p_hat=partition.p_hat, delta_star=partition.delta_star,
    )


def _maybe_sandwich(variance: str, est: float, system_factory) -> tuple[float, float, float]:
    if variance == "none":
        return float("nan"), float("nan"), float("nan")
    if variance != "sandwich":
        raise ConfigError(f"unknown variance method {variance!r} (use bootstrap_ci for bootstrap)")
    var = sandwich_variance(system_factory())
    half = Z95 * float(np.sqrt(var))
    return var, est - half, est + half


# ---------------------------------------------------------------------------
# stacked estimating equations
# ---------------------------------------------------------------------------

def build_stacked_system(
    kind: str,
    data: Dataset,
    sampling_fit: GlmFit,
    propensity_fit: GlmFit,
    outcome_fits: tuple[GlmFit, GlmFit] | None = None,
    partition: PartitionResult | None = None,
) -> StackedSystem:
    """Stack the estimating functions of the full pipeline.

    Row blocks, in order: sampling-score rows, propensity-score rows
    (omitted for a fixed propensity), outcome-score rows (aipw only),
    the threshold row (trimmed only), then the weighted-mean rows whose
    contrast is the treatment effect. The plug-in solution assembled
    from the component fits must zero the mean estimating function to
    1e-5 per coordinate; otherwise the components are inconsistent and
    StationarityError is raised.
    """
    if kind not in ("ipw", "aipw"):
        raise ConfigError(f"unknown system kind {kind!r}")
    if kind == "aipw" and outcome_fits is None:
        raise ConfigError("aipw system requires outcome fits")
    data.require_both_samples()
    _check_fits(sampling_fit, propensity_fit, *(outcome_fits or ()))

    x = data.x
    n, q = x.shape
    s = data.s
    a, y = _filled(data)
    trial = data.trial_mask
    fixed_prop = propensity_fit.fixed
    trimmed = partition is not None
    # a boundary threshold (p3* at the attainable mass) is pinned, not
    # estimated: its equation holds identically and carries no noise
    estimate_delta = trimmed and partition.delta_star > 0.0

    if trimmed:
        r1_full = np.zeros(n, dtype=bool)
        r1_full[np.flatnonzero(data.target_mask)[partition.r1_mask]] = True
        p3_star = partition.p3_star
        epsilon = partition.epsilon
    else:
        r1_full = np.zeros(n, dtype=bool)

    link = _outcome_link(outcome_fits) if outcome_fits is not None else None

    blocks: list[tuple[str, int]] = [("sampling", q)]
    if not fixed_prop:
        blocks.append(("propensity", q))
    if kind == "aipw":
        blocks += [("outcome1", q), ("outcome0", q)]
    if estimate_delta:
        blocks.append(("threshold", 1))
    tail = ("mu31", "mu30") if kind == "ipw" else ("v1", "v2", "v3")
    blocks += [(t, 1) for t in tail]

    labels: list[str] = []
    for name, width in blocks:
        labels += [name] if width == 1 else [f"{name}[{i}]" for i in range(width)]

    slices: dict[str, slice] = {}
    offset = 0
    for name, width in blocks:
        slices[name] = slice(offset, offset + width)
        offset += width
    dim = offset

    fixed_e1 = predict_mean(propensity_fit, x) if fixed_prop else None

    def psi(xi: np.ndarray) -> np.ndarray:
        beta = xi[slices["sampling"]]
        hs = expit(x @ beta)
        e1 = fixed_e1 if fixed_prop else expit(x @ xi[slices["propensity"]])
        e0 = 1.0 - e1
        out = np.empty((n, dim))
        out[:, slices["sampling"]] = (s - hs)[:, None] * x
        if not fixed_prop:
            out[:, slices["propensity"]] = (s * (a - e1))[:, None] * x
        if kind == "aipw":
            m1 = link(x @ xi[slices["outcome1"]])
            m0 = link(x @ xi[slices["outcome0"]])
            out[:, slices["outcome1"]] = (s * a * (y - m1))[:, None] * x
            out[:, slices["outcome0"]] = (s * (1.0 - a) * (y - m0))[:, None] * x
        if trimmed:
            delta = xi[slices["threshold"]][0] if estimate_delta else partition.delta_star
            k = _smooth_k(hs * e1, hs * e0, delta, epsilon)
            k = np.where(r1_full, 0.0, k)
            if estimate_delta:
                out[:, slices["threshold"]] = ((1.0 - s) * (k - p3_star))[:, None]
        else:
            k = 1.0
        base = np.where(trial, (1.0 - hs) / hs, 0.0)
        w1 = np.where(trial & (a == 1), base / e1, 0.0)
        w0 = np.where(trial & (a == 0), base / e0, 0.0)
        if kind == "ipw":
            out[:, slices["mu31"]] = (k * w1 * (y - xi[slices["mu31"]][0]))[:, None]
            out[:, slices["mu30"]] = (k * w0 * (y - xi[slices["mu30"]][0]))[:, None]
        else:
            resid = s * (y - a * m1 - (1.0 - a) * m0)
            out[:, slices["v1"]] = (k * w1 * (resid - xi[slices["v1"]][0]))[:, None]
            out[:, slices["v2"]] = (k * w0 * (resid - xi[slices["v2"]][0]))[:, None]
            out[:, slices["v3"]] = (k * (1.0 - s) * (m1 - m0 - xi[slices["v3"]][0]))[:, None]
        return out

    # plug-in solution from the component estimates
    parts = [np.asarray(sampling_fit.coefficients, dtype=float)]
    if not fixed_prop:
        parts.append(np.asarray(propensity_fit.coefficients, dtype=float))
    if kind == "aipw":
        parts += [
            np.asarray(outcome_fits[0].coefficients, dtype=float),
            np.asarray(outcome_fits[1].coefficients, dtype=float),
        ]
    hs_hat = predict_mean(sampling_fit, x)
    e1_hat = predict_mean(propensity_fit, x)
    w1_hat, w0_hat = participation_weights(data, sampling_fit, propensity_fit)
    k_hat = _k_all_rows(data, hs_hat, e1_hat, partition) if trimmed else np.ones(n)
    if estimate_delta:
        parts.append(np.array([partition.delta_star]))
    if kind == "ipw":
        tails = [_hajek(y, k_hat * w1_hat, "mu31"), _hajek(y, k_hat * w0_hat, "mu30")]
    else:
        m1_hat = link(x @ outcome_fits[0].coefficients)
        m0_hat = link(x @ outcome_fits[1].coefficients)
        resid_hat = s * (y - a * m1_hat - (1.0 - a) * m0_hat)
        if trimmed:
            v3_hat = _hajek(m1_hat - m0_hat, k_hat * (1.0 - s), "v3")
        else:
            v3_hat = float(np.mean((m1_hat - m0_hat)[data.target_mask]))
        tails = [
            _hajek(resid_hat, k_hat * w1_hat, "v1"),
            _hajek(resid_hat, k_hat * w0_hat, "v2"),
            v3_hat,
        ]
    parts.append(np.array(tails))
    xi_hat = np.concatenate(parts)

    eta = np.zeros(dim)
    if kind == "ipw":
        eta[slices["mu31"]] = 1.0
        eta[slices["mu30"]] = -1.0
    else:
        eta[slices["v1"]] = 1.0
        eta[slices["v2"]] = -1.0
        eta[slices["v3"]] = 1.0

    mean_psi = psi(xi_hat).mean(axis=0)
    worst = float(np.max(np.abs(mean_psi)))
    if worst > STATIONARITY_TOL:
        raise StationarityError(
            f"plug-in estimates do not solve the stacked equations "
            f"(max |mean psi| = {worst:.2e})"
        )
    return StackedSystem(xi=xi_hat, eta=eta, psi=psi, labels=tuple(labels))


def sandwich_variance(system: StackedSystem) -> float:
    """Variance of the system's contrast via A^-1 B A^-T / n.

    A is the central finite-difference Jacobian of the mean estimating
    function (relative step 1e-5 per coordinate, absolute floor 1e-7);
    B the empirical second moment of the rows.
    """
    xi = system.xi
    dim = system.dim
    rows = system.psi(xi)
    n = rows.shape[0]
    b = rows.T @ rows / n
    a = np.empty((dim, dim))
    for j in range(dim):
        h = max(FD_REL_STEP * abs(xi[j]), FD_ABS_FLOOR)
        up = xi.copy()
        up[j] += h
        dn = xi.copy()
        dn[j] -= h
        a[:, j] = (system.psi(up).mean(axis=0) - system.psi(dn).mean(axis=0)) / (2.0 * h)
    try:
        bread = np.linalg.solve(a, np.eye(dim))
    except np.linalg.LinAlgError:
        raise SingularSystemError("Jacobian of the stacked system is singular")
    if not np.all(np.isfinite(bread)):
        raise SingularSystemError("Jacobian inverse is non-finite")
    var = float(system.eta @ bread @ b @ bread.T @ system.eta) / n
    if not np.isfinite(var):
        raise NumericalError("sandwich variance is non-finite")
    if var < 0.0:
        raise NegativeVarianceError(f"sandwich variance is negative ({var:.3e})")
    return var


# ---------------------------------------------------------------------------
# bootstrap
# ---------------------------------------------------------------------------

def bootstrap_ci(
    estimator: Callable,
    data: Dataset,
    reps: int,
    seed,
    r1_mask: np.ndarray | None = None,
    max_error_share: float = 0.05,
) -> tuple[float, float, float]:
    """Stratified nonparametric bootstrap: (variance, ci_low, ci_high).

    Trial and target rows are resampled independently with replacement;
    ``estimator(dataset, r1_mask)`` re-runs the full pipeline on each
    replicate. Replicate r draws from default_rng([seed, r]), so results
    are identical under any execution order. Errors in individual
    replicates are tolerated up to ``max_error_share``.
    """
    if reps < 100:
        raise ConfigError("bootstrap needs at least 100 replicates")
    idx_trial = np.flatnonzero(data.trial_mask)
    idx_target = np.flatnonzero(data.target_mask)
    estimates = np.full(reps, np.nan)
    failures = 0
    for r in range(reps):
        rng = np.random.default_rng([_seed_int(seed), r])
        bi = np.concatenate([
            rng.choice(idx_trial, size=idx_trial.size, replace=True),
            rng.choice(idx_target, size=idx_target.size, replace=True),
        ])
        sub_mask = None
        if r1_mask is not None:
            sub_mask = np.asarray(r1_mask, dtype=bool)[
                np.searchsorted(idx_target, bi[idx_trial.size:])
            ]
        try:
            estimates[r] = estimator(data.subset(bi), sub_mask)
        except Exception:
            failures += 1
    if failures > max_error_share * reps:
        raise NumericalError(
            f"bootstrap failed: {failures}/{reps} replicates errored"
        )
    good = estimates[np.isfinite(estimates)]
    var = float(np.var(good, ddof=1)) if good.size > 1 else 0.0
    lo, hi = (float(v) for v in np.percentile(good, [2.5, 97.5]))
    return var, lo, hi


def _seed_int(seed) -> int:
    if isinstance(seed, (int, np.integer)):
        return int(seed)
    raise ConfigError("bootstrap seed must be an integer")
