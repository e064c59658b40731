"""Batch command-line interface.

Subcommands: ``analyze`` (fit, partition, estimate), ``sensitivity``
(grid sweep from an analysis report), ``simulate`` (replication study),
and ``calibrate`` (participation-intercept solver). Configuration is
JSON with ``"schema_version": 1``; tabular outputs are CSV. All
randomness flows from explicit seeds in the configuration; a missing
seed where one is needed is a configuration error, never a silent
clock seed.

Exit codes: 0 success, 2 configuration error, 3 data error,
4 numerical error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys

import numpy as np

from .data import Dataset
from .errors import ConfigError, DataError, ExtvalError
from .estimators import (
    EstimateReport,
    augmented_ipw,
    bootstrap_ci,
    hajek_ipw,
    trimmed_aipw,
    trimmed_ipw,
)
from .glm import (
    GlmFamily,
    GlmFit,
    fit_outcome_models,
    fit_propensity_score,
    fit_sampling_score,
    predict_mean,
)
from .partition import partition_population
from .sensitivity import (
    SensitivityInput,
    extrapolate_group_ate,
    sensitivity_sweep,
)
from .simulation import DgpConfig, StudyConfig, calibrate_intercept, run_study

_FAMILIES = {
    "gaussian": GlmFamily.GAUSSIAN_IDENTITY,
    "binary": GlmFamily.BERNOULLI_LOGIT,
}

_METHODS = ("ipw", "aipw", "trimmed_ipw", "trimmed_aipw")


# ---------------------------------------------------------------------------
# dataset loading
# ---------------------------------------------------------------------------

def load_dataset(path: str, roles: dict) -> tuple[Dataset, list[dict]]:
    """Parse a CSV into a Dataset, prepending the constant-1 column.

    ``roles`` maps {"s": column, "a": column, "y": column,
    "covariates": [columns...]}. Treatment and outcome cells must be
    empty exactly on target rows; anything else is a role
    misassignment. Returns the dataset and the raw rows (as dicts) so
    that exclusion rules may reference non-model columns.
    """
    for key in ("s", "a", "y", "covariates"):
        if key not in roles:
            raise ConfigError(f"column roles must include {key!r}")
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None:
                raise DataError(f"{path}: missing header row")
            header = set(reader.fieldnames)
            raw = list(reader)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    needed = [roles["s"], roles["a"], roles["y"], *roles["covariates"]]
    missing = [c for c in needed if c not in header]
    if missing:
        raise DataError(f"{path}: missing columns {missing}")
    if not raw:
        raise DataError(f"{path}: no data rows")

    n = len(raw)
    s = np.empty(n)
    a = np.full(n, np.nan)
    y = np.full(n, np.nan)
    x = np.empty((n, len(roles["covariates"]) + 1))
    x[:, 0] = 1.0
    for i, row in enumerate(raw):
        sv = row[roles["s"]].strip()
        if sv not in ("0", "1"):
            raise DataError(f"{path} row {i + 2}: participation flag must be 0 or 1")
        s[i] = float(sv)
        av = row[roles["a"]].strip()
        yv = row[roles["y"]].strip()
        if s[i] == 1.0:
            if av == "" or yv == "":
                raise DataError(f"{path} row {i + 2}: trial row lacks treatment or outcome")
            a[i] = _number(av, path, i, roles["a"])
            y[i] = _number(yv, path, i, roles["y"])
        elif av != "" or yv != "":
            raise DataError(
                f"{path} row {i + 2}: treatment/outcome present on a target row; "
                "check the column role assignment"
            )
        for j, col in enumerate(roles["covariates"]):
            v = row[col].strip()
            if v == "":
                raise DataError(f"{path} row {i + 2}: empty covariate {col!r}")
            x[i, j + 1] = _number(v, path, i, col)
    return Dataset(s=s, a=a, y=y, x=x), raw


def _number(value: str, path: str, i: int, col: str) -> float:
    try:
        return float(value)
    except ValueError:
        raise DataError(f"{path} row {i + 2}: non-numeric value {value!r} in column {col!r}")


# ---------------------------------------------------------------------------
# raw-column exclusion rules (CSV-name based)
# ---------------------------------------------------------------------------

_RAW_OPS = {
    "==": lambda v, c: v == c,
    "!=": lambda v, c: v != c,
    ">=": lambda v, c: v >= c,
    "<=": lambda v, c: v <= c,
    ">": lambda v, c: v > c,
    "<": lambda v, c: v < c,
    "in": lambda v, c: v in c,
}


def evaluate_raw_rules(rules: list, raw_rows: list[dict], mask_rows) -> np.ndarray:
    """Evaluate clause lists against raw CSV rows (selected by mask_rows).

    Each clause is a list of {"var": column name, "op": comparator,
    "value": constant}; values compare numerically.
    """
    rows = [raw_rows[i] for i in np.flatnonzero(mask_rows)]
    out = np.zeros(len(rows), dtype=bool)
    for clause in rules:
        m = np.ones(len(rows), dtype=bool)
        for pred in clause:
            var, op, value = pred["var"], pred["op"], pred["value"]
            if op not in _RAW_OPS:
                raise ConfigError(f"unknown comparator {op!r} in exclusion rule")
            for i, row in enumerate(rows):
                if var not in row:
                    raise ConfigError(f"exclusion rule references unknown column {var!r}")
                cell = row[var].strip()
                try:
                    v = float(cell) if cell != "" else float("nan")
                except ValueError:
                    raise DataError(f"non-numeric value {cell!r} in rule column {var!r}")
                m[i] &= bool(_RAW_OPS[op](v, value))
        out |= m
    return out


# ---------------------------------------------------------------------------
# analyze
# ---------------------------------------------------------------------------

def _require(config: dict, key: str):
    if key not in config:
        raise ConfigError(f"config is missing {key!r}")
    return config[key]


def _check_schema(config: dict):
    if config.get("schema_version") != 1:
        raise ConfigError("config must declare \"schema_version\": 1")


def _score_histogram(hs: np.ndarray, s: np.ndarray, bins: int = 30) -> dict:
    edges = np.linspace(0.0, float(hs.max()) + 1e-12, bins + 1)
    trial, _ = np.histogram(hs[s == 1], bins=edges)
    target, _ = np.histogram(hs[s == 0], bins=edges)
    return {
        "bin_edges": edges.tolist(),
        "trial_counts": trial.tolist(),
        "target_counts": target.tolist(),
    }


def _fit_summary(fit: GlmFit) -> dict:
    return {
        "coefficients": np.asarray(fit.coefficients).tolist(),
        "family": fit.family.value,
        "converged": fit.converged,
        "iterations": fit.iterations,
        "log_likelihood": fit.log_likelihood,
        "fixed": fit.fixed,
    }


def _stage(label: str):
    class _Stage:
        def __enter__(self):
            return self

        def __exit__(self, exc_type, exc, tb):
            if exc is not None and isinstance(exc, ExtvalError):
                exc.args = (f"{label}: {exc.args[0]}" if exc.args else label,)
            return False

    return _Stage()


def cmd_analyze(config: dict) -> dict:
    """Run the fit / partition / estimate pipeline, returning the report."""
    _check_schema(config)
    data, raw = load_dataset(_require(config, "input"), _require(config, "roles"))
    family = _family(config.get("outcome_family", "gaussian"))
    methods = config.get("methods", ["trimmed_aipw"])
    for m in methods:
        if m not in _METHODS:
            raise ConfigError(f"unknown method {m!r}; choose from {_METHODS}")
    variance_method = config.get("variance", "sandwich")
    if variance_method not in ("sandwich", "bootstrap"):
        raise ConfigError("variance must be 'sandwich' or 'bootstrap'")
    p3_star = config.get("p3_star")
    epsilon = float(config.get("epsilon", 1e-8))
    needs_partition = any(m.startswith("trimmed") for m in methods)
    if needs_partition and p3_star is None:
        raise ConfigError("trimmed methods require p3_star")
    if p3_star is not None and not 0.0 < p3_star <= 1.0:
        raise ConfigError("p3_star must lie in (0, 1]")
    seed = config.get("seed")
    if variance_method == "bootstrap" and seed is None:
        raise ConfigError("bootstrap variance requires an explicit seed")

    with _stage("fit"):
        sampling = fit_sampling_score(data)
        known_p = config.get("known_propensity")
        propensity = fit_propensity_score(data, known_probability=known_p)
        needs_outcome = any("aipw" in m for m in methods)
        outcome = fit_outcome_models(data, family) if needs_outcome else None

    r1_mask = None
    if config.get("exclusion_rules"):
        r1_mask = evaluate_raw_rules(config["exclusion_rules"], raw, data.target_mask)

    partition = None
    if needs_partition:
        with _stage("partition"):
            partition = partition_population(
                data, sampling, propensity, r1_mask, p3_star, epsilon
            )

    report: dict = {
        "schema_version": 1,
        "input": config["input"],
        "n1": data.n1,
        "n2": data.n2,
        "q": data.q,
        "sampling_model": _fit_summary(sampling),
        "propensity_model": _fit_summary(propensity),
        "sampling_score_histogram": _score_histogram(
            predict_mean(sampling, data.x), data.s
        ),
        "estimates": [],
    }
    if outcome is not None:
        report["outcome_models"] = {
            "treated": _fit_summary(outcome[0]),
            "control": _fit_summary(outcome[1]),
        }
    if partition is not None:
        report["partition"] = {
            "delta_star": partition.delta_star,
            "p_hat": list(partition.p_hat),
            "counts": list(partition.counts),
            "p3_star": p3_star,
            "epsilon": epsilon,
        }

    with _stage("estimate"):
        for m in methods:
            report["estimates"].append(
                _run_method(
                    m, data, sampling, propensity, outcome, partition,
                    variance_method, config, r1_mask,
                ).to_dict()
            )

    if outcome is not None and partition is not None:
        zeta = _extrapolations(config, data, raw, family, outcome, partition)
        if zeta is not None:
            report["zeta"] = zeta
    return report


def _family(name: str) -> GlmFamily:
    if name not in _FAMILIES:
        raise ConfigError(f"unknown outcome family {name!r}; choose gaussian or binary")
    return _FAMILIES[name]


def _run_method(
    method, data, sampling, propensity, outcome, partition,
    variance_method, config, r1_mask,
) -> EstimateReport:
    def point(ds: Dataset, mask):
        sf = fit_sampling_score(ds)
        pf = fit_propensity_score(ds, known_probability=config.get("known_propensity"))
        of = (
            fit_outcome_models(ds, _family(config.get("outcome_family", "gaussian")))
            if "aipw" in method
            else None
        )
        if method.startswith("trimmed"):
            part = partition_population(
                ds, sf, pf, mask, config["p3_star"], float(config.get("epsilon", 1e-8))
            )
            if method == "trimmed_ipw":
                return trimmed_ipw(ds, sf, pf, part, variance="none").estimate
            return trimmed_aipw(ds, sf, pf, of, part, variance="none").estimate
        if method == "ipw":
            return hajek_ipw(ds, sf, pf, variance="none").estimate
        return augmented_ipw(ds, sf, pf, of, variance="none").estimate

    if method == "ipw":
        rep = hajek_ipw(data, sampling, propensity, variance="sandwich" if variance_method == "sandwich" else "none")
    elif method == "aipw":
        rep = augmented_ipw(data, sampling, propensity, outcome, variance="sandwich" if variance_method == "sandwich" else "none")
    elif method == "trimmed_ipw":
        rep = trimmed_ipw(data, sampling, propensity, partition, variance="sandwich" if variance_method == "sandwich" else "none")
    else:
        rep = trimmed_aipw(data, sampling, propensity, outcome, partition, variance="sandwich" if variance_method == "sandwich" else "none")

    if variance_method == "bootstrap":
        reps = int(config.get("bootstrap_reps", 500))
        var, lo, hi = bootstrap_ci(point, data, reps, int(config["seed"]), r1_mask=r1_mask)
        rep = EstimateReport(
            rep.estimate, var, lo, hi, rep.method, rep.trimmed, "bootstrap",
            rep.n1, rep.n2, rep.p_hat, rep.delta_star,
        )
    return rep


def _extrapolations(config, data, raw, family, outcome, partition):
    """Group extrapolations for EPD; surrogate-stratum refits optional."""
    sens = config.get("sensitivity", {})
    filters = sens.get("extrapolation", {}) if isinstance(sens, dict) else {}
    x_target = data.x[data.target_mask]
    zeta = {}
    for group, label in ((1, "zeta1"), (2, "zeta2")):
        rows = x_target[partition.labels == group]
        if rows.shape[0] == 0:
            return None
        fits = outcome
        filt = filters.get(f"r{group}_trial_filter")
        if filt:
            trial_mask = evaluate_raw_rules(filt, raw, data.trial_mask)
            idx = np.flatnonzero(data.trial_mask)[trial_mask]
            if idx.size == 0:
                raise DataError(f"extrapolation filter for group {group} matches no trial rows")
            fits = fit_outcome_models(data.subset(idx), family)
        zeta[label] = extrapolate_group_ate(fits, rows)
    return zeta


# ---------------------------------------------------------------------------
# sensitivity
# ---------------------------------------------------------------------------

def cmd_sensitivity(config: dict, report: dict) -> str:
    """Sweep (k1, k2) for the configured assumption; returns grid CSV."""
    _check_schema(config)
    sens = _require(config, "sensitivity")
    assumption = _require(sens, "assumption")
    method = sens.get("method", "aipw")
    entry = next(
        (e for e in report.get("estimates", []) if e["method"] == method and e["trimmed"]),
        None,
    )
    if entry is None:
        raise ConfigError(
            f"analysis report has no trimmed {method} estimate; rerun analyze "
            "with the matching method"
        )
    part = report.get("partition")
    if part is None:
        raise ConfigError("analysis report carries no partition block")
    zeta = report.get("zeta", {})
    inp = SensitivityInput(
        tau3=entry["estimate"],
        tau3_variance=entry["se"] ** 2,
        p1=part["p_hat"][0],
        p2=part["p_hat"][1],
        p3_star=part["p_hat"][2],
        zeta1=zeta.get("zeta1"),
        zeta2=zeta.get("zeta2"),
    )
    k1_grid = list(sens.get("k1_grid", [1.0]))
    k2_grid = list(sens.get("k2_grid", [1.0]))
    if 1.0 not in k1_grid:
        k1_grid.append(1.0)
    if 1.0 not in k2_grid:
        k2_grid.append(1.0)
    grid = sensitivity_sweep(inp, k1_grid, k2_grid, assumption)
    baseline = next(r for r in grid.rows if r.k1 == 1.0 and r.k2 == 1.0)
    print(
        f"baseline k1=k2=1 ({assumption.upper()}): tau={baseline.estimate:.6f} "
        f"ci=[{baseline.ci_low:.6f}, {baseline.ci_high:.6f}]",
        file=sys.stderr,
    )
    return grid.to_csv()


# ---------------------------------------------------------------------------
# simulate / calibrate
# ---------------------------------------------------------------------------

def cmd_simulate(config: dict, threads: int = 1) -> str:
    """Run the replication study; returns the report CSV."""
    _check_schema(config)
    if "seed" not in config:
        raise ConfigError("simulate requires an explicit seed")
    family = _family(config.get("outcome_family", "gaussian"))
    sizes = config.get("sizes", [100_000])
    chunks = []
    for n_total in sizes:
        dgp = DgpConfig(n_total=int(n_total), outcome_family=family)
        study = StudyConfig(
            dgp=dgp,
            replications=int(config.get("replications", 1000)),
            p3_stars=tuple(config.get("p3_star", [0.8, 0.9])),
            methods=tuple(config.get("methods", ["ipw", "aipw"])),
            assumptions=tuple(config.get("assumptions", ["gpd", "epd"])),
            master_seed=int(config["seed"]),
            oracle_draws=int(config.get("oracle_draws", 4_000_000)),
        )
        csv_text = run_study(study, n_jobs=max(1, threads)).to_csv()
        chunks.append(csv_text if not chunks else "".join(csv_text.splitlines(True)[1:]))
    return "".join(chunks)


def cmd_calibrate(args) -> dict:
    slopes = [float(v) for v in args.slopes.split(",")]
    config = DgpConfig(
        beta=(0.0, *slopes),
        theta0=(0.0,) * (len(slopes) + 1),
        theta1=(0.0,) * (len(slopes) + 1),
        e_prob=args.e_prob,
        exclusions=not args.no_exclusions,
        x4_cut=args.x4_cut,
    )
    from .simulation import dgp_covariate_sampler

    intercept = calibrate_intercept(
        slopes,
        args.target,
        covariate_sampler=dgp_covariate_sampler(config),
        mc_draws=args.draws,
        seed=args.seed,
    )
    return {"intercept": intercept, "target_prob": args.target, "slopes": slopes}


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def _read_json(path: str) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc


def _write_text(path: str | None, text: str):
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        with open(path, "w") as fh:
            fh.write(text)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="extval",
        description="Transport trial treatment effects to an external "
        "target population under positivity violations.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="fit scores, partition the target, estimate effects")
    p.add_argument("--config", required=True)
    p.add_argument("--output", default=None, help="report JSON path (default stdout)")

    p = sub.add_parser("sensitivity", help="sweep sensitivity parameters from a report")
    p.add_argument("--config", required=True)
    p.add_argument("--report", required=True, help="analysis report JSON")
    p.add_argument("--output", default=None, help="grid CSV path (default stdout)")

    p = sub.add_parser("simulate", help="run the replication study")
    p.add_argument("--config", required=True)
    p.add_argument("--output", default=None, help="study CSV path (default stdout)")
    p.add_argument("--threads", type=int, default=1)

    p = sub.add_parser("calibrate", help="solve the participation-model intercept")
    p.add_argument("--slopes", required=True, help="comma-separated non-intercept slopes")
    p.add_argument("--target", type=float, required=True)
    p.add_argument("--draws", type=int, default=2_000_000)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--e-prob", type=float, default=0.01)
    p.add_argument("--x4-cut", type=float, default=3.0)
    p.add_argument("--no-exclusions", action="store_true")
    p.add_argument("--output", default=None)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "analyze":
            report = cmd_analyze(_read_json(args.config))
            _write_text(args.output, json.dumps(report, indent=2) + "\n")
        elif args.command == "sensitivity":
            text = cmd_sensitivity(_read_json(args.config), _read_json(args.report))
            _write_text(args.output, text)
        elif args.command == "simulate":
            text = cmd_simulate(_read_json(args.config), threads=args.threads)
            _write_text(args.output, text)
        elif args.command == "calibrate":
            result = cmd_calibrate(args)
            _write_text(args.output, json.dumps(result, indent=2) + "\n")
    except ExtvalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
