"""Small replication study: bias, MSE, SD and coverage.

Generates cohorts from the built-in superpopulation process, runs the
full pipeline on each, composes the full-population estimate with known
(oracle) sensitivity parameters, and scores everything against a Monte
Carlo truth. Uses a small size and replication count so it finishes in
well under a minute; scale n_total and replications up for serious
numbers.

Run:  python demos/03_replication_study.py
"""

import time

from extval import DgpConfig, StudyConfig, run_study

config = StudyConfig(
    dgp=DgpConfig(n_total=20_000),
    replications=50,
    p3_stars=(0.8,),
    methods=("ipw", "aipw"),
    assumptions=("gpd", "epd"),
    master_seed=11,
    oracle_draws=1_000_000,
)

t0 = time.time()
report = run_study(config, n_jobs=2)
print(f"{config.replications} replications in {time.time() - t0:.1f}s; "
      f"true effect = {report.true_tau:+.4f}; failures = {report.failures}")
print()
print(report.to_csv())
print("reading the table: the augmented estimator should show visibly")
print("smaller MSE than plain weighting in every row. coverage climbs")
print("toward nominal as n_total grows (transport weights are heavy-tailed")
print("at trial sizes this small, so intervals undercover here).")
