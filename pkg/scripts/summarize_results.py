#!/usr/bin/env python3
"""Print per-cell medians from one or more experiment results.csv files.

Rows are grouped by method plus every scenario column that varies within a
file; metric columns that are entirely empty for a group are dropped.
"""

import argparse
import csv
import statistics
import sys

SCENARIO_COLUMNS = (
    "variant", "n", "T", "K", "d", "tau2", "t0", "tau_a2", "tau_b2",
    "mu_sep", "sigma_g2", "sigma_h2", "obs_var",
)
METRIC_COLUMNS = (
    "rmse_mu", "rmse_sigma2", "gamma_abs_err", "mse_f", "mse_f_b",
    "rmse_G", "rmse_H", "rmse_R", "n_iter",
)


def read_rows(path):
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def summarize(path):
    rows = read_rows(path)
    if not rows:
        print(f"{path}: no rows")
        return
    varying = [c for c in SCENARIO_COLUMNS
               if c in rows[0] and len({r[c] for r in rows}) > 1]
    keys = varying + ["method"]
    groups = {}
    for r in rows:
        groups.setdefault(tuple(r[k] for k in keys), []).append(r)

    metrics = [m for m in METRIC_COLUMNS if any(r.get(m) for r in rows)]
    header = keys + [f"med_{m}" for m in metrics] + ["reps"]
    table = []
    for key in sorted(groups):
        cell = groups[key]
        meds = []
        for m in metrics:
            vals = [float(r[m]) for r in cell if r.get(m)]
            meds.append(f"{statistics.median(vals):.4g}" if vals else "")
        table.append(list(key) + meds + [str(len(cell))])

    widths = [max(len(h), *(len(row[i]) for row in table)) for i, h in enumerate(header)]
    print(f"\n{path}")
    print("  " + "  ".join(h.ljust(w) for h, w in zip(header, widths)))
    for row in table:
        print("  " + "  ".join(v.ljust(w) for v, w in zip(row, widths)))


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("csv_paths", nargs="+", help="results.csv files to summarize")
    args = parser.parse_args(argv)
    for path in args.csv_paths:
        summarize(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
