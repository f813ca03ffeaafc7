"""CSV ingestion, JSON reports and the ``nmargof`` command line."""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from dataclasses import asdict, dataclass
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.stats import norm

from .bootstrap import DEFAULT_B, bootstrap_design
from .data import Dataset
from .errors import DataFormatError, InvalidInputError, NmarGofError
from .estimation import FitResult, fit_design
from .gof import gof_design
from .model import Design, make_family, param_names
from .simulation import SCENARIO_IDS, format_table, get_scenario, run_study

SCHEMA_ID = "nmar-gof/1"
MISSING_TOKENS = ("", "NA")
METHODS = ("plugin", "bootstrap", "both")


@dataclass
class RunConfig:
    data_path: Optional[str]
    outcome_col: str
    propensity_cols: Sequence[str]
    outcome_cols: Sequence[str]
    family: str = "bernoulli"
    method: str = "both"
    level: float = 0.05
    B: int = DEFAULT_B
    seed: int = 0
    output_path: Optional[str] = None
    n_jobs: int = 1

    def validate(self, columns: Optional[Sequence[str]] = None):
        self.propensity_cols = list(self.propensity_cols)
        self.outcome_cols = list(self.outcome_cols)
        if self.family not in ("bernoulli", "normal", "gamma"):
            raise InvalidInputError(f"unknown family {self.family!r}")
        if self.method not in METHODS + ("fit",):
            raise InvalidInputError(f"unknown method {self.method!r}")
        if not 0 < self.level < 1:
            raise InvalidInputError("level must lie in (0, 1)")
        if self.B < 1:
            raise InvalidInputError("the number of bootstrap replicates must be at least 1")
        if self.outcome_col in self.propensity_cols or self.outcome_col in self.outcome_cols:
            raise InvalidInputError("the outcome column cannot also be a covariate")
        if columns is not None:
            missing = [c for c in [self.outcome_col, *self.propensity_cols, *self.outcome_cols]
                       if c not in columns]
            if missing:
                raise InvalidInputError(f"columns not found in data: {missing}")
        return self

    def echo(self):
        d = asdict(self)
        d.pop("output_path")
        d.pop("n_jobs")
        d["propensity_cols"] = list(self.propensity_cols)
        d["outcome_cols"] = list(self.outcome_cols)
        return d


def _covariate_order(config: RunConfig):
    cols = list(dict.fromkeys(list(config.propensity_cols) + list(config.outcome_cols)))
    prop = [cols.index(c) for c in config.propensity_cols]
    out = [cols.index(c) for c in config.outcome_cols]
    return cols, prop, out


def load_csv(path, config: RunConfig) -> Dataset:
    """Read a header-first CSV; an empty or ``NA`` outcome cell marks a nonrespondent."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataFormatError(f"{path} is empty")
        config.validate(header)
        cols, prop, out = _covariate_order(config)
        pos = {name: header.index(name) for name in cols + [config.outcome_col]}
        X, y = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise DataFormatError(f"line {lineno}: expected {len(header)} fields, "
                                      f"found {len(row)}", line=lineno)
            xr = []
            for name in cols:
                cell = row[pos[name]].strip()
                if cell in MISSING_TOKENS:
                    raise DataFormatError(f"line {lineno}, column {name!r}: covariates must "
                                          "be fully observed", line=lineno, column=name)
                xr.append(_parse(cell, lineno, name))
            cell = row[pos[config.outcome_col]].strip()
            y.append(np.nan if cell in MISSING_TOKENS
                     else _parse(cell, lineno, config.outcome_col))
            X.append(xr)
    if not X:
        raise DataFormatError(f"{path} has no data rows")
    y = np.array(y, dtype=float)
    r = np.isfinite(y).astype(np.int8)
    return Dataset(np.array(X, dtype=float).reshape(len(X), len(cols)), y, r, prop, out, cols)


def _parse(cell, lineno, name):
    try:
        v = float(cell)
    except ValueError:
        raise DataFormatError(f"line {lineno}, column {name!r}: cannot parse {cell!r}",
                              line=lineno, column=name)
    if not math.isfinite(v):
        raise DataFormatError(f"line {lineno}, column {name!r}: non-finite value {cell!r}",
                              line=lineno, column=name)
    return v


def write_csv(data: Dataset, path, outcome_col="y"):
    """Write ``data`` in the format read by :func:`load_csv`."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(list(data.names) + [outcome_col])
        for i in range(data.n):
            yv = "NA" if data.r[i] == 0 else repr(float(data.y[i]))
            w.writerow([repr(float(v)) for v in data.X[i]] + [yv])


def _num(v, label, warnings):
    if v is None:
        return None
    v = float(v)
    if not math.isfinite(v):
        warnings.append(f"{label} is not finite")
        return None
    return v


def fit_table(fit: FitResult, data: Dataset, family: str):
    fam = make_family(family, len(data.out_cols))
    names = param_names([data.names[j] for j in data.prop_cols],
                        [data.names[j] for j in data.out_cols], fam)
    m = len(data.prop_cols)
    theta = fit.theta_vector
    rows = []
    for j, name in enumerate(names):
        se = None if fit.se is None or not np.isfinite(fit.se[j]) else float(fit.se[j])
        z = None if not se else float(theta[j] / se)
        p = None if z is None else float(2 * norm.sf(abs(z)))
        rows.append({"name": name, "block": "propensity" if j < m + 2 else "outcome",
                     "estimate": float(theta[j]), "se": se, "wald_z": z, "p": p})
    return rows


def build_report(config: RunConfig, data: Dataset, fit: FitResult, gof=None, boot=None,
                 warnings=()):
    """Assemble the JSON report (schema ``nmar-gof/1``)."""
    warnings = list(warnings)
    rep = {
        "schema": SCHEMA_ID,
        "config": config.echo(),
        "n": int(data.n),
        "n_missing": int(data.n_missing),
        "missing_rate": data.missing_rate,
        "fit": {"converged": bool(fit.converged), "iterations": int(fit.iterations),
                "loglik": _num(fit.loglik, "loglik", warnings),
                "score_inf_norm": _num(fit.score_inf_norm, "score_inf_norm", warnings),
                "ill_conditioned": bool(fit.ill_conditioned), "message": fit.message},
        "fit_table": fit_table(fit, data, config.family),
        "t_n": None, "delta_hat": None, "sigma_hat": None, "plugin_p": None,
        "plugin_reject": None, "boot_p": None, "boot_reject": None, "q_star": None,
        "boot_failed": None, "boot_variance": None, "reject": None,
    }
    if gof is not None:
        warnings.extend(gof.warnings)
        rep["t_n"] = _num(gof.t_n, "t_n", warnings)
        rep["delta_hat"] = _num(gof.delta_hat, "delta_hat", warnings)
        if config.method in ("plugin", "both"):
            rep["sigma_hat"] = _num(gof.sigma_hat, "sigma_hat", warnings)
            rep["plugin_p"] = _num(gof.plugin_p, "plugin_p", warnings)
            rep["plugin_reject"] = gof.plugin_reject
            if gof.sigma_hat is None:
                warnings.append("plug-in test unavailable")
    if boot is not None:
        rep["boot_p"] = _num(boot.boot_p, "boot_p", warnings)
        rep["boot_reject"] = bool(boot.reject)
        rep["q_star"] = _num(boot.q_star, "q_star", warnings)
        rep["boot_failed"] = int(boot.n_failed)
        rep["boot_variance"] = _num(boot.sigma2_boot_diag, "boot_variance", warnings)
    rep["reject"] = rep["boot_reject"] if boot is not None else rep["plugin_reject"]
    rep["warnings"] = warnings
    return rep


def load_schema():
    return json.loads(resources.files("nmargof").joinpath("schema/report.schema.json")
                      .read_text(encoding="utf-8"))


def validate_report(report):
    import jsonschema

    jsonschema.validate(report, load_schema())


def run_config(config: RunConfig, data: Optional[Dataset] = None):
    """Fit and test as requested by ``config``; returns the report dict."""
    config.validate()
    if data is None:
        data = load_csv(config.data_path, config)
    warnings = []
    if not set(data.out_cols) - set(data.prop_cols):
        warnings.append("no outcome covariate is excluded from the propensity model; "
                        "gamma may be weakly identified")
    fam = make_family(config.family, len(data.out_cols))
    design = Design(data, fam)
    fit = fit_design(design)
    if config.method == "fit":
        return build_report(config, data, fit, warnings=warnings)
    gof = gof_design(design, config.level, fit=fit)
    boot = None
    if config.method in ("bootstrap", "both"):
        _, boot = bootstrap_design(design, config.level, config.B, config.seed,
                                   n_jobs=config.n_jobs, report=gof)
    return build_report(config, data, fit, gof, boot, warnings)


def format_summary(rep):
    lines = [f"n = {rep['n']}  missing = {rep['n_missing']} ({100 * rep['missing_rate']:.1f}%)",
             f"{'parameter':<22}{'estimate':>10}{'se':>10}{'wald_z':>10}{'p':>10}"]

    def f(v):
        return f"{v:>10.3f}" if v is not None else f"{'-':>10}"

    for row in rep["fit_table"]:
        lines.append(f"{row['name']:<22}{f(row['estimate'])}{f(row['se'])}"
                     f"{f(row['wald_z'])}{f(row['p'])}")
    if rep["t_n"] is not None:
        lines.append(f"T_n = {rep['t_n']:.5f}")
    if rep["plugin_p"] is not None:
        lines.append(f"plug-in:   sigma_hat = {rep['sigma_hat']:.5f}  p = {rep['plugin_p']:.3f}")
    if rep["boot_p"] is not None:
        lines.append(f"bootstrap: q* = {rep['q_star']:.5f}  p = {rep['boot_p']:.3f}"
                     f"  (failed refits: {rep['boot_failed']})")
    for w in rep["warnings"]:
        lines.append(f"warning: {w}")
    return "\n".join(lines)


def _write_json(obj, path):
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    Path(path).write_text(text, encoding="utf-8")


def cmd_test(config: RunConfig, out=None):
    """Run the configured analysis; returns ``(report, exit_code)``.

    Exit code 2 means the null was rejected at the configured level.
    """
    rep = run_config(config)
    if config.output_path:
        _write_json(rep, config.output_path)
    print(format_summary(rep), file=out or sys.stdout)
    return rep, 2 if rep["reject"] else 0


def cmd_simulate(example, scenario, n, reps, B, a, seed, out=None, n_jobs=1, stream=None):
    """Run a rejection-rate study and write JSON (``out``) plus a text table (``out``.txt)."""
    stream = stream or sys.stdout
    spec = get_scenario(example, scenario)
    summary = run_study(spec, n, reps, B, a, seed, n_jobs=n_jobs)
    table = format_table([summary])
    if out:
        out = Path(out)
        out.write_text(summary.to_json() + "\n", encoding="utf-8")
        out.with_suffix(".txt").write_text(table, encoding="utf-8")
    print(table, file=stream, end="")
    print(f"runtime {summary.runtime:.1f}s  failed replications {summary.n_failed_reps}",
          file=stream)
    return summary


def _split(s):
    return [c.strip() for c in s.split(",") if c.strip()]


def build_parser():
    p = argparse.ArgumentParser(prog="nmargof", description=(
        "Goodness-of-fit tests for logistic propensity models with nonignorable "
        "missing outcomes."))
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("fit", "test"):
        s = sub.add_parser(name)
        s.add_argument("--data", required=True)
        s.add_argument("--outcome", required=True)
        s.add_argument("--family", choices=("bernoulli", "normal", "gamma"), default="bernoulli")
        s.add_argument("--propensity-cols", type=_split, required=True)
        s.add_argument("--outcome-cols", type=_split, required=True)
        s.add_argument("--out")
        if name == "test":
            s.add_argument("--method", choices=METHODS, default="both")
            s.add_argument("--alpha", type=float, default=0.05, help="significance level")
            s.add_argument("--boot-reps", type=int, default=DEFAULT_B)
            s.add_argument("--seed", type=int, default=0)
            s.add_argument("--jobs", type=int, default=1)
    s = sub.add_parser("simulate")
    s.add_argument("--example", type=int, choices=(1, 2, 3), required=True)
    s.add_argument("--scenario", choices=SCENARIO_IDS, required=True)
    s.add_argument("--n", type=int, default=1000)
    s.add_argument("--reps", type=int, default=500)
    s.add_argument("--boot-reps", type=int, default=200)
    s.add_argument("--alpha", type=float, default=0.05, help="significance level")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--out")
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code else 0
    try:
        if args.command == "simulate":
            if args.reps < 1 or args.boot_reps < 1 or args.n < 1:
                raise InvalidInputError("--n, --reps and --boot-reps must be positive")
            cmd_simulate(args.example, args.scenario, args.n, args.reps, args.boot_reps,
                         args.alpha, args.seed, args.out, args.jobs)
            return 0
        config = RunConfig(args.data, args.outcome, args.propensity_cols, args.outcome_cols,
                           args.family, getattr(args, "method", "fit"),
                           getattr(args, "alpha", 0.05), getattr(args, "boot_reps", DEFAULT_B),
                           getattr(args, "seed", 0), args.out, getattr(args, "jobs", 1))
        _, code = cmd_test(config)
        return code
    except NmarGofError as exc:
        print(json.dumps(exc.to_dict()), file=sys.stderr)
        return 1
    except OSError as exc:
        print(json.dumps({"error": "io", "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
