"""Command-line interface: validate, fit, simulate, benchmark.

A JSON config file can hold any option; explicit command-line flags win.
Output tables are CSV with one provenance comment line (version, seed,
config hash); fit and benchmark also render a companion PNG figure next
to the table.  Exit codes: 0 success, 1 data/numerical failure, 2 usage
or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys

import numpy as np

from .baselines import ESTIMATORS
from .dataset import CovariateSpec, DataError, load_long_csv, validate, write_long_csv
from .inference import bootstrap_variance, sandwich_variance
from .outcome import fit_givehr
from .simulate import SCENARIOS, BenchmarkTable, ScenarioSpec, generate, run_replications
from .visiting import FitError

try:
    from importlib.metadata import version as _pkg_version

    VERSION = _pkg_version("givehr")
except Exception:  # pragma: no cover - source tree without install
    VERSION = "0.1.0"


class UsageError(Exception):
    """Bad arguments or configuration; maps to exit code 2."""


_DEFAULTS = {
    "validate": {"data": None, "roles": None, "tau": 60.0},
    "fit": {
        "data": None,
        "roles": None,
        "tau": 60.0,
        "se": "none",
        "boot_reps": 200,
        "ci_level": 0.95,
        "seed": 0,
        "out": None,
    },
    "simulate": {"scenario": None, "n": 1000, "tau": 60.0, "seed": 0, "latent_a": 0.0, "out": None},
    "benchmark": {
        "scenario": None,
        "reps": 100,
        "n": 1000,
        "tau": 60.0,
        "methods": "givehr",
        "seed": 0,
        "threads": os.cpu_count() or 1,
        "se": "none",
        "latent_a": 0.0,
        "out": None,
    },
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="givehr", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"givehr {VERSION}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="JSON file with defaults for any option of this command")

    p = sub.add_parser("validate", help="check a long-format cohort file against the data contract")
    add_common(p)
    p.add_argument("--data", help="cohort CSV path")
    p.add_argument("--roles", help="JSON file mapping covariate roles to column lists")
    p.add_argument("--tau", type=float, help="default censoring time when the file has none")

    p = sub.add_parser("fit", help="fit the three-stage estimator to a cohort file")
    add_common(p)
    p.add_argument("--data", help="cohort CSV path")
    p.add_argument("--roles", help="JSON file mapping covariate roles to column lists")
    p.add_argument("--tau", type=float, help="default censoring time when the file has none")
    p.add_argument("--se", choices=["none", "sandwich", "bootstrap"], help="standard-error method")
    p.add_argument("--boot-reps", dest="boot_reps", type=int, help="bootstrap replicates")
    p.add_argument("--ci-level", dest="ci_level", type=float, help="confidence level")
    p.add_argument("--seed", type=int, help="bootstrap seed")
    p.add_argument("--out", help="output CSV path (model JSON and figure are written alongside)")

    p = sub.add_parser("simulate", help="generate a scenario cohort plus a ground-truth sidecar")
    add_common(p)
    p.add_argument("--scenario", help=f"one of {', '.join(SCENARIOS)}")
    p.add_argument("--n", type=int, help="number of subjects")
    p.add_argument("--tau", type=float, help="follow-up horizon")
    p.add_argument("--seed", type=int)
    p.add_argument("--latent-a", dest="latent_a", type=float, help="latent-on-X dependence coefficient")
    p.add_argument("--out", help="output CSV path (truth JSON written alongside)")

    p = sub.add_parser("benchmark", help="replication study: bias and RMSE per estimator")
    add_common(p)
    p.add_argument("--scenario", help=f"one of {', '.join(SCENARIOS)}")
    p.add_argument("--reps", type=int, help="number of replications")
    p.add_argument("--n", type=int, help="subjects per replication")
    p.add_argument("--tau", type=float)
    p.add_argument("--methods", help="comma-separated estimator ids")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int, help="worker processes (results are thread-count independent)")
    p.add_argument("--se", choices=["none", "sandwich"], help="per-replication SE for the three-stage fit")
    p.add_argument("--latent-a", dest="latent_a", type=float)
    p.add_argument("--out", help="output CSV path (figure written alongside)")

    return parser


def _resolve_options(args, command: str) -> dict:
    defaults = _DEFAULTS[command]
    config = {}
    if getattr(args, "config", None):
        try:
            with open(args.config, encoding="utf-8") as fh:
                config = json.load(fh)
        except FileNotFoundError:
            raise UsageError(f"config file not found: {args.config}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file is not valid JSON: {exc}") from None
        unknown = set(config) - set(defaults) - {"roles_map"}
        if unknown:
            raise UsageError(f"unknown config key(s) for {command}: {sorted(unknown)}")
    opts = {}
    for key, default in defaults.items():
        cli_val = getattr(args, key, None)
        opts[key] = cli_val if cli_val is not None else config.get(key, default)
    opts["roles_map"] = config.get("roles_map")
    return opts


def _config_hash(opts: dict) -> str:
    doc = json.dumps({k: v for k, v in opts.items() if v is not None}, sort_keys=True, default=str)
    return hashlib.sha256(doc.encode()).hexdigest()[:12]


def _load_roles(opts) -> CovariateSpec:
    if opts.get("roles"):
        try:
            with open(opts["roles"], encoding="utf-8") as fh:
                doc = json.load(fh)
        except FileNotFoundError:
            raise UsageError(f"roles file not found: {opts['roles']}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"roles file is not valid JSON: {exc}") from None
    elif opts.get("roles_map"):
        doc = opts["roles_map"]
    else:
        raise UsageError("missing covariate role configuration: pass --roles FILE or a 'roles_map' config key")
    try:
        return CovariateSpec.from_dict(doc)
    except DataError as exc:
        raise UsageError(str(exc)) from None


def _provenance(command: str, opts: dict) -> str:
    return f"givehr {VERSION} command={command} seed={opts.get('seed', 0)} config={_config_hash(opts)}"


def _write_table(path, header_comment, fieldnames, rows):
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# {header_comment}\n")
        writer = csv.writer(fh)
        writer.writerow(fieldnames)
        writer.writerows(rows)


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x) if np.isfinite(x) else "nan"
    return str(x)


def cmd_validate(opts) -> int:
    if not opts["data"]:
        raise UsageError("missing required option: data")
    spec = _load_roles(opts)
    cohort = load_long_csv(opts["data"], spec, default_censor=opts["tau"])
    report = validate(cohort)
    print(report.summary())
    return 0 if report.ok else 1


def cmd_fit(opts) -> int:
    for key in ("data", "out"):
        if not opts[key]:
            raise UsageError(f"missing required option: {key}")
    spec = _load_roles(opts)
    cohort = load_long_csv(opts["data"], spec, default_censor=opts["tau"])
    report = validate(cohort)
    if not report.ok:
        raise DataError("cohort fails validation:\n" + report.summary())

    fit = fit_givehr(cohort)
    var = None
    if opts["se"] == "sandwich":
        var = sandwich_variance(fit, cohort)
    elif opts["se"] == "bootstrap":
        var = bootstrap_variance(cohort, n_boot=int(opts["boot_reps"]), seed=int(opts["seed"]))

    names = fit.coef_names
    est = fit.coefficients
    if var is not None:
        ci = var.ci(float(opts["ci_level"]))
        rows = [
            (nm, _fmt(float(e)), _fmt(float(s)), _fmt(float(lo)), _fmt(float(hi)))
            for nm, e, s, (lo, hi) in zip(names, est, var.se, ci)
        ]
    else:
        rows = [(nm, _fmt(float(e)), "", "", "") for nm, e in zip(names, est)]
    comment = _provenance("fit", opts)
    _write_table(opts["out"], comment, ["parameter", "estimate", "se", "ci_low", "ci_high"], rows)

    doc = {"provenance": comment, "fit": fit.to_dict()}
    if var is not None:
        doc["variance"] = var.to_dict()
    base, _ = os.path.splitext(opts["out"])
    with open(base + ".model.json", "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
    from .report import fit_figure

    fit_figure(fit, base + ".png", variance=var)
    print(f"wrote {opts['out']}, {base}.model.json, {base}.png")
    return 0


def cmd_simulate(opts) -> int:
    for key in ("scenario", "out"):
        if not opts[key]:
            raise UsageError(f"missing required option: {key}")
    try:
        spec = ScenarioSpec(
            scenario=opts["scenario"],
            n=int(opts["n"]),
            tau=float(opts["tau"]),
            latent_a=float(opts["latent_a"]),
            seed=int(opts["seed"]),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    cohort, truth = generate(spec)
    parent = os.path.dirname(opts["out"])
    if parent:
        os.makedirs(parent, exist_ok=True)
    write_long_csv(cohort, opts["out"], header_comment=_provenance("simulate", opts))
    base, _ = os.path.splitext(opts["out"])
    with open(base + ".truth.json", "w", encoding="utf-8") as fh:
        json.dump(truth.to_dict(), fh)
    print(f"wrote {opts['out']} and {base}.truth.json ({cohort.n} subjects)")
    return 0


def cmd_benchmark(opts) -> int:
    for key in ("scenario", "out"):
        if not opts[key]:
            raise UsageError(f"missing required option: {key}")
    methods = [m.strip() for m in str(opts["methods"]).split(",") if m.strip()]
    bad = [m for m in methods if m not in ESTIMATORS]
    if bad:
        raise UsageError(f"unknown method id(s) {bad}; registered: {', '.join(sorted(ESTIMATORS))}")
    try:
        spec = ScenarioSpec(
            scenario=opts["scenario"],
            n=int(opts["n"]),
            tau=float(opts["tau"]),
            latent_a=float(opts["latent_a"]),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    se_method = None if opts["se"] in (None, "none") else opts["se"]
    table: BenchmarkTable = run_replications(
        spec, methods, int(opts["reps"]), seed=int(opts["seed"]), threads=int(opts["threads"]), se_method=se_method
    )
    rows = [
        (r.scenario, r.estimator, r.n_reps, r.n_failed, _fmt(r.bias), _fmt(r.rmse), _fmt(r.mean_se), int(r.flagged))
        for r in table.rows
    ]
    comment = _provenance("benchmark", opts)
    _write_table(opts["out"], comment, ["scenario", "estimator", "reps", "failures", "bias", "rmse", "mean_se", "flagged"], rows)
    base, _ = os.path.splitext(opts["out"])
    from .report import benchmark_figure

    benchmark_figure(table, base + ".png")
    print(f"wrote {opts['out']} and {base}.png")
    return 0


_COMMANDS = {"validate": cmd_validate, "fit": cmd_fit, "simulate": cmd_simulate, "benchmark": cmd_benchmark}


def _error_record(stage: str, exc: Exception) -> str:
    return json.dumps({"error": {"stage": stage, "type": type(exc).__name__, "message": str(exc)}})


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        opts = _resolve_options(args, args.command)
        return _COMMANDS[args.command](opts)
    except UsageError as exc:
        print(_error_record("config", exc), file=sys.stderr)
        return 2
    except DataError as exc:
        print(_error_record("ingest", exc), file=sys.stderr)
        return 1
    except (FitError, np.linalg.LinAlgError) as exc:
        print(_error_record("fit", exc), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
