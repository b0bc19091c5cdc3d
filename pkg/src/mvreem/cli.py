"""Command-line interface: fit, predict, simulate, report.

Exit codes: 0 success (including flagged fits), 2 argument errors,
3 data errors, 4 fit errors.
"""

from __future__ import annotations

import argparse
import csv
import math
import os
import sys

import numpy as np
import pandas as pd

from .data import CsvSchema, DataError, MISSING_MARKERS, get_family, load_csv
from .mixed_model import FitError
from .reem import ReemModel, ReemOptions, fit_generalized_reem, fit_reem
from .simulate import (
    GRID_COLUMNS,
    METHOD_LABELS,
    METRIC_COLUMNS,
    SimulationConfig,
    aggregate_results,
    run_experiment,
)
from .tree import GrowControls

EXIT_OK = 0
EXIT_ARGS = 2
EXIT_DATA = 3
EXIT_FIT = 4


def _comma_list(text: str) -> list:
    return [t.strip() for t in text.split(",") if t.strip()]


def _float_list(text: str) -> list:
    return [float(t) for t in _comma_list(text)]


def _int_list(text: str) -> list:
    return [int(t) for t in _comma_list(text)]


class _ArgumentError(Exception):
    pass


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mvreem",
        description="Multivariate regression trees with random effects "
                    "for longitudinal panel data.")
    sub = parser.add_subparsers(dest="command", required=True)

    fit = sub.add_parser("fit", help="fit a model on a long-format panel CSV")
    fit.add_argument("--data", required=True, help="input CSV path")
    fit.add_argument("--responses", required=True, help="comma list of response columns")
    fit.add_argument("--predictors", required=True, help="comma list of predictor columns")
    fit.add_argument("--object", required=True, help="object id column")
    fit.add_argument("--time", required=True, help="time column")
    fit.add_argument("--design", default="", help="comma list of random-effect design "
                     "columns (default: intercept only)")
    fit.add_argument("--family", default="gaussian",
                     choices=["gaussian", "bernoulli", "poisson"])
    fit.add_argument("--standardize", default="marg", choices=["marg", "cov", "none"])
    fit.add_argument("--select", default="min", choices=["min", "1se"])
    fit.add_argument("--folds", type=int, default=10)
    fit.add_argument("--tol", type=float, default=1e-4)
    fit.add_argument("--max-iter", type=int, default=50)
    fit.add_argument("--seed", type=int, default=0)
    fit.add_argument("--out", default="model.json", help="model file to write")

    pred = sub.add_parser("predict", help="predict from a saved model")
    pred.add_argument("--model", required=True)
    pred.add_argument("--data", required=True)
    pred.add_argument("--out", required=True)
    pred.add_argument("--population-only", action="store_true",
                      help="ignore object-level random effects")

    sim = sub.add_parser("simulate", help="run a Monte Carlo sweep")
    sim.add_argument("--scenario", required=True,
                     choices=["simple_bivariate", "complex_bivariate",
                              "five_response", "no_random_effect"])
    sim.add_argument("--I", required=True, help="comma list of object counts")
    sim.add_argument("--T", required=True, help="comma list of times per object")
    sim.add_argument("--sigma12", default=None,
                     help="comma list of random-effect correlations (bivariate)")
    sim.add_argument("--sigmaB", default=None,
                     help="comma list of random-effect correlations (five-response)")
    sim.add_argument("--sigma-eps", required=True,
                     help="comma list of residual variances")
    sim.add_argument("--reps", type=int, required=True)
    sim.add_argument("--seed", type=int, required=True)
    sim.add_argument("--methods", required=True,
                     help="comma list from: " + ", ".join(METHOD_LABELS))
    sim.add_argument("--jobs", type=int, default=1)
    sim.add_argument("--out-dir", required=True)

    rep = sub.add_parser("report", help="emit plot-ready per-metric tables")
    rep.add_argument("--results", required=True, help="raw results CSV")
    rep.add_argument("--out-dir", required=True)
    return parser


# ---------------------------------------------------------------------------
# fit


def _cmd_fit(args) -> int:
    if args.folds < 2:
        raise _ArgumentError("--folds must be at least 2")
    if args.tol <= 0:
        raise _ArgumentError("--tol must be positive")
    if args.max_iter < 1:
        raise _ArgumentError("--max-iter must be at least 1")
    schema = CsvSchema(object_col=args.object, time_col=args.time,
                       response_cols=_comma_list(args.responses),
                       predictor_cols=_comma_list(args.predictors),
                       design_cols=_comma_list(args.design))
    if not schema.response_cols:
        raise _ArgumentError("--responses must name at least one column")
    if not schema.predictor_cols:
        raise _ArgumentError("--predictors must name at least one column")
    ds = load_csv(args.data, schema)
    family = get_family(args.family)
    opts = ReemOptions(standardization=args.standardize,
                       selection="one_se" if args.select == "1se" else "min",
                       n_folds=args.folds, tol=args.tol, max_iter=args.max_iter,
                       controls=GrowControls(), family=family.name,
                       seed=args.seed)
    model = fit_reem(ds, opts) if family.is_gaussian else fit_generalized_reem(ds, opts)
    model.save(args.out)
    print(f"model written to {args.out}")
    print(f"  leaves:         {model.tree.n_leaves}")
    print(f"  log-likelihood: {model.mixed.loglik:.6f}")
    print(f"  iterations:     {len(model.trace)}")
    print(f"  status:         {model.status}"
          + (f" (flags: {', '.join(model.flags)})" if model.flags else ""))
    return EXIT_OK


# ---------------------------------------------------------------------------
# predict


def _read_predict_rows(path, model: ReemModel):
    """Prediction input: object, time, the model's predictor columns, and
    its design columns when the model was fit with explicit ones."""
    need_design = model.design_names != ["intercept"]
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file, header row required") from None
        cols = ["object", "time"] + list(model.predictor_names)
        if need_design:
            cols += list(model.design_names)
        idx = {}
        for name in cols:
            if name not in header:
                raise DataError(f"{path}: column '{name}' not found in header")
            idx[name] = header.index(name)
        ids, times, X, Z = [], [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            ids.append(row[idx["object"]].strip())
            times.append(row[idx["time"]].strip())
            xs = []
            for c in model.predictor_names:
                tok = row[idx[c]].strip()
                if tok in MISSING_MARKERS:
                    xs.append(math.nan)
                else:
                    try:
                        xs.append(float(tok))
                    except ValueError:
                        raise DataError(f"{path}:{lineno}: non-numeric value "
                                        f"'{tok}' in column '{c}'") from None
            X.append(xs)
            if need_design:
                try:
                    Z.append([float(row[idx[c]].strip()) for c in model.design_names])
                except ValueError:
                    raise DataError(f"{path}:{lineno}: non-numeric design value") from None
            else:
                Z.append([1.0])
    k = len(model.predictor_names)
    q = len(model.design_names)
    return (ids, times,
            np.asarray(X, dtype=float).reshape(len(ids), k),
            np.asarray(Z, dtype=float).reshape(len(ids), q))


def _cmd_predict(args) -> int:
    model = ReemModel.load(args.model)
    ids, times, X, Z = _read_predict_rows(args.data, model)
    header = (["object", "time"]
              + [f"pred_{name}" for name in model.response_names] + ["warning"])
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        if ids:
            pred = model.predict_matrix(X, Z, ids,
                                        population_only=args.population_only)
            known = set(model.mixed.blups)
            for i in range(len(ids)):
                warn = ("" if args.population_only or ids[i] in known
                        else "unknown_object")
                writer.writerow([ids[i], times[i]]
                                + [repr(float(v)) for v in pred[i]] + [warn])
    print(f"predictions written to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# simulate


def _cmd_simulate(args) -> int:
    for label in _comma_list(args.methods):
        if label not in METHOD_LABELS:
            raise _ArgumentError(f"unknown method '{label}'; valid: "
                                 + ", ".join(METHOD_LABELS))
    methods = _comma_list(args.methods)
    if not methods:
        raise _ArgumentError("--methods must name at least one method")
    if args.reps < 1:
        raise _ArgumentError("--reps must be at least 1")
    sigma_flag = args.sigmaB if args.scenario == "five_response" else args.sigma12
    if args.scenario == "no_random_effect":
        sigmas = [0.0]
    elif sigma_flag is None:
        raise _ArgumentError("--sigma12 (bivariate) or --sigmaB (five-response) "
                             "is required for this scenario")
    else:
        sigmas = _float_list(sigma_flag)
    try:
        I_values = _int_list(args.I)
        T_values = _int_list(args.T)
        eps_values = _float_list(args.sigma_eps)
    except ValueError as exc:
        raise _ArgumentError(f"bad numeric list: {exc}") from None

    configs = [SimulationConfig(scenario=args.scenario, n_objects=i, n_times=t,
                                sigma_re=s, sigma_eps2=e)
               for i in I_values for t in T_values
               for s in sigmas for e in eps_values]
    print(f"running {len(configs)} grid point(s) x {args.reps} rep(s) "
          f"x {len(methods)} method(s)", file=sys.stderr)
    run_experiment(configs, methods, args.reps, args.seed,
                   jobs=args.jobs, out_dir=args.out_dir, progress=True)
    print(f"results written to {args.out_dir}", file=sys.stderr)
    return EXIT_OK


# ---------------------------------------------------------------------------
# report


def _cmd_report(args) -> int:
    try:
        raw = pd.read_csv(args.results)
    except Exception as exc:
        raise DataError(f"cannot read results file: {exc}") from None
    missing = [c for c in GRID_COLUMNS + ["method"] + METRIC_COLUMNS
               if c not in raw.columns]
    if missing:
        raise DataError(f"results file lacks columns: {', '.join(missing)}")
    agg = aggregate_results(raw)
    os.makedirs(args.out_dir, exist_ok=True)
    keys = GRID_COLUMNS + ["method"]
    for metric in METRIC_COLUMNS:
        name = "recovery_rate" if metric == "recovered" else metric
        table = agg[keys + [metric]].rename(columns={metric: name})
        table = table[table[name].notna()] if not table.empty else table
        table.to_csv(os.path.join(args.out_dir, f"{name}.csv"), index=False)
    print(f"report tables written to {args.out_dir}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else EXIT_ARGS
    handlers = {"fit": _cmd_fit, "predict": _cmd_predict,
                "simulate": _cmd_simulate, "report": _cmd_report}
    try:
        return handlers[args.command](args)
    except _ArgumentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARGS
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FitError, np.linalg.LinAlgError) as exc:
        print(f"fit error: {exc}", file=sys.stderr)
        return EXIT_FIT


if __name__ == "__main__":
    sys.exit(main())
