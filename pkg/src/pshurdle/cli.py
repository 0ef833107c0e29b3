"""Command-line entry point (``pshurdle``)."""

import argparse
import csv
import logging
import os
import sys

import numpy as np

from .data import fmt, load_dataset_csv, write_dataset_csv
from .exceptions import InvalidArgumentError, NumericalError
from .experiment import FIT_KEYS, parse_fit_options, read_key_values, read_plan, run_experiment
from .grid import build_grid
from .laplace import FitConfig, FitResult, fit
from .metrics import metric_report, predict_fields
from .simulate import SCENARIOS, ScenarioConfig, make_scenario

GRID_KEYS = ("grid_n", "nx", "ny", "x_min", "x_max", "y_min", "y_max")


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])


def _read_columns(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise InvalidArgumentError(f"{path} has no rows")
    return {k: np.array([float(r[k]) if r[k] != "" else np.nan for r in rows]) for k in rows[0]}


def cmd_simulate(args):
    if args.scenario == "null":
        cfg = ScenarioConfig(beta_prime=0.0, beta=0.0, n_s=args.ns, n_c=args.nc, seed=args.seed,
                             scenario_id="null", upsilon=args.upsilon, ipp_replace=args.ipp_replace)
    else:
        sid = int(args.scenario)
        if sid not in SCENARIOS:
            raise InvalidArgumentError(f"scenario must be one of {sorted(SCENARIOS)} or null")
        cfg = ScenarioConfig.preset(sid, n_s=args.ns, n_c=args.nc, seed=args.seed,
                                    upsilon=args.upsilon, ipp_replace=args.ipp_replace)
    grid = build_grid(args.grid_n, args.grid_n)
    truth, data = make_scenario(cfg, grid)
    os.makedirs(args.out, exist_ok=True)
    _write_rows(os.path.join(args.out, "truth.csv"),
                ["node", "x", "y", "v", "u", "pi", "mu", "z", "y_latent", "s"], [
                    (k, x, y, truth.v_field[k], truth.u_field[k], truth.pi_field[k], truth.mu_field[k],
                     int(truth.z_field[k]), truth.y_field[k], truth.s_field[k])
                    for k, (x, y) in enumerate(grid.coords)
                ])
    write_dataset_csv(data, os.path.join(args.out, "data.csv"))
    for src, info in data.zero_summary().items():
        print(f"{src}: n={info['n']} present={info['positive']} share={info['positive_share']:.3f}")
    return 0


def _grid_from_config(conf, data):
    n = int(conf.get("grid_n", 60))
    nx, ny = int(conf.get("nx", n)), int(conf.get("ny", n))
    if all(k in conf for k in ("x_min", "x_max", "y_min", "y_max")):
        bounds = tuple(float(conf[k]) for k in ("x_min", "x_max", "y_min", "y_max"))
    elif len(data) == 0 or (np.all(data.locations >= 0) and np.all(data.locations <= 1)):
        bounds = (0.0, 1.0, 0.0, 1.0)
    else:
        lo, hi = data.locations.min(axis=0), data.locations.max(axis=0)
        pad = 0.05 * (hi - lo)
        bounds = (lo[0] - pad[0], hi[0] + pad[0], lo[1] - pad[1], hi[1] + pad[1])
    return build_grid(nx, ny, bounds)


def cmd_fit(args):
    data = load_dataset_csv(args.data)
    for src, info in data.zero_summary().items():
        print(f"{src}: n={info['n']} present={info['positive']} share={info['positive_share']:.3f}")
    conf = read_key_values(args.config) if args.config else {}
    unknown = set(conf) - set(GRID_KEYS) - set(FIT_KEYS)
    if unknown:
        raise InvalidArgumentError(f"unknown config keys: {', '.join(sorted(unknown))}")
    fit_cfg = FitConfig(**{"std_errors": True, **parse_fit_options(conf)})
    grid = _grid_from_config(conf, data)
    result = fit(data, grid, fit_cfg, model=args.model)
    os.makedirs(args.out, exist_ok=True)
    result.to_json(os.path.join(args.out, "fit.json"))
    rows = [(n, result.theta_hat.get(n), result.std_errors.get(n)) for n in result.names]
    rows += [(k, v, (result.interpretable_se or {}).get(k)) for k, v in result.interpretable.items()]
    _write_rows(os.path.join(args.out, "estimates.csv"), ["param", "estimate", "std_error"],
                [(n, float(v), "" if s is None else float(s)) for n, v, s in rows])
    for n, v, s in rows:
        print(f"{n:>14s} {v: .6f}" + ("" if s is None else f"  (se {s:.4f})"))
    print(f"nll_marginal {result.nll_marginal:.6f}  converged={result.converged}")
    for w in result.warnings:
        print(f"warning: {w}", file=sys.stderr)
    return 0 if result.converged else 3


def cmd_predict(args):
    result = FitResult.from_json(args.fit)
    grid = result.grid
    pred = predict_fields(result, grid)
    os.makedirs(args.out, exist_ok=True)
    se_z = pred.se_z if pred.se_z is not None else np.full(grid.n_nodes, np.nan)
    se_y = pred.se_y if pred.se_y is not None else np.full(grid.n_nodes, np.nan)
    _write_rows(os.path.join(args.out, "predictions.csv"),
                ["node", "x", "y", "pi_hat", "mu_hat", "s_hat", "se_z", "se_y"], [
                    (k, x, y, pred.pi_hat[k], pred.mu_hat[k], pred.s_hat[k], se_z[k], se_y[k])
                    for k, (x, y) in enumerate(grid.coords)
                ])
    return 0


def cmd_metrics(args):
    truth = _read_columns(args.truth)
    pred = _read_columns(args.pred)
    s_true = truth["s"] if "s" in truth else truth["truth"]
    s_pred = pred["s_hat"]
    rep = metric_report(s_true, s_pred, n_bins=args.bins)
    print("rmse,mae,hellinger")
    print(",".join(fmt(v) for v in (rep.rmse, rep.mae, rep.hellinger)))
    return 0


def cmd_experiment(args):
    plan = read_plan(args.plan, output_dir=args.out)

    def progress(rec):
        status = rec["status"]
        extra = f"{rec['wall_time']:.1f}s" if status == "ok" else rec.get("error", "")
        print(f"{rec['key']}: {status} {extra}", flush=True)

    out = run_experiment(plan, jobs=args.jobs, progress=progress)
    print(f"results in {out}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="pshurdle", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a synthetic truth and dataset")
    s.add_argument("--scenario", required=True, help="preset 1-5 or 'null'")
    s.add_argument("--ns", type=int, default=100)
    s.add_argument("--nc", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--grid-n", type=int, default=60)
    s.add_argument("--upsilon", type=float, default=1.0)
    s.add_argument("--ipp-replace", action="store_true", help="draw FDD cells with replacement")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    f = sub.add_parser("fit", help="fit one model to a dataset CSV")
    f.add_argument("--data", required=True)
    f.add_argument("--model", choices=("fid", "fdd", "joint"), default="joint")
    f.add_argument("--config", help="key = value file with grid and optimizer settings")
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_fit)

    e = sub.add_parser("experiment", help="run a simulation-estimation plan")
    e.add_argument("--plan", required=True)
    e.add_argument("--jobs", type=int, default=1)
    e.add_argument("--out", help="results directory (overrides the plan)")
    e.set_defaults(func=cmd_experiment)

    r = sub.add_parser("predict", help="predicted surfaces from a saved fit")
    r.add_argument("--fit", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_predict)

    m = sub.add_parser("metrics", help="RMSE, MAE and Hellinger distance of a prediction")
    m.add_argument("--truth", required=True)
    m.add_argument("--pred", required=True)
    m.add_argument("--bins", type=int, default=30)
    m.set_defaults(func=cmd_metrics)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (InvalidArgumentError, NumericalError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
