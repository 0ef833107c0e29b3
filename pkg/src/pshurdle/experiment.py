"""Simulation-estimation experiments.

A plan is a flat ``key = value`` text file::

    scenarios = 3, null        # preset ids 1-5, or "null" for no preferential sampling
    combinations = 100:100, 100:500
    replicas = 30
    models = joint, fid
    master_seed = 2024

Each (scenario, combination, replica) cell simulates one dataset and fits
every requested model to it.  One JSON record per fitted model is appended
to ``records.jsonl``; cells whose records already exist are skipped, so an
interrupted run resumes where it stopped.  Aggregate CSVs are rebuilt from
the records at the end and depend only on their content.
"""

import csv
import json
import logging
import os
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import __version__
from .data import fmt
from .exceptions import InvalidArgumentError
from .grid import build_grid
from .laplace import FitConfig, fit
from .metrics import metric_report, predict_fields, summarize_replicas
from .simulate import SCENARIOS, ScenarioConfig, make_scenario

logger = logging.getLogger(__name__)

RECORDS = "records.jsonl"
FIELDS_DIR = "fields"
MODEL_CHOICES = ("fdd", "joint", "fid")
NULL_SCENARIO = "null"
SUMMARY_PARAMS = (
    "alpha_prime", "alpha", "alpha_dprime", "beta_prime", "beta",
    "phi_v", "sigma_v", "phi_u", "sigma_u", "upsilon",
)
FIT_KEYS = ("inner_tol", "inner_max_iter", "outer_tol", "outer_gtol", "outer_max_iter",
            "fd_step", "gradient", "curvature", "std_errors")


def _parse_scenario(token):
    token = str(token).strip().lower()
    if token == NULL_SCENARIO:
        return NULL_SCENARIO
    try:
        sid = int(token)
    except ValueError:
        raise InvalidArgumentError(f"unknown scenario {token!r}") from None
    if sid not in SCENARIOS:
        raise InvalidArgumentError(f"unknown scenario {sid}; presets are {sorted(SCENARIOS)}")
    return sid


def _parse_combination(token):
    try:
        n_s, n_c = (int(t) for t in token.strip().split(":"))
    except ValueError:
        raise InvalidArgumentError(f"combination must look like 100:200, got {token!r}") from None
    if n_s < 0 or n_c < 0:
        raise InvalidArgumentError("sample sizes must be nonnegative")
    return n_s, n_c


def parse_fit_options(mapping):
    """Typed FitConfig keyword arguments from string values; other keys are ignored."""
    types = {f.name: f.type for f in fields(FitConfig)}
    out = {}
    for key in FIT_KEYS:
        if key not in mapping:
            continue
        val = str(mapping[key]).strip()
        ftype = types[key]
        if ftype is bool:
            out[key] = _parse_bool(val)
        elif ftype is int:
            out[key] = int(val)
        elif ftype is float:
            out[key] = float(val)
        else:
            out[key] = val
    return out


def _parse_bool(text):
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise InvalidArgumentError(f"not a boolean: {text!r}")


@dataclass
class ExperimentPlan:
    scenarios: list = field(default_factory=lambda: [3])
    combinations: list = field(default_factory=lambda: [(100, 100)])
    replicas: int = 30
    models: list = field(default_factory=lambda: ["joint"])
    master_seed: int = 0
    output_dir: str = "results"
    grid_n: int = 60
    upsilon: float = 1.0
    ipp_replace: bool = False
    fig7_replica: int = 0
    fit_options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.replicas < 1:
            raise InvalidArgumentError("replicas must be at least 1")
        if not self.models:
            raise InvalidArgumentError("at least one model is required")
        for m in self.models:
            if m not in MODEL_CHOICES:
                raise InvalidArgumentError(f"unknown model {m!r}")
        if self.grid_n < 2:
            raise InvalidArgumentError("grid_n must be at least 2")
        FitConfig(**self.fit_config_kwargs())

    def fit_config_kwargs(self):
        opts = {"std_errors": False}
        opts.update(self.fit_options)
        return opts

    @classmethod
    def from_mapping(cls, mapping):
        kw, fit_opts = {}, {}
        for key, raw in mapping.items():
            key = key.strip()
            val = str(raw).strip()
            if key == "scenarios":
                kw[key] = [_parse_scenario(t) for t in val.split(",") if t.strip()]
            elif key == "combinations":
                kw[key] = [_parse_combination(t) for t in val.split(",") if t.strip()]
            elif key == "models":
                kw[key] = [t.strip().lower() for t in val.split(",") if t.strip()]
            elif key in ("replicas", "master_seed", "grid_n", "fig7_replica"):
                kw[key] = int(val)
            elif key == "upsilon":
                kw[key] = float(val)
            elif key == "ipp_replace":
                kw[key] = _parse_bool(val)
            elif key == "output_dir":
                kw[key] = val
            elif key in FIT_KEYS:
                fit_opts.update(parse_fit_options({key: val}))
            else:
                raise InvalidArgumentError(f"unknown plan key {key!r}")
        kw["fit_options"] = fit_opts
        return cls(**kw)

    def cells(self):
        for sc in self.scenarios:
            for combo in self.combinations:
                for rep in range(self.replicas):
                    yield sc, combo, rep


def read_key_values(path):
    """Parse a flat ``key = value`` file; ``#`` starts a comment."""
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InvalidArgumentError(f"{path}:{lineno}: expected key = value")
            key, val = line.split("=", 1)
            out[key.strip()] = val.strip()
    return out


def read_plan(path, **overrides):
    mapping = read_key_values(path)
    mapping.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentPlan.from_mapping(mapping)


def scenario_code(scenario):
    return 0 if scenario == NULL_SCENARIO else int(scenario)


def replica_seed(master_seed, scenario, combination, replica):
    """64-bit seed determined by the plan coordinates alone."""
    ss = np.random.SeedSequence(
        int(master_seed), spawn_key=(scenario_code(scenario), combination[0], combination[1], replica)
    )
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def scenario_config(plan, scenario, combination, replica):
    seed = replica_seed(plan.master_seed, scenario, combination, replica)
    common = dict(n_s=combination[0], n_c=combination[1], seed=seed,
                  upsilon=plan.upsilon, ipp_replace=plan.ipp_replace)
    if scenario == NULL_SCENARIO:
        return ScenarioConfig(beta_prime=0.0, beta=0.0, scenario_id=NULL_SCENARIO, **common)
    return ScenarioConfig.preset(scenario, **common)


def record_key(scenario, combination, replica, model):
    return f"{scenario}|{combination[0]}:{combination[1]}|{replica}|{model}"


def _combo_label(combination):
    return f"{combination[0]}:{combination[1]}"


def _fields_path(out_dir, scenario, combination, replica):
    return os.path.join(
        out_dir, FIELDS_DIR, f"s{scenario}_n{combination[0]}-{combination[1]}_r{replica}.csv"
    )


def run_cell(plan, scenario, combination, replica, models):
    """Simulate one replica and fit the requested models; returns records."""
    grid = build_grid(plan.grid_n, plan.grid_n)
    cfg = scenario_config(plan, scenario, combination, replica)
    truth, data = make_scenario(cfg, grid)
    zero = data.zero_summary()
    fit_cfg = FitConfig(**plan.fit_config_kwargs())
    records, preds = [], {}
    for model in models:
        start = time.perf_counter()
        rec = {
            "key": record_key(scenario, combination, replica, model),
            "scenario": scenario, "n_s": combination[0], "n_c": combination[1],
            "replica": replica, "model": model, "seed": cfg.seed,
            "version": __version__, "zero_summary": zero,
        }
        try:
            res = fit(data, grid, fit_cfg, model=model)
            pred = predict_fields(res, grid)
            preds[model] = pred.s_hat
            est = res.estimates()
            est.update(res.interpretable)
            est["upsilon"] = float(np.exp(res.theta_hat.log_upsilon))
            rec.update(
                status="ok",
                estimates=est,
                std_errors=res.std_errors,
                interpretable_se=res.interpretable_se,
                converged=res.converged,
                nll_marginal=res.nll_marginal,
                iterations=res.iterations,
                warnings=res.warnings[:20],
                metrics=metric_report(truth.s_field, pred.s_hat).as_dict(),
                pred_truth_corr=float(np.corrcoef(truth.s_field, pred.s_hat)[0, 1]),
            )
        except Exception as exc:  # a failed replica must not abort the plan
            rec.update(status="error", error=f"{type(exc).__name__}: {exc}",
                       traceback=traceback.format_exc(limit=5))
        rec["wall_time"] = time.perf_counter() - start
        records.append(rec)
    if replica == plan.fig7_replica:
        path = _fields_path(plan.output_dir, scenario, combination, replica)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        existing = _read_fields(path) if os.path.exists(path) else {}
        cols = {"truth": truth.s_field, **existing, **preds}
        _write_fields(path, grid, cols)
    return records


def _write_fields(path, grid, cols):
    names = ["truth"] + [m for m in MODEL_CHOICES if m in cols]
    tmp = path + ".tmp"
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node", "x", "y"] + names)
        for k, (x, y) in enumerate(grid.coords):
            w.writerow([k, fmt(x), fmt(y)] + [fmt(cols[n][k]) for n in names])
    os.replace(tmp, path)


def _read_fields(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    names = [c for c in rows[0] if c not in ("node", "x", "y")] if rows else []
    return {n: np.array([float(r[n]) for r in rows]) for n in names}


def load_records(out_dir):
    path = os.path.join(out_dir, RECORDS)
    if not os.path.exists(path):
        return []
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out


def _cell_task(args):
    plan, scenario, combination, replica, models = args
    return run_cell(plan, scenario, combination, replica, models)


def run_experiment(plan, jobs=1, progress=None):
    """Run every missing cell of ``plan`` and rebuild the aggregate CSVs.

    Returns the output directory.
    """
    os.makedirs(plan.output_dir, exist_ok=True)
    done = {r["key"] for r in load_records(plan.output_dir)}
    tasks = []
    for sc, combo, rep in plan.cells():
        missing = [m for m in plan.models if record_key(sc, combo, rep, m) not in done]
        if missing:
            tasks.append((plan, sc, combo, rep, missing))
    logger.info("%d cells to run (%d keys already complete)", len(tasks), len(done))
    path = os.path.join(plan.output_dir, RECORDS)

    def _append(records):
        # the parent process is the only writer of the record file
        with open(path, "a") as fh:
            for rec in records:
                if rec["key"] in done:
                    continue
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
                done.add(rec["key"])
            fh.flush()
            os.fsync(fh.fileno())
        if progress is not None:
            for rec in records:
                progress(rec)

    if jobs <= 1:
        for task in tasks:
            _append(_cell_task(task))
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for records in pool.map(_cell_task, tasks):
                _append(records)
    plan_records = _plan_records(plan, load_records(plan.output_dir))
    emit_plot_data(plan_records, plan.output_dir)
    return plan.output_dir


def _plan_records(plan, records):
    keys = {record_key(sc, combo, rep, m) for sc, combo, rep in plan.cells() for m in plan.models}
    return [r for r in records if r["key"] in keys]


# -- aggregation ----------------------------------------------------------

def _sort_key(rec):
    return (scenario_code(rec["scenario"]), rec["n_s"], rec["n_c"], rec["model"], rec["replica"])


def _write_csv(path, header, rows):
    tmp = path + ".tmp"
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) if isinstance(v, float) else v for v in row])
    os.replace(tmp, path)


def _value(rec, name):
    v = rec.get("estimates", {}).get(name)
    return float("nan") if v is None else float(v)


def emit_plot_data(results, out_dir=None):
    """Write the aggregate CSV bundles.

    Parameters
    ----------
    results : list of record dicts, or a results directory
    out_dir : str, optional
        Defaults to the results directory.

    Returns
    -------
    list of str
        Paths written.
    """
    if isinstance(results, (str, os.PathLike)):
        out_dir = out_dir or str(results)
        results = load_records(results)
    if not results:
        raise InvalidArgumentError("no results to aggregate")
    if out_dir is None:
        raise InvalidArgumentError("out_dir is required when passing records")
    recs = sorted(results, key=_sort_key)
    ok = [r for r in recs if r.get("status") == "ok"]
    written = []

    groups = {}
    for r in ok:
        groups.setdefault((r["model"], scenario_code(r["scenario"]), r["scenario"], r["n_s"], r["n_c"]), []).append(r)

    by_model = {}
    for (model, _, sc, n_s, n_c), rows in sorted(groups.items(), key=lambda kv: kv[0][:2] + kv[0][3:]):
        summary = summarize_replicas({p: [_value(r, p) for r in rows] for p in SUMMARY_PARAMS})
        for p in SUMMARY_PARAMS:
            s = summary[p]
            if s["n"] == 0:
                continue
            by_model.setdefault(model, []).append(
                (p, sc, _combo_label((n_s, n_c)), s["median"], s["q1"], s["q3"], s["mean"], s["n"])
            )
    for model, rows in sorted(by_model.items()):
        path = os.path.join(out_dir, f"table2_{model}.csv")
        _write_csv(path, ["param", "scenario", "combination", "median", "q1", "q3"], [r[:6] for r in rows])
        written.append(path)
        path = os.path.join(out_dir, f"means_{model}.csv")
        _write_csv(path, ["param", "scenario", "combination", "mean", "n"],
                   [(r[0], r[1], r[2], r[6], r[7]) for r in rows])
        written.append(path)

    for model in sorted({r["model"] for r in ok}):
        rows = [r for r in ok if r["model"] == model]
        if model != "fid":
            path = os.path.join(out_dir, f"fig3_betas_{model}.csv")
            _write_csv(path, ["scenario", "combination", "replica", "beta_prime_hat", "beta_hat"], [
                (r["scenario"], _combo_label((r["n_s"], r["n_c"])), r["replica"],
                 _value(r, "beta_prime"), _value(r, "beta")) for r in rows
            ])
            written.append(path)
        path = os.path.join(out_dir, f"fig4_intercepts_{model}.csv")
        _write_csv(path, ["scenario", "combination", "replica", "alpha_prime_hat", "alpha_hat", "alpha_dprime_hat"], [
            (r["scenario"], _combo_label((r["n_s"], r["n_c"])), r["replica"],
             _value(r, "alpha_prime"), _value(r, "alpha"),
             _value(r, "alpha_dprime") if model != "fid" else "") for r in rows
        ])
        written.append(path)

    path = os.path.join(out_dir, "fig5_metrics.csv")
    _write_csv(path, ["scenario", "combination", "replica", "model", "rmse", "mae", "hellinger"], [
        (r["scenario"], _combo_label((r["n_s"], r["n_c"])), r["replica"], r["model"],
         float(r["metrics"]["rmse"]), float(r["metrics"]["mae"]), float(r["metrics"]["hellinger"]))
        for r in ok
    ])
    written.append(path)

    seen, zrows = set(), []
    for r in recs:
        cell = (r["scenario"], r["n_s"], r["n_c"], r["replica"])
        if cell in seen:
            continue
        seen.add(cell)
        for src in ("FID", "FDD"):
            z = r["zero_summary"][src]
            zrows.append((r["scenario"], _combo_label((r["n_s"], r["n_c"])), r["replica"], src,
                          z["n"], z["positive"], float(z["positive_share"])))
    path = os.path.join(out_dir, "zero_summary.csv")
    _write_csv(path, ["scenario", "combination", "replica", "source", "n", "positive", "positive_share"], zrows)
    written.append(path)

    failures = [r for r in recs if r.get("status") != "ok"]
    path = os.path.join(out_dir, "failures.csv")
    _write_csv(path, ["scenario", "combination", "replica", "model", "error"], [
        (r["scenario"], _combo_label((r["n_s"], r["n_c"])), r["replica"], r["model"], r.get("error", ""))
        for r in failures
    ])
    written.append(path)

    cells = sorted({(scenario_code(r["scenario"]), r["scenario"], r["n_s"], r["n_c"], r["replica"]) for r in recs})
    for _, sc, n_s, n_c, rep in cells:
        src = _fields_path(out_dir, sc, (n_s, n_c), rep)
        if not os.path.exists(src):
            continue
        dst = os.path.join(out_dir, f"fig7_fields_s{sc}_n{n_s}-{n_c}.csv")
        with open(src, newline="") as fh:
            rows = list(csv.DictReader(fh))
        header = ["node", "x", "y", "truth"] + [m for m in MODEL_CHOICES]
        _write_csv(dst, header, [
            [r["node"], r["x"], r["y"]] + [r.get(c, "") for c in header[3:]] for r in rows
        ])
        written.append(dst)
    return written


def plan_to_text(plan):
    """Inverse of :func:`read_plan` (useful for logging what ran)."""
    d = asdict(plan)
    lines = [
        "scenarios = " + ", ".join(str(s) for s in d["scenarios"]),
        "combinations = " + ", ".join(f"{a}:{b}" for a, b in d["combinations"]),
        f"replicas = {d['replicas']}",
        "models = " + ", ".join(d["models"]),
        f"master_seed = {d['master_seed']}",
        f"output_dir = {d['output_dir']}",
        f"grid_n = {d['grid_n']}",
        f"upsilon = {fmt(d['upsilon'])}",
        f"ipp_replace = {str(d['ipp_replace']).lower()}",
        f"fig7_replica = {d['fig7_replica']}",
    ]
    lines += [f"{k} = {v}" for k, v in sorted(d["fit_options"].items())]
    return "\n".join(lines) + "\n"
