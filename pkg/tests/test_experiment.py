import csv
import json
import os

import pytest

from pshurdle.exceptions import InvalidArgumentError
from pshurdle.experiment import (
    ExperimentPlan,
    emit_plot_data,
    load_records,
    plan_to_text,
    read_plan,
    record_key,
    replica_seed,
    run_experiment,
)


def _plan(out, **kw):
    base = dict(scenarios=[3], combinations=[(20, 20)], replicas=2, models=["joint", "fid"],
                master_seed=5, output_dir=str(out), grid_n=8)
    base.update(kw)
    return ExperimentPlan(**base)


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("exp")
    plan = _plan(out)
    run_experiment(plan)
    return plan, out


def _read(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_records_and_aggregates(small_run):
    plan, out = small_run
    recs = load_records(out)
    assert len(recs) == 4
    assert len({r["key"] for r in recs}) == 4
    assert all(r["status"] == "ok" for r in recs)
    for name in ("table2_joint.csv", "table2_fid.csv", "fig3_betas_joint.csv", "fig5_metrics.csv",
                 "zero_summary.csv", "failures.csv", "fig7_fields_s3_n20-20.csv"):
        assert os.path.exists(out / name), name
    assert not os.path.exists(out / "fig3_betas_fid.csv")


def test_fig3_columns(small_run):
    _, out = small_run
    rows = _read(out / "fig3_betas_joint.csv")
    assert list(rows[0]) == ["scenario", "combination", "replica", "beta_prime_hat", "beta_hat"]
    assert len(rows) == 2


def test_fig7_columns(small_run):
    _, out = small_run
    rows = _read(out / "fig7_fields_s3_n20-20.csv")
    assert list(rows[0]) == ["node", "x", "y", "truth", "fdd", "joint", "fid"]
    assert len(rows) == 64
    assert all(r["fdd"] == "" and r["joint"] != "" for r in rows)


def test_rerun_is_idempotent(small_run):
    plan, out = small_run
    before = (out / "records.jsonl").read_text()
    table = (out / "table2_joint.csv").read_text()
    run_experiment(plan)
    assert (out / "records.jsonl").read_text() == before
    assert (out / "table2_joint.csv").read_text() == table


def test_resume_fills_missing_cells(small_run, tmp_path):
    plan, out = small_run
    lines = (out / "records.jsonl").read_text().splitlines()
    partial = tmp_path / "partial"
    partial.mkdir()
    (partial / "records.jsonl").write_text(lines[0] + "\n")
    run_experiment(_plan(partial))
    recs = load_records(partial)
    assert len(recs) == 4
    assert recs[0] == json.loads(lines[0])


def test_aggregates_deterministic(small_run, tmp_path):
    _, out = small_run
    a = tmp_path / "a"
    b = tmp_path / "b"
    for d in (a, b):
        d.mkdir()
        emit_plot_data(load_records(out), str(d))
    for name in os.listdir(a):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_emit_plot_data_empty_raises(tmp_path):
    with pytest.raises(InvalidArgumentError):
        emit_plot_data([], str(tmp_path))
    with pytest.raises(InvalidArgumentError):
        emit_plot_data(str(tmp_path))


def test_replica_seed_depends_on_coordinates():
    seeds = {replica_seed(1, sc, (100, 200), r) for sc in (1, 3, "null") for r in range(5)}
    assert len(seeds) == 15
    assert replica_seed(1, 3, (100, 200), 0) == replica_seed(1, 3, (100, 200), 0)
    assert replica_seed(1, 3, (100, 200), 0) != replica_seed(2, 3, (100, 200), 0)


def test_record_key():
    assert record_key(3, (100, 200), 4, "joint") == "3|100:200|4|joint"


def test_plan_text_round_trip(tmp_path):
    plan = _plan(tmp_path, scenarios=["null", 4], models=["fdd"], fit_options={"curvature": "observed"})
    path = tmp_path / "plan.txt"
    path.write_text(plan_to_text(plan))
    assert read_plan(path) == plan


@pytest.mark.parametrize("text", [
    "scenarios = 7", "combinations = 100-200", "models = gam", "replicas = 0", "colour = red",
    "ipp_replace = maybe", "curvature = flat",
])
def test_bad_plans_raise(tmp_path, text):
    path = tmp_path / "plan.txt"
    path.write_text(text + "\n")
    with pytest.raises(InvalidArgumentError):
        read_plan(path)


def test_failed_fit_is_recorded(tmp_path, monkeypatch):
    import pshurdle.experiment as ex

    def boom(*args, **kwargs):
        raise FloatingPointError("synthetic failure")

    monkeypatch.setattr(ex, "fit", boom)
    run_experiment(_plan(tmp_path, replicas=1, models=["joint"]))
    recs = load_records(tmp_path)
    assert len(recs) == 1 and recs[0]["status"] == "error"
    assert "synthetic failure" in recs[0]["error"]
    rows = _read(tmp_path / "failures.csv")
    assert len(rows) == 1 and rows[0]["model"] == "joint"
