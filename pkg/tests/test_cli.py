import csv
import json
import math

import numpy as np
import pytest

from neuralpde import cli
from neuralpde.experiment import (
    RECORD_COLUMNS,
    SUMMARY_COLUMNS,
    EmptySummaryError,
    ExperimentConfig,
    RunRecord,
    aggregate,
    emit_outputs,
    read_records,
    run_experiment,
)
from neuralpde.nn import DivergenceError
from neuralpde.sim import ConfigurationError

TINY_TRAINING = {"batch_size": 50, "iters_per_step": 5, "iters_first_step": 10, "chunk_iters": 5, "eval_batch": 200}


def lq_config(**extra):
    return {"problem": "lq", "scheme": "hybrid_now", "problem_params": {"T": 2}, "training": TINY_TRAINING, "seeds": [0, 1, 2], **extra}


def record(estimate, problem="p", scheme="s", seed=0, reference=None, status="ok"):
    return RunRecord("h", problem, scheme, 1, 20, 4, seed, estimate, 1.0, status, reference)


# ---------------------------------------------------------------- configs


def test_config_defaults():
    cfg = ExperimentConfig.from_dict({"problem": "cva", "scheme": "dbdp1"})
    assert cfg.training.batch_size == 1000
    assert (cfg.grid.N, cfg.grid.kappa_hat) == (20, 4)
    assert (cfg.training.iters_per_step, cfg.training.iters_first_step) == (400, 4000)
    assert cfg.seeds == [0]


@pytest.mark.parametrize(
    "bad",
    [
        {"problem": "cva", "scheme": "dbdp1", "seed": [1]},
        {"problem": "cva", "scheme": "dbdp1", "grid": {"n": 20}},
        {"problem": "cva", "scheme": "dbdp1", "training": {"lr": 0.1}},
        {"problem": "cva"},
        {"problem": "nope", "scheme": "dbdp1"},
        {"problem": "cva", "scheme": "nope"},
        {"problem": "cva", "scheme": "hybrid_now"},
        {"problem": "lq", "scheme": "dbdp1"},
        {"problem": "cva", "scheme": "dbdp1", "grid": {"N": 10, "kappa_hat": 3}},
        {"problem": "cva", "scheme": "dbdp1", "seeds": []},
        {"problem": "cva", "scheme": "dbdp1", "seeds": [1, 1]},
        {"problem": "cva", "scheme": "dbdp1", "training": {"batch_size": 0}},
    ],
)
def test_invalid_configs_rejected(bad):
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_dict(bad)


def test_config_hash_ignores_key_order_seeds_and_output():
    a = ExperimentConfig.from_dict({"problem": "cva", "scheme": "dbdp1", "problem_params": {"d": 3, "beta": 0.03}, "seeds": [0]})
    b = ExperimentConfig.from_dict({"seeds": [5, 6], "problem_params": {"beta": 0.03, "d": 3}, "scheme": "dbdp1", "problem": "cva", "out_dir": "x"})
    c = ExperimentConfig.from_dict({"problem": "cva", "scheme": "dbdp1", "problem_params": {"d": 3, "beta": 0.04}})
    assert a.config_hash() == b.config_hash()
    assert a.config_hash() != c.config_hash()
    assert len(a.config_hash()) == 16


def test_mismatched_family_rejected_at_run_time():
    with pytest.raises(ConfigurationError):
        run_experiment(ExperimentConfig.from_dict({"problem": "merton", "scheme": "dbdp1"}), write_runs=False)
    with pytest.raises(ConfigurationError):
        run_experiment(ExperimentConfig.from_dict({"problem": "cva", "scheme": "2emdbdp"}), write_runs=False)


# ---------------------------------------------------------------- running


def test_lq_three_seeds():
    records = run_experiment(ExperimentConfig.from_dict(lq_config()), write_runs=False)
    assert len(records) == 3
    assert len({r.estimate for r in records}) == 3
    assert len({r.config_hash for r in records}) == 1
    assert all(r.status == "ok" and r.problem == "lq" for r in records)
    again = run_experiment(ExperimentConfig.from_dict(lq_config(seeds=[1])), write_runs=False)
    assert again[0].estimate == records[1].estimate


def test_crash_isolation(monkeypatch):
    from neuralpde import experiment

    real = experiment._run_one

    def flaky(config, seed):
        if seed == 1:
            raise DivergenceError("boom", 3)
        return real(config, seed)

    monkeypatch.setattr(experiment, "_run_one", flaky)
    records = run_experiment(ExperimentConfig.from_dict(lq_config()), write_runs=False)
    assert [r.status for r in records] == ["ok", "diverged", "ok"]
    assert math.isnan(records[1].estimate)
    assert aggregate(records)[0]["n_runs"] == 2


# ---------------------------------------------------------------- aggregation


def test_aggregate_hand_values():
    s = aggregate([record(1.0, seed=0), record(2.0, seed=1), record(3.0, seed=2)])
    assert s[0]["mean"] == 2.0 and s[0]["sd"] == 1.0 and s[0]["n_runs"] == 3
    single = aggregate([record(0.5, reference=0.4)])[0]
    assert single["sd"] == 0.0
    assert single["rel_err_pct"] == pytest.approx(25.0)
    merton = aggregate([record(-0.50673, seed=k, reference=-0.50662) for k in range(10)])[0]
    assert round(merton["rel_err_pct"], 3) == 0.022
    assert math.isnan(aggregate([record(1.0)])[0]["rel_err_pct"])


def test_aggregate_groups_and_empty_input():
    s = aggregate([record(1.0, problem="a"), record(2.0, problem="b"), record(4.0, problem="b", seed=1)])
    assert {(r["problem"], r["mean"]) for r in s} == {("a", 1.0), ("b", 3.0)}
    with pytest.raises(EmptySummaryError):
        aggregate([])
    with pytest.raises(EmptySummaryError):
        aggregate([record(math.nan, status="diverged")])


# ---------------------------------------------------------------- outputs


def test_empty_outputs(tmp_path):
    paths = emit_outputs([], [], tmp_path)
    assert paths["records"].read_text().strip() == ",".join(RECORD_COLUMNS)
    assert paths["summary"].read_text().strip() == ",".join(SUMMARY_COLUMNS)
    assert json.loads(paths["summary_json"].read_text()) == []


def test_records_round_trip(tmp_path):
    estimate = 0.059501234567891234
    rec = RunRecord("abc", "cva_d1", "dbdp1", 1, 20, 4, 7, estimate, 12.345678901234567, "ok", 0.0595)
    emit_outputs(aggregate([rec]), [rec], tmp_path)
    back = read_records(tmp_path / "records.csv")[0]
    assert float(f"{back.estimate:.15g}") == float(f"{estimate:.15g}")
    assert back.estimate == estimate
    assert (back.problem, back.scheme, back.dim, back.N, back.kappa_hat, back.seed, back.status) == ("cva_d1", "dbdp1", 1, 20, 4, 7, "ok")
    assert back.reference == 0.05950


def test_summary_files_mirror_aggregate(tmp_path):
    records = [record(0.1 * k, problem="cva_d1", seed=k, reference=0.0595) for k in range(1, 4)]
    summaries = aggregate(records)
    emit_outputs(summaries, records, tmp_path)
    with open(tmp_path / "summary.csv") as fh:
        row = next(csv.DictReader(fh))
    js = json.loads((tmp_path / "summary.json").read_text())[0]
    for key in ("mean", "sd", "rel_err_pct"):
        assert float(row[key]) == summaries[0][key] == js[key]


def test_output_errors_name_the_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match="file"):
        emit_outputs([], [], blocker / "sub")


# ---------------------------------------------------------------- command line


def test_cli_run_and_report(tmp_path, capsys):
    config = tmp_path / "lq.json"
    config.write_text(json.dumps(lq_config()))
    out = tmp_path / "out"
    assert cli.main(["run", "--config", str(config), "--out", str(out), "--seed-offset", "10"]) == cli.EXIT_OK
    records = read_records(out / "records.csv")
    assert [r.seed for r in records] == [10, 11, 12]
    assert len(list((out / "runs").glob("*.json"))) == 3
    capsys.readouterr()
    assert cli.main(["report", "--records", str(out / "records.csv")]) == cli.EXIT_OK
    assert "hybrid_now" in capsys.readouterr().out


def test_cli_outputs_are_reproducible(tmp_path):
    config = tmp_path / "lq.json"
    config.write_text(json.dumps(lq_config(seeds=[3])))
    for name in ("a", "b"):
        assert cli.main(["run", "--config", str(config), "--out", str(tmp_path / name)]) == 0

    def strip_runtime(path):
        rows = list(csv.DictReader(open(path)))
        return [{k: v for k, v in r.items() if k != "runtime_s"} for r in rows]

    assert strip_runtime(tmp_path / "a" / "records.csv") == strip_runtime(tmp_path / "b" / "records.csv")
    assert (tmp_path / "a" / "summary.json").read_text() == (tmp_path / "b" / "summary.json").read_text()


def test_cli_exit_codes(tmp_path, monkeypatch, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"problem": "cva", "scheme": "dbdp1", "typo": 1}))
    assert cli.main(["run", "--config", str(bad)]) == cli.EXIT_CONFIG
    assert "typo" in capsys.readouterr().err
    assert cli.main(["run", "--config", str(tmp_path / "missing.json")]) == cli.EXIT_CONFIG
    (tmp_path / "broken.json").write_text("{")
    assert cli.main(["run", "--config", str(tmp_path / "broken.json")]) == cli.EXIT_CONFIG

    from neuralpde import experiment

    monkeypatch.setattr(experiment, "_run_one", lambda config, seed: (_ for _ in ()).throw(DivergenceError("nan loss")))
    good = tmp_path / "lq.json"
    good.write_text(json.dumps(lq_config(seeds=[0])))
    assert cli.main(["run", "--config", str(good), "--out", str(tmp_path / "o")]) == cli.EXIT_DIVERGED
    rows = list(csv.DictReader(open(tmp_path / "o" / "records.csv")))
    assert rows[0]["status"] == "diverged"


def test_cli_listings(capsys):
    assert cli.main(["list-problems"]) == 0
    out = capsys.readouterr().out
    assert "merton\tpde" in out and "lq\tcontrol" in out
    assert cli.main(["list-schemes"]) == 0
    out = capsys.readouterr().out.split()
    assert {"dbdp1", "deep_bsde", "2emdbdp", "2mdbdp", "2m2dbdp", "nncontpi", "hybrid_now"} <= set(out)
