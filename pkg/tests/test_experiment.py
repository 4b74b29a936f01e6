import json

import numpy as np
import pytest

from crowdpoison.cli import main
from crowdpoison.experiment import (
    ConfigError,
    ExperimentConfig,
    SweepResult,
    emit_report,
    run_experiment,
    run_trial,
    load_dataset,
)

SMALL = {"num_workers": 60, "num_items": 200, "num_values": 2400, "seed": 3}


def small_cfg(**kw):
    base = dict(synthetic=SMALL, num_targets=10, trials=2, attack_fractions=[0.2])
    base.update(kw)
    return ExperimentConfig(**base).validate()


def test_no_attack_no_defense_gives_zero():
    res = run_experiment(small_cfg(attack="none", defense="none"))
    assert all(r["average_error"] == 0.0 and r["status"] == "ok" for r in res.rows)


def test_deterministic_replay():
    cfg = small_cfg(attack="maximum", defense="MWA")
    a = run_experiment(cfg)
    b = run_experiment(cfg)
    assert a.rows == b.rows


def test_trial_order_only_changes_row_order():
    cfg = small_cfg(attack="random", trials=3)
    obs = load_dataset(cfg)
    forward = [run_trial(cfg, obs, 0.2, 1.0, t)["row"] for t in range(3)]
    backward = [run_trial(cfg, obs, 0.2, 1.0, t)["row"] for t in (2, 1, 0)]
    assert forward == backward[::-1]


def test_parallel_matches_serial():
    cfg = small_cfg(attack="maximum", trials=2)
    serial = run_experiment(cfg)
    cfg.jobs = 2
    assert run_experiment(cfg).rows == serial.rows


def test_aggregate_statistics_recomputed():
    res = run_experiment(small_cfg(attack="maximum", attack_fractions=[0.1, 0.2], trials=3))
    for agg in res.aggregated:
        errs = [r["average_error"] for r in res.rows
                if r["attack_fraction"] == agg["attack_fraction"]]
        assert agg["n_trials"] == 3
        assert agg["mean_error"] == pytest.approx(np.mean(errs), abs=1e-9)
        assert agg["std_error"] == pytest.approx(np.std(errs), abs=1e-9)


def test_csv_json_roundtrip():
    res = run_experiment(small_cfg(attack="partial_knowledge", knowledge_fractions=[0.5, 1.0],
                                   bootstrap_rounds=20, trials=1))
    assert len(res.rows) == 2
    via_csv = SweepResult.from_csv(res.to_csv())
    via_json = SweepResult.from_json(res.to_json())
    assert via_csv.rows == res.rows == via_json.rows
    assert via_csv.aggregated == res.aggregated


def test_failed_trial_is_recorded():
    # too few observers for any target: plan construction fails inside the trial
    cfg = small_cfg(attack="maximum", min_observers=10_000)
    res = run_experiment(cfg)
    assert res.failures == 2
    assert all(r["status"].startswith("error") for r in res.rows)


def test_config_validation(tmp_path):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"model": "KDE"})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"attack_fractions": [0.6]})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"crh": {"max_iterations": 0}})
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"model": "GTM", "trials": 3}))
    cfg = ExperimentConfig.from_file(p)
    assert cfg.model == "GTM" and cfg.trials == 3
    assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg


def test_report_with_one_point_and_trial(tmp_path):
    res = run_experiment(small_cfg(attack="maximum", trials=1))
    paths = emit_report(res, tmp_path)
    assert sorted(p.name for p in paths) == ["result.csv", "result.json"]
    lines = (tmp_path / "result.csv").read_text().splitlines()
    assert len(lines) == 3 and lines[1].startswith("trial") and lines[2].startswith("aggregate")
    with pytest.raises(ValueError):
        emit_report(SweepResult([]), tmp_path)


# --------------------------------------------------------------------------- CLI

def test_cli_pipeline(tmp_path, capsys):
    data = tmp_path / "d.csv"
    assert main(["generate", "--workers", "60", "--items", "200", "--values", "2400",
                 "--seed", "3", "--out", str(data)]) == 0
    assert (tmp_path / "d_truth.csv").exists()
    assert main(["aggregate", "--input", str(data), "--out", str(tmp_path / "before.csv")]) == 0
    poisoned = tmp_path / "p.csv"
    assert main(["attack", "--input", str(data), "--attack", "maximum", "--targets", "5",
                 "--out", str(poisoned)]) == 0
    assert main(["aggregate", "--input", str(poisoned), "--out", str(tmp_path / "after.csv")]) == 0
    assert main(["defend", "--input", str(poisoned), "--defense", "MIE",
                 "--removed", str(tmp_path / "rm.csv"), "--out", str(tmp_path / "mie.csv")]) == 0
    capsys.readouterr()
    assert main(["evaluate", "--before", str(tmp_path / "before.csv"),
                 "--after", str(tmp_path / "after.csv"), "--plan", str(tmp_path / "p_plan.json")]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["average_error"] > 0


def test_cli_sweep_and_report(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"synthetic": SMALL, "num_targets": 5, "trials": 1,
                               "attack": "random", "attack_fractions": [0.2]}))
    out = tmp_path / "out"
    assert main(["sweep", "--config", str(cfg), "--out", str(out)]) == 0
    assert (out / "malicious_values.csv").exists()
    assert main(["report", "--input", str(out / "result.json"), "--format", "csv",
                 "--out", str(tmp_path / "rep")]) == 0
    assert (tmp_path / "rep" / "result.csv").read_text() == (out / "result.csv").read_text()


def test_cli_exit_codes(tmp_path):
    assert main(["aggregate", "--input", str(tmp_path / "missing.csv"),
                 "--out", str(tmp_path / "x.csv")]) == 1
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"model": "nope"}))
    assert main(["sweep", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1
    failing = tmp_path / "f.json"
    failing.write_text(json.dumps({"synthetic": SMALL, "num_targets": 5, "trials": 1,
                                   "attack": "maximum", "attack_fractions": [0.2],
                                   "min_observers": 10_000}))
    assert main(["sweep", "--config", str(failing), "--out", str(tmp_path / "o2")]) == 2
