import json
import os

import pytest

from elasticplan.cli import EXIT_INFEASIBLE, EXIT_OK, EXIT_SIM_FAILURE, EXIT_USAGE, main
from elasticplan.model import ResourcePlan, from_json
from elasticplan.sim import SimReport, bundled_names


def _stats(tmp_path, w_hat, s_hat, name="stats.json"):
    path = tmp_path / name
    path.write_text(json.dumps({"w_hat": w_hat, "s_hat": s_hat, "n_workers": 1}))
    return str(path)


@pytest.mark.parametrize("w_hat,s_hat,n_w,n_ps", [(2.5, 5.7, 24, 8), (19.4, 3.1, 8, 2)])
def test_plan_reproduces_table(tmp_path, capsys, w_hat, s_hat, n_w, n_ps):
    assert main(["plan", "--stats", _stats(tmp_path, w_hat, s_hat), "--quota", "200"]) == EXIT_OK
    plan = from_json(ResourcePlan, capsys.readouterr().out)
    assert (plan.worker_count, plan.ps_count) == (n_w, n_ps)


def test_plan_writes_out_file(tmp_path, capsys):
    out = tmp_path / "plan.json"
    assert main(["plan", "--stats", _stats(tmp_path, 2.5, 5.7), "--out", str(out)]) == EXIT_OK
    assert from_json(ResourcePlan, out.read_text()).worker_count == 24


def test_plan_quota_below_one_worker_is_infeasible(tmp_path, capsys):
    assert main(["plan", "--stats", _stats(tmp_path, 2.5, 5.7), "--quota", "8"]) == EXIT_INFEASIBLE
    assert "error" in capsys.readouterr().err


def test_plan_bad_stats_file(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text('{"w_hat": 2.5,\n "s_hat": }')
    assert main(["plan", "--stats", str(path)]) == EXIT_USAGE
    assert "line 2" in capsys.readouterr().err


def test_plan_missing_stats_file(capsys):
    assert main(["plan", "--stats", "/nonexistent/stats.json"]) == EXIT_USAGE


def test_run_writes_report(tmp_path, capsys):
    out = tmp_path / "r.json"
    assert main(["run", "--scenario", "ar_small", "--seed", "1", "--out", str(out)]) == EXIT_OK
    report = SimReport.from_json(out.read_text())
    assert report.completed and report.seed == 1
    assert "COMPLETED" in capsys.readouterr().out


def test_run_static_with_faults_exits_sim_failure(tmp_path, capsys):
    code = main(["run", "--scenario", "wd_faults", "--policy", "static",
                 "--out", str(tmp_path / "r.json")])
    assert code == EXIT_SIM_FAILURE
    assert "FAILED" in capsys.readouterr().err
    assert SimReport.from_json((tmp_path / "r.json").read_text()).status == "FAILED"


def test_run_quota_too_small_is_infeasible(capsys):
    assert main(["run", "--scenario", "wd", "--quota", "5"]) == EXIT_INFEASIBLE
    assert "infeasible" in capsys.readouterr().err


def test_run_unknown_scenario(capsys):
    assert main(["run", "--scenario", "no_such_scenario"]) == EXIT_USAGE


def test_run_bad_scenario_reports_line(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text('{\n  "name": "x",\n  "job": {,\n}\n')
    assert main(["run", "--scenario", str(path)]) == EXIT_USAGE
    assert "line 3" in capsys.readouterr().err


def test_run_several_into_directory(tmp_path, capsys):
    out = tmp_path / "reports"
    code = main(["run", "--scenario", "ar_small", "--scenario", "wd_faults", "--out", str(out),
                 "--parallel", "2"])
    assert code == EXIT_OK
    assert sorted(os.listdir(out)) == ["ar_small.json", "wd_faults.json"]


def test_run_needs_a_scenario(capsys, monkeypatch):
    monkeypatch.delenv("ELASTICPLAN_SCENARIO", raising=False)
    assert main(["run"]) == EXIT_USAGE


def test_env_var_supplies_defaults(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("ELASTICPLAN_SCENARIO", "ar_small")
    monkeypatch.setenv("ELASTICPLAN_SEED", "5")
    out = tmp_path / "r.json"
    assert main(["run", "--out", str(out)]) == EXIT_OK
    assert SimReport.from_json(out.read_text()).seed == 5
    # explicit flags win over the environment
    assert main(["run", "--seed", "6", "--out", str(out)]) == EXIT_OK
    assert SimReport.from_json(out.read_text()).seed == 6


def test_bad_env_integer(monkeypatch):
    monkeypatch.setenv("ELASTICPLAN_SEED", "many")
    with pytest.raises(SystemExit):
        main(["run", "--scenario", "ar_small"])


def test_report_series_csv(tmp_path, capsys):
    out = tmp_path / "r.json"
    main(["run", "--scenario", "ar_small", "--out", str(out)])
    capsys.readouterr()
    assert main(["report", "--report", str(out), "--series", "workers"]) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "time,workers" and len(lines) > 1


def test_report_unknown_series(tmp_path, capsys):
    out = tmp_path / "r.json"
    main(["run", "--scenario", "ar_small", "--out", str(out)])
    assert main(["report", "--report", str(out), "--series", "bogus"]) == EXIT_USAGE
    assert "valid" in capsys.readouterr().err


def test_report_not_a_report(tmp_path, capsys):
    path = tmp_path / "x.json"
    path.write_text('{"a": 1}')
    assert main(["report", "--report", str(path)]) == EXIT_USAGE


def test_validate(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("[")
    assert main(["validate", "wd", "xdfm"]) == EXIT_OK
    assert main(["validate", "wd", str(bad)]) == EXIT_USAGE
    assert "wd: ok" in capsys.readouterr().out


def test_scenarios_lists_bundled(capsys):
    assert main(["scenarios"]) == EXIT_OK
    names = [line.split("\t")[0] for line in capsys.readouterr().out.splitlines()]
    assert names == bundled_names()


def test_unknown_command_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == EXIT_USAGE


def test_bad_policy_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["run", "--scenario", "wd", "--policy", "magic"])
    assert exc.value.code == EXIT_USAGE
