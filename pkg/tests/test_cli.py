import csv
import json
from pathlib import Path

import pytest
import yaml

from nncegis.cli import EXIT_CEX, EXIT_MISSING, EXIT_OK, EXIT_PREMISE, EXIT_USAGE, main

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
TOP = [{"name": "top", "text": "alw_[0,10] (y > -1000)"}]


def write_config(tmp_path, **changes):
    cfg = yaml.safe_load((CONFIGS / "tank.yaml").read_text())
    cfg["output_dir"] = str(tmp_path / "out")
    cfg["grid"] = {"eps": 1.0}
    cfg["training"].update(epochs_initial=3, epochs_retrain=3)
    cfg["loop"].update(falsify_budget=12, confirm_budget=8, max_iterations=2)
    cfg["pstl"].update(grid=[3, 3, 3, 3], n_settings=4)
    cfg["prop2"]["trials"] = 5
    for k, v in changes.items():
        if isinstance(v, dict) and isinstance(cfg.get(k), dict):
            cfg[k].update(v)
        else:
            cfg[k] = v
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path, tmp_path / "out"


def run(*args):
    return main([str(a) for a in args])


def test_dry_run_prints_plan_and_writes_nothing(tmp_path, capsys):
    path, out = write_config(tmp_path, grid={"eps": 0.25})
    assert run("gen-data", "--config", path, "--dry-run") == EXIT_OK
    assert json.loads(capsys.readouterr().out)["settings"] == 64
    assert not out.exists()


def test_gen_data_and_train(tmp_path):
    path, out = write_config(tmp_path)
    assert run("gen-data", "--config", path) == EXIT_OK
    rows = (out / "dataset.csv").read_text().splitlines()
    assert len(rows) - 1 == 4 * (101 - 1)
    assert len((out / "net_settings.csv").read_text().splitlines()) == 5
    assert run("train", "--config", path) == EXIT_OK
    assert (out / "net.json").exists() and "train_mse" in json.loads((out / "train_metrics.json").read_text())


def test_schema_errors_exit_with_usage_code(tmp_path):
    path, _ = write_config(tmp_path, grid={"eps": 0.3})
    assert run("gen-data", "--config", path) == EXIT_USAGE
    path, _ = write_config(tmp_path, bogus=1)
    assert run("gen-data", "--config", path) == EXIT_USAGE
    assert run("gen-data", "--config", path, "--threads", 0) == EXIT_USAGE
    assert run("no-such-command") == EXIT_USAGE


def test_missing_inputs(tmp_path):
    assert run("gen-data", "--config", tmp_path / "absent.yaml") == EXIT_MISSING
    path, _ = write_config(tmp_path)
    assert run("train", "--config", path) == EXIT_MISSING


def test_premise_violation_exit_code(tmp_path):
    path, _ = write_config(tmp_path, nominal={"kind": "pid", "kp": 0.0, "ki": 0.0, "kd": 0.0,
                                              "u_min": -1.0, "u_max": 1.0})
    assert run("gen-data", "--config", path) == EXIT_PREMISE


def test_falsify_trivial_property_reports_no_cex(tmp_path, capsys):
    path, out = write_config(tmp_path, properties=TOP)
    assert run("falsify", "--config", path, "--nominal", "--budget", 10) == EXIT_OK
    assert capsys.readouterr().out.startswith("no cex found")
    assert json.loads((out / "counterexamples.json").read_text()) == []


def test_falsify_zero_command_reports_cex(tmp_path, capsys):
    path, out = write_config(tmp_path, nominal={"kind": "pid", "kp": 0.0, "ki": 0.0, "kd": 0.0,
                                                "u_min": -1.0, "u_max": 1.0})
    assert run("falsify", "--config", path, "--nominal", "--budget", 10) == EXIT_CEX
    assert capsys.readouterr().out.startswith("cex found")


def test_loop_rollup_report_and_idempotence(tmp_path, capsys):
    path, out = write_config(tmp_path, properties=TOP)
    assert run("loop", "--config", path) == EXIT_OK
    with open(out / "rollup.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert rows[-1]["n_C"] == "0" and rows[0]["n_R"] == "4"
    assert (out / "checkpoints" / "net_iter0.json").exists()
    first = {p: (out / p).read_bytes() for p in ("rollup.csv", "reports.json", "dataset.csv", "net.json")}
    assert run("loop", "--config", path) == EXIT_OK
    assert all((out / p).read_bytes() == b for p, b in first.items())
    capsys.readouterr()
    assert run("report", "--out", out) == EXIT_OK
    text = capsys.readouterr().out
    assert "n_C_hat" in text and "no counterexample found" in text


def test_effective_config_reproduces(tmp_path):
    path, out = write_config(tmp_path, properties=TOP)
    assert run("gen-data", "--config", path, "--seed-override", 7) == EXIT_OK
    eff = yaml.safe_load((out / "effective_config.yaml").read_text())
    assert eff["seed"] == 7
    first = (out / "dataset.csv").read_bytes()
    assert run("gen-data", "--config", out / "effective_config.yaml") == EXIT_OK
    assert (out / "dataset.csv").read_bytes() == first


def test_mine_pstl_with_nominal_and_learned(tmp_path, capsys):
    path, out = write_config(tmp_path)
    assert run("mine-pstl", "--config", path) == EXIT_OK
    assert "learned" not in json.loads((out / "pstl_summary.json").read_text())
    assert run("gen-data", "--config", path) == EXIT_OK
    assert run("train", "--config", path) == EXIT_OK
    capsys.readouterr()
    assert run("mine-pstl", "--config", path) == EXIT_OK
    summary = json.loads((out / "pstl_summary.json").read_text())
    assert summary["sigma"] == pytest.approx(summary["learned"]["volume_lower_bound"]
                                             / summary["nominal"]["volume_lower_bound"])
    assert "sigma =" in capsys.readouterr().out


def test_zero_nominal_volume_is_reported_not_divided(tmp_path, capsys):
    path, out = write_config(tmp_path, pstl={"grid": [2, 2, 2, 2]})
    assert run("gen-data", "--config", path) == EXIT_OK
    assert run("train", "--config", path) == EXIT_OK
    assert run("mine-pstl", "--config", path) == 1
    assert json.loads((out / "pstl_summary.json").read_text())["sigma"] is None
    assert "undefined" in capsys.readouterr().err


def test_check_prop2(tmp_path):
    path, out = write_config(tmp_path)
    assert run("check-prop2", "--config", path) == EXIT_OK
    assert len((out / "prop2.csv").read_text().splitlines()) == 6


def test_help_documents_exit_codes(capsys):
    assert run("--help") == EXIT_OK
    assert "exit codes" in capsys.readouterr().out.lower()
