import json
import shutil
import subprocess
import sys

import pytest

from relsnap.cli import INVALID, OK, STAGE_FAILED, main

SYN = {"n_users": 30, "n_products": 8, "n_timestamps": 30, "tx_per_tick": 20.0, "horizon": 2}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "synth.json").write_text(json.dumps(SYN))
    assert main(["synth", "--config", str(root / "synth.json"), "--out", str(root / "db")]) == OK
    cfg = {
        "schema": "db/schema.json", "data": "db/data", "task": "db/tasks/user-churn.json", "output": "out",
        "split": [6, 2, 2], "seeds": [0], "repeats": 3,
        "gbdt": {"n_rounds": 5}, "distill": {"epochs": 2}, "gnn": {"hidden": 8, "epochs": 2},
    }
    (root / "cfg.json").write_text(json.dumps(cfg))
    return root


def test_train_eval_bench(workspace, capsys):
    assert main(["train", "--config", str(workspace / "cfg.json"), "--seed", "0", "--seed", "1"]) == OK
    assert (workspace / "out" / "seed_1" / "gnn.json").exists()
    assert main(["eval", "--bundle", str(workspace / "out")]) == OK
    assert "mean" in capsys.readouterr().out
    assert json.loads((workspace / "out" / "metrics.json").read_text())["reports"][0]["name"] == "rocauc"
    rc = main(["bench", "--config", str(workspace / "cfg.json"), "--modes", "lightrdl,no-time",
               "--json", str(workspace / "bench.json")])
    assert rc == OK
    report = json.loads((workspace / "bench.json").read_text())
    assert report["baseline"] == "lightrdl" and "no-time" in report["speedups"]


def test_invalid_inputs_exit_one(workspace, tmp_path):
    assert main(["eval", "--bundle", str(tmp_path / "none")]) == INVALID
    (tmp_path / "bad.json").write_text("{not json")
    assert main(["train", "--config", str(tmp_path / "bad.json")]) == INVALID
    (tmp_path / "mode.json").write_text(json.dumps({"mode": "turbo"}))
    assert main(["train", "--config", str(tmp_path / "mode.json")]) == INVALID
    # dangling foreign key in the data
    tx = workspace / "db" / "data" / "transactions.csv"
    broken = tmp_path / "db"
    shutil.copytree(workspace / "db", broken)
    lines = tx.read_text().splitlines()
    header = lines[0].split(",")
    row = lines[1].split(",")
    row[header.index("user_id")] = "9999"
    (broken / "data" / "transactions.csv").write_text("\n".join([lines[0], ",".join(row)] + lines[2:]) + "\n")
    cfg = json.loads((workspace / "cfg.json").read_text())
    cfg.update(schema=str(broken / "schema.json"), data=str(broken / "data"),
               task=str(broken / "tasks" / "user-churn.json"), output=str(tmp_path / "o"))
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    assert main(["train", "--config", str(tmp_path / "c.json")]) == INVALID
    assert main(["synth", "--out", str(workspace / "db")]) == INVALID


def test_stage_failure_exits_two(workspace, tmp_path):
    cfg = json.loads((workspace / "cfg.json").read_text())
    cfg.update(split=[40, 2, 2], schema=str(workspace / "db/schema.json"), data=str(workspace / "db/data"),
               task=str(workspace / "db/tasks/user-churn.json"), output=str(tmp_path / "o"))
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    assert main(["train", "--config", str(tmp_path / "c.json")]) == STAGE_FAILED


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "relsnap", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("train", "eval", "bench", "synth"):
        assert cmd in out.stdout
