import csv
import json
import statistics
import subprocess
import sys
from pathlib import Path

import pytest

from derlab.checkpoint import load_checkpoint
from derlab.cli import main
from derlab.config import load_config
from derlab.extractor import count_params

SMOKE = Path(__file__).resolve().parents[1] / "configs" / "smoke.toml"


def _run(tmp_path, *extra):
    out = tmp_path / "run"
    code = main(["run", str(SMOKE), "--out", str(out), *extra])
    return code, out


def test_run_writes_results_with_one_row_per_step(tmp_path):
    code, out = _run(tmp_path)
    assert code == 0
    doc = json.loads((out / "results.json").read_text())
    assert len(doc["steps"]) == load_config(SMOKE).protocol.steps
    assert (out / "config.toml").exists()
    assert sorted(p.name for p in (out / "checkpoints").iterdir()) == ["step01.derc", "step02.derc"]


def test_config_echo_reproduces_run(tmp_path):
    code, out = _run(tmp_path)
    assert code == 0
    code = main(["run", str(out / "config.toml"), "--out", str(tmp_path / "again")])
    assert code == 0
    a = json.loads((out / "results.json").read_text())
    b = json.loads((tmp_path / "again" / "results.json").read_text())
    assert a["steps"] == b["steps"] and a["summary"] == b["summary"]


def test_set_override_changes_only_seed_in_echo(tmp_path):
    main(["run", str(SMOKE), "--out", str(tmp_path / "a")])
    main(["run", str(SMOKE), "--set", "train.seed=7", "--out", str(tmp_path / "b")])
    a = load_config(tmp_path / "a" / "config.toml").to_dict()
    b = load_config(tmp_path / "b" / "config.toml").to_dict()
    assert b["train"]["seed"] == 7
    b["train"]["seed"] = a["train"]["seed"]
    a["output"].pop("dir"), b["output"].pop("dir")
    assert a == b


def test_invalid_config_exits_2_naming_key(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text(SMOKE.read_text().replace("[memory]\n", "[memory]\nbudget = 3\n"))
    assert main(["run", str(bad)]) == 2
    assert "memory.budget" in capsys.readouterr().err


def test_missing_required_key_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text(SMOKE.read_text().replace("steps = 2\n", ""))
    assert main(["run", str(bad)]) == 2
    assert "protocol.steps" in capsys.readouterr().err


def test_runtime_error_exits_1(tmp_path, capsys):
    code, _ = _run(tmp_path, "--set", "dataset.kind=\"file\"", "--set",
                   f"dataset.train_path=\"{tmp_path / 'missing.cild'}\"")
    assert code == 1
    assert "error" in capsys.readouterr().err


def test_usage_errors_exit_2():
    assert main([]) == 2
    assert main(["frobnicate"]) == 2
    assert main(["report"]) == 2


def _fake_results(path, h, accs, avg, params):
    path.mkdir(parents=True)
    doc = {"config_hash": h, "config": {},
           "steps": [{"step": i + 1, "n_classes": 2 * (i + 1), "acc": a} for i, a in enumerate(accs)],
           "summary": {"avg": avg, "mean_params": params}}
    (path / "results.json").write_text(json.dumps(doc))
    return path / "results.json"


def test_report_mean_and_stdev(tmp_path):
    files = [_fake_results(tmp_path / f"r{i}", "abc", [0.9, a], 0.8 + i / 100, 100 + i)
             for i, a in enumerate([0.5, 0.6, 0.7])]
    assert main(["report", *map(str, files), "--out", str(tmp_path / "rep")]) == 0
    rows = list(csv.DictReader(open(tmp_path / "rep" / "accuracy_vs_step.csv")))
    assert float(rows[1]["acc_mean"]) == pytest.approx(0.6, abs=1e-15)
    assert float(rows[1]["acc_std"]) == pytest.approx(statistics.stdev([0.5, 0.6, 0.7]), rel=1e-14)
    front = list(csv.DictReader(open(tmp_path / "rep" / "params_vs_avg.csv")))
    assert float(front[0]["mean_params"]) == 101.0
    assert float(front[0]["avg_mean"]) == pytest.approx(0.81, abs=1e-15)


def test_report_single_run_passthrough(tmp_path):
    f = _fake_results(tmp_path / "r", "abc", [0.9, 0.4], 0.65, 50)
    assert main(["report", str(f), "--out", str(tmp_path / "rep")]) == 0
    rows = list(csv.DictReader(open(tmp_path / "rep" / "accuracy_vs_step.csv")))
    assert [float(r["acc_mean"]) for r in rows] == [0.9, 0.4]
    assert [float(r["acc_std"]) for r in rows] == [0.0, 0.0]


def test_report_mixed_hashes(tmp_path):
    a = _fake_results(tmp_path / "a", "h1", [0.9], 0.9, 10)
    b = _fake_results(tmp_path / "b", "h2", [0.8], 0.8, 10)
    assert main(["report", str(a), str(b), "--out", str(tmp_path / "rep")]) == 2
    assert main(["report", str(a), str(b), "--force", "--out", str(tmp_path / "rep")]) == 0
    rows = list(csv.DictReader(open(tmp_path / "rep" / "params_vs_avg.csv")))
    assert [r["config_hash"] for r in rows] == ["h1", "h2"]


def test_sweep_writes_one_result_per_value(tmp_path):
    out = tmp_path / "sw"
    code = main(["sweep", str(SMOKE), "--key", "train.lambda_s", "--values", "0,1",
                 "--jobs", "2", "--out", str(out)])
    assert code == 0
    results = sorted(out.glob("*/results.json"))
    assert len(results) == 2
    rows = list(csv.DictReader(open(out / "sweep.csv")))
    for row in rows:
        doc = json.loads(Path(row["results"]).read_text())
        assert float(row["mean_params"]) == doc["summary"]["mean_params"]
        # the reported parameter counts agree with a recount of the saved model
        model, _, _ = load_checkpoint(Path(row["results"]).parent / "checkpoints" / "step02.derc")
        assert doc["steps"][-1]["params"] == sum(count_params(f) for f in model.frozen) \
            + model.classifier.numel()


def test_sweep_single_value_equals_run(tmp_path):
    assert main(["sweep", str(SMOKE), "--key", "train.lambda_a", "--values", "1",
                 "--out", str(tmp_path / "sw")]) == 0
    assert main(["run", str(SMOKE), "--out", str(tmp_path / "run")]) == 0
    a = json.loads((tmp_path / "sw" / "lambda_a=1" / "results.json").read_text())
    b = json.loads((tmp_path / "run" / "results.json").read_text())
    assert a["steps"] == b["steps"]


def test_sweep_unknown_key(tmp_path):
    assert main(["sweep", str(SMOKE), "--key", "train.delta", "--values", "1"]) == 2


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "derlab", "run", str(SMOKE), "--out",
                           str(tmp_path / "m")], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "m" / "results.json").exists()
