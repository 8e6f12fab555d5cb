import csv
import json
import subprocess
import sys

import pytest

from stagepred.cli import EXIT_MISSING, EXIT_OK, EXIT_SCHEMA, EXIT_USAGE, main


def _run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def workload(tmp_path):
    spec = tmp_path / "s.json"
    spec.write_text(json.dumps({"n_queries": 300, "seed": 3, "arrival_rate": 0.2}))
    out = tmp_path / "w.jsonl"
    assert main(["gen", "--spec", str(spec), "--out", str(out)]) == EXIT_OK
    return out


def test_gen_replay_pipeline(tmp_path, workload, capsys):
    code, _, err = _run(capsys, "replay", "--workload", workload, "--predictor", "staged",
                        "--retrain-every", 100, "--out", tmp_path / "r")
    assert code == EXIT_OK, err
    files = {p.name for p in (tmp_path / "r").iterdir()}
    assert {"predictions.jsonl", "sim.csv", "summary.json"} <= files
    preds = [json.loads(line) for line in (tmp_path / "r" / "predictions.jsonl").read_text().splitlines()]
    assert len(preds) == 300
    assert {"query_id", "stage", "value_s", "uncertainty", "inference_cost_s"} <= set(preds[0])
    summary = json.loads((tmp_path / "r" / "summary.json").read_text())
    assert summary["n"] == 300 and sum(summary["stages"].values()) == 300


def test_replay_is_byte_reproducible(tmp_path, workload, capsys):
    for d in ("a", "b"):
        assert _run(capsys, "replay", "--workload", workload, "--retrain-every", 100, "--out", tmp_path / d)[0] == 0
    for name in ("predictions.jsonl", "sim.csv", "summary.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_eval_perfect_predictions(tmp_path, workload, capsys):
    _run(capsys, "replay", "--workload", workload, "--predictor", "oracle", "--out", tmp_path / "o")
    code, _, err = _run(capsys, "eval", "--predictions", tmp_path / "o" / "sim.csv", "--out", tmp_path / "e.json")
    assert code == EXIT_OK, err
    stats = json.loads((tmp_path / "e.json").read_text())
    assert stats["mae"] == 0.0 and stats["mqe"] == 1.0 and stats["n"] == 300


def test_eval_jsonl_reports_prr(tmp_path, workload, capsys):
    _run(capsys, "replay", "--workload", workload, "--retrain-every", 50, "--out", tmp_path / "r")
    code, out, _ = _run(capsys, "eval", "--predictions", tmp_path / "r" / "predictions.jsonl")
    stats = json.loads(out)
    assert code == EXIT_OK
    assert stats["prr_n"] > 0 and "p90_qe" in stats


def _sim_csv(path, latencies):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["query_id", "latency", "stage"])
        for i, x in enumerate(latencies):
            w.writerow([f"q{i}", x, "Local"])


def test_compare_and_plot(tmp_path, capsys):
    _sim_csv(tmp_path / "staged.csv", [80.0])
    _sim_csv(tmp_path / "baseline.csv", [100.0])
    code, _, err = _run(capsys, "compare", tmp_path / "staged.csv", tmp_path / "baseline.csv", "--out", tmp_path / "rep.csv")
    assert code == EXIT_OK, err
    rows = list(csv.DictReader(open(tmp_path / "rep.csv")))
    assert len(rows) == 6
    mean = next(r for r in rows if r["name"] == "staged" and r["metric"] == "mean")
    assert mean["improvement_pct"] == "20.0"
    code, _, err = _run(capsys, "plot", "--report", tmp_path / "rep.csv", "--out", tmp_path / "fig")
    assert code == EXIT_OK, err
    assert (tmp_path / "fig" / "improvement.png").stat().st_size > 0
    assert (tmp_path / "fig" / "improvement.csv").read_text() == (tmp_path / "rep.csv").read_text()


def test_train_global_then_replay(tmp_path, workload, capsys):
    model = tmp_path / "g.npz"
    code, _, err = _run(capsys, "train-global", "--workload", workload, "--out", model,
                        "--hidden", 8, "--layers", 2, "--epochs", 2)
    assert code == EXIT_OK, err
    code, _, err = _run(capsys, "replay", "--workload", workload, "--global-model", model, "--out", tmp_path / "r")
    assert code == EXIT_OK, err
    summary = json.loads((tmp_path / "r" / "summary.json").read_text())
    assert summary["stages"].get("Global", 0) > 0


def test_usage_error(capsys):
    code, _, err = _run(capsys, "replay", "--bogus")
    assert code == EXIT_USAGE
    assert json.loads(err)["error"] == "usage"
    assert _run(capsys)[0] == EXIT_USAGE


def test_missing_file(tmp_path, capsys):
    code, _, err = _run(capsys, "eval", "--predictions", tmp_path / "nope.csv")
    assert code == EXIT_MISSING
    assert json.loads(err)["error"] == "missing_file"


def test_schema_errors(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("query_id,latency\nq0,1.0\n")
    assert _run(capsys, "eval", "--predictions", bad)[0] == EXIT_SCHEMA
    spec = tmp_path / "s.json"
    spec.write_text(json.dumps({"n_queries": 10, "n_templates": 2, "repeat_rate_target": 0.1}))
    code, _, err = _run(capsys, "gen", "--spec", spec, "--out", tmp_path / "w.jsonl")
    assert code == EXIT_SCHEMA and "achievable" in json.loads(err)["message"]
    wl = tmp_path / "w.jsonl"
    wl.write_text('{"query_id": "a"}\n')
    assert _run(capsys, "replay", "--workload", wl, "--out", tmp_path / "r")[0] == EXIT_SCHEMA


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "stagepred", "eval", "--predictions", str(tmp_path / "x")],
                          capture_output=True, text=True)
    assert proc.returncode == EXIT_MISSING
