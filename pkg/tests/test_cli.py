import csv
import filecmp
import json
import os

import pytest

from phase import embedder as emb
from phase.cli import dispatch


def _same_tree(a, b):
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only or cmp.diff_files or cmp.funny_files:
        return False
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    return not mismatch and not errors and all(_same_tree(os.path.join(a, d), os.path.join(b, d))
                                               for d in cmp.common_dirs)


@pytest.fixture(scope="module")
def cohort_dirs(tmp_path_factory):
    root = tmp_path_factory.mktemp("cohorts")
    out = {}
    for name, seed in (("OR0", 3), ("OR1", 4)):
        cfg = root / f"{name}.json"
        cfg.write_text(json.dumps({"preset": name, "n_procedures": 60, "calibration_procedures": 300}))
        out[name] = str(root / name)
        assert dispatch(["generate", "--config", str(cfg), "--out", out[name], "--seed", str(seed)]) == 0
    return out


def test_generate_is_deterministic(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"preset": "OR1", "n_procedures": 8, "calibration_procedures": 200}))
    for d in ("a", "b"):
        assert dispatch(["generate", "--config", str(cfg), "--out", str(tmp_path / d), "--seed", "7"]) == 0
    assert _same_tree(tmp_path / "a", tmp_path / "b")
    assert len(os.listdir(tmp_path / "a" / "signals")) == 8


def test_usage_errors(capsys, tmp_path):
    assert dispatch([]) == 1
    assert dispatch(["frobnicate"]) == 1
    assert dispatch(["report", "--runs", "x", "--out", "y", "--colour", "blue"]) == 1
    err = capsys.readouterr().err
    assert "--colour" in err and "--runs" in err and "--out" in err
    assert dispatch(["generate"]) == 1
    assert dispatch(["report", "--runs", "x", "--out", "y", "--threads", "0"]) == 1


def test_data_errors(tmp_path, capsys):
    assert dispatch(["prep", "--cohort", str(tmp_path / "missing"), "--task", "hypoxemia",
                     "--out", str(tmp_path / "p")]) == 2
    assert dispatch(["report", "--runs", str(tmp_path), "--out", str(tmp_path / "f.csv")]) == 2
    bad = tmp_path / "bad.phase"
    bad.write_bytes(b"PHASEMDL" + b"\0" * 40)
    assert dispatch(["embed", "--model", str(bad), "--cohort", str(tmp_path), "--task", "hypoxemia",
                     "--out", str(tmp_path / "e.csv")]) == 2
    assert "checksum" in capsys.readouterr().err


def test_prep_writes_splits(cohort_dirs, tmp_path):
    out = tmp_path / "prep"
    assert dispatch(["prep", "--cohort", cohort_dirs["OR0"], "--task", "hypotension", "--features", "ema",
                     "--out", str(out)]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert set(summary) == {"train", "valid", "test"}
    with open(out / "train.csv") as f:
        header = next(csv.reader(f))
    assert len(header) == 3 + 15 * 7 + 6


def test_embedder_round_trip_and_finetune(cohort_dirs, tmp_path):
    m = tmp_path / "m.phase"
    args = ["train-embedder", "--cohort", cohort_dirs["OR1"], "--signal", "SAO2", "--task", "next",
            "--hidden", "4", "--epochs", "1", "--max-points", "200", "--out", str(m), "--threads", "1"]
    assert dispatch(args) == 0
    model = emb.load_model(m)
    assert model.source_cohort_id == "OR1" and model.width == 4
    e = tmp_path / "e.csv"
    assert dispatch(["embed", "--model", str(m), "--cohort", cohort_dirs["OR0"], "--task", "hypotension",
                     "--out", str(e)]) == 0
    with open(e) as f:
        assert next(csv.reader(f))[-1] == "SAO2_h3"
    ft = tmp_path / "ft.phase"
    assert dispatch(["finetune", "--model", str(m), "--cohort", cohort_dirs["OR0"], "--epochs", "1",
                     "--max-points", "200", "--out", str(ft)]) == 0
    tuned = emb.load_model(ft)
    assert tuned.metadata["target_cohort_id"] == "OR0"
    assert open(m, "rb").read() == emb.dumps_model(model)  # input untouched


def _write_plan(path, cohort_dirs, runs, rep):
    plan = {"target": cohort_dirs["OR0"], "source": cohort_dirs["OR1"], "representation": rep,
            "task": "hypotension", "signals": ["SAO2", "NIBPM"], "max_train_rows": 1500, "n_resamples": 100,
            "embedder": {"hidden": [4], "epochs": 1, "max_points": 200, "batch_size": 64},
            "gbm": {"max_rounds": 10, "learning_rate": 0.3}, "out": str(runs)}
    path.write_text(json.dumps(plan))


def test_experiment_commands(cohort_dirs, tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("PHASE_CACHE_DIR", str(tmp_path / "cache"))
    runs = tmp_path / "runs"
    for rep in ("raw", "next'"):
        _write_plan(tmp_path / f"{rep}.json", cohort_dirs, runs, rep)
    assert dispatch(["train-downstream", "--plan", str(tmp_path / "raw.json"), "--threads", "1"]) == 0
    assert dispatch(["transfer", "--plan", str(tmp_path / "raw.json")]) == 2
    assert dispatch(["transfer", "--plan", str(tmp_path / "next'.json")]) == 0
    assert os.path.isdir(tmp_path / "cache" / "OR1" / "SAO2")
    run_dirs = capsys.readouterr().out.split()
    assert len(run_dirs) == 2

    rep_path = tmp_path / "eval.json"
    assert dispatch(["evaluate", "--run", run_dirs[0], "--resamples", "100", "--out", str(rep_path)]) == 0
    original = json.loads(open(os.path.join(run_dirs[0], "report.json")).read())
    assert json.loads(rep_path.read_text())["ap"] == original["ap"]

    exp = tmp_path / "explain"
    assert dispatch(["explain", "--run", run_dirs[1], "--rows", "5", "--background", "16", "--out", str(exp)]) == 0
    assert {"shap.csv", "summary.csv", "signals.csv"} <= set(os.listdir(exp))

    fig = tmp_path / "figure2.csv"
    assert dispatch(["report", "--runs", str(runs), "--out", str(fig)]) == 0
    with open(fig) as f:
        rows = list(csv.DictReader(f))
    assert sorted((r["task"], r["representation"]) for r in rows) == [("hypotension", "next'"),
                                                                      ("hypotension", "raw")]
