import json

import pandas as pd
import pytest
from click.testing import CliRunner

from dmliv import __version__
from dmliv.cli import main
from dmliv.datagen import load_csv

FAST_SETS = [
    "data.sample_sizes=600",
    "method.K=2",
    "method.mc_samples=4",
    "stage1.epochs=1",
    "stage1.components=2",
    "stage2.max_epochs=1",
    "eval.n_eval_mse=300",
    "eval.n_eval_policy=100",
    "eval.action_grid=32",
    "run.seeds=0-1",
]


def sets(*extra):
    out = []
    for kv in (*FAST_SETS, *extra):
        out += ["--set", kv]
    return out


@pytest.fixture
def runner():
    return CliRunner()


def test_version(runner):
    res = runner.invoke(main, ["--version"])
    assert res.exit_code == 0 and __version__ in res.output


@pytest.mark.parametrize("dataset", ["demand", "semisynth"])
def test_generate(runner, tmp_path, dataset):
    out = tmp_path / "d.csv"
    res = runner.invoke(main, ["generate", "--dataset", dataset, "-n", "150", "--seed", "3", "-o", str(out)])
    assert res.exit_code == 0, res.output
    data = load_csv(out)
    assert data.n == 150 and data.truth is not None


def test_fit_writes_model_and_trace(runner, tmp_path):
    data = tmp_path / "d.csv"
    runner.invoke(main, ["generate", "-n", "600", "-o", str(data)])
    model, trace = tmp_path / "m.json", tmp_path / "t.csv"
    args = ["fit", "--data", str(data), "--method", "ce_dmliv", "-o", str(model), "--trace", str(trace)]
    res = runner.invoke(main, args + sets())
    assert res.exit_code == 0, res.output
    summary = json.loads(res.output.strip().splitlines()[-1])
    assert summary["method"] == "ce_dmliv" and summary["mse_h"] >= 0
    assert json.loads(model.read_text())["method"] == "ce_dmliv"
    assert trace.read_text().startswith("step,fold,loss")


def test_fit_refuses_weak_instrument(runner, tmp_path):
    data = tmp_path / "weak.csv"
    runner.invoke(main, ["generate", "-n", "600", "--iv-strength", "0", "-o", str(data)])
    base = ["fit", "--data", str(data), "-o", str(tmp_path / "m.json")] + sets()
    res = runner.invoke(main, base)
    assert res.exit_code != 0 and "weak" in res.output
    res = runner.invoke(main, base + ["--allow-weak-iv"])
    assert res.exit_code == 0, res.output


def test_sweep_summarize_plot(runner, tmp_path):
    out = tmp_path / "run"
    res = runner.invoke(main, ["sweep", "--output-dir", str(out)] + sets("method.methods=dmliv,naive"))
    assert res.exit_code == 0, res.output
    assert "4 rows (0 errors)" in res.output
    report = out / "report.csv"
    res = runner.invoke(main, ["summarize", str(report), "-o", str(tmp_path / "s.csv")])
    assert res.exit_code == 0, res.output
    table = pd.read_csv(tmp_path / "s.csv")
    assert len(table) == 2 and "mse_h_q75" in table.columns
    res = runner.invoke(main, ["plot-data", str(report)])
    assert res.exit_code == 0
    assert set(json.loads(res.output)["series"]) == {"dmliv", "naive"}
    res = runner.invoke(main, ["summarize", str(report), "--group-by", "method,shoe_size"])
    assert res.exit_code != 0 and "shoe_size" in res.output


def test_show_config_with_file_and_env(runner, tmp_path, monkeypatch):
    cfg = tmp_path / "exp.cfg"
    cfg.write_text("method.K = 4\nrun.seeds = 0-9\n")
    monkeypatch.setenv("DMLIV_OUTPUT_ROOT", str(tmp_path / "root"))
    res = runner.invoke(main, ["show-config", "--config", str(cfg), "--set", "method.K=6"])
    assert res.exit_code == 0, res.output
    assert "method.K = 6" in res.output
    assert "run.seeds = 0, 1, 2, 3, 4, 5, 6, 7, 8, 9" in res.output


def test_bad_override(runner):
    assert runner.invoke(main, ["show-config", "--set", "method.K"]).exit_code != 0
    res = runner.invoke(main, ["show-config", "--set", "nope.key=1"])
    assert res.exit_code != 0 and "unknown config key" in res.output


def test_diagnose_exit_code(runner, tmp_path):
    out = tmp_path / "diag.json"
    res = runner.invoke(main, ["diagnose", "-n", "3000", "--directions", "3", "-o", str(out)])
    blob = json.loads(out.read_text())
    assert "PASS orthogonality/orthogonal/joint" in res.output
    assert res.exit_code == (0 if all(c["passed"] for c in blob["checks"]) else 1)
