"""Command line: artifacts, manifests and exit codes."""

import csv
import json
import os

import pytest

from amg_solver import load_solver_config
from hes_tuner_cli import (EXIT_CONFIG, EXIT_DATA, EXIT_INFEASIBLE, EXIT_IO, EXIT_OK, EXIT_UNEXPECTED,
                           exit_code_for, main)
from fitness_evaluator import DatasetStage, load_dataset
from sparse_core import parse_matrix_market, read_vector
from surrogate_net import load_model
from tuner_config import TOOL_VERSION
from tuner_errors import ConfigError, DatasetError, InfeasibleError, MatrixFormatError, ModelError


@pytest.fixture(autouse=True)
def clean_environment(monkeypatch, tmp_path):
    for name in list(os.environ):
        if name.startswith("HES_TUNER_"):
            monkeypatch.delenv(name)
    monkeypatch.setenv("HES_TUNER_SSMC_CACHE", str(tmp_path / "ssmc"))


@pytest.mark.parametrize("error,code", [
    (ConfigError("x"), EXIT_CONFIG),
    (InfeasibleError("x"), EXIT_INFEASIBLE),
    (MatrixFormatError("x", 3), EXIT_IO),
    (FileNotFoundError("x"), EXIT_IO),
    (DatasetError("x"), EXIT_DATA),
    (ModelError("x"), EXIT_DATA),
    (RuntimeError("x"), EXIT_UNEXPECTED),
])
def test_exit_codes(error, code):
    assert exit_code_for(error) == code


def test_gen_problem(tmp_path):
    out = tmp_path / "problems"
    assert main(["gen-problem", "cube:4", "--out", str(out)]) == EXIT_OK
    A = parse_matrix_market(str(out / "cube_4.mtx"))
    assert A.shape == (64, 64)
    assert A.nnz == 64 + 6 * 16 * 3
    assert read_vector(str(out / "cube_4.rhs.mtx")).tolist() == [1.0] * 64
    with open(out / "cube_4.mtx.manifest.json") as f:
        manifest = json.load(f)
    assert manifest['command'] == 'gen-problem'
    assert manifest['tool_version'] == TOOL_VERSION
    assert manifest['arguments']['spec'] == "cube:4"


def test_solve_generated_problem(tmp_path, capsys):
    out = tmp_path / "problems"
    assert main(["gen-problem", "cube:8@random", "--seed", "3", "--out", str(out)]) == EXIT_OK
    matrix = out / "cube_8_random.mtx"
    rhs = out / "cube_8_random.rhs.mtx"
    result = tmp_path / "outcome.json"
    code = main(["solve", "--problem", f"mm:{matrix}@{rhs}", "--out", str(result)])
    assert code == EXIT_OK
    assert "Converged" in capsys.readouterr().out
    with open(result) as f:
        outcome = json.load(f)
    assert outcome['converged'] is True
    assert outcome['final_relative_residual'] <= 2e-8


def test_solve_with_config_file(tmp_path, write_file):
    cfg = write_file("w.cfg", "cycle = W\npre_cheby_order = 3\n")
    assert main(["solve", "--problem", "cube:6", "--config", cfg]) == EXIT_OK


@pytest.mark.parametrize("argv,code", [
    (["solve", "--problem", "cube:1"], EXIT_CONFIG),
    (["solve", "--problem", "mm:/nonexistent/matrix.mtx"], EXIT_IO),
    (["fetch", "no-slash"], EXIT_CONFIG),
])
def test_failures(argv, code, capsys):
    assert main(argv) == code
    assert "❌" in capsys.readouterr().err


def test_bad_config_file(write_file):
    cfg = write_file("bad.cfg", "cycle = X\n")
    assert main(["solve", "--problem", "cube:4", "--config", cfg]) == EXIT_CONFIG


def test_not_a_dataset(write_file):
    assert main(["stats", write_file("d.csv", "1,2,3\n")]) == EXIT_DATA


def test_bad_environment(monkeypatch):
    monkeypatch.setenv("HES_TUNER_JOBS", "many")
    assert main(["solve", "--problem", "cube:4"]) == EXIT_CONFIG


def test_infeasible_tuning_writes_trace(tmp_path, write_file):
    space = write_file("stuck.space", "cycle : list(V, W)\nouter_max_iters : frozen(0)\n")
    out = tmp_path / "run"
    code = main(["tune", "--problem", "cube:4", "--space", space, "--out", str(out)])
    assert code == EXIT_INFEASIBLE
    assert (out / "trace.csv").exists()
    assert not (out / "best.cfg").exists()


def test_surrogate_pipeline(tmp_path, config_dir, capsys):
    space = os.path.join(config_dir, "tiny.space")
    raw = tmp_path / "data" / "raw.csv"
    balanced = tmp_path / "data" / "balanced.csv"
    model = tmp_path / "models" / "m.npz"
    run_dir = tmp_path / "run"

    assert main(["sample", "--problem", "cube:10", "--space", space, "--count", "80",
                 "--seed", "2", "--out", str(raw)]) == EXIT_OK
    assert not os.path.exists(f"{raw}.part")
    assert len(load_dataset(str(raw))) == 80
    assert os.path.exists(f"{raw}.manifest.json")

    assert main(["stats", str(raw)]) == EXIT_OK
    assert "Samples:        80" in capsys.readouterr().out

    assert main(["balance", str(raw), "--out", str(balanced)]) == EXIT_OK
    assert load_dataset(str(balanced)).stage == DatasetStage.BALANCED

    assert main(["train", str(balanced), "--space", space, "--epochs", "3", "--out", str(model)]) == EXIT_OK
    report_line = capsys.readouterr().out.strip().splitlines()[-1]
    report = json.loads(report_line)
    assert report['n_validation'] == 8
    assert 'optimal_alpha' in load_model(str(model)).info['holdout']

    assert main(["tune", "--problem", "cube:10", "--space", space, "--model", str(model), "--alpha", "auto",
                 "--trial-pool", "500", "--max-generations", "3", "--out", str(run_dir)]) == EXIT_OK
    load_solver_config(str(run_dir / "best.cfg"))
    with open(run_dir / "trace.csv") as f:
        rows = list(csv.reader(f))
    assert 2 <= len(rows) <= 4
    summary = (run_dir / "summary.txt").read_text()
    assert "filter = on" in summary
    for name in ("best.cfg", "trace.csv", "summary.txt"):
        assert (run_dir / f"{name}.manifest.json").exists()


def test_train_rejects_raw_data(tmp_path, config_dir):
    space = os.path.join(config_dir, "tiny.space")
    raw = tmp_path / "raw.csv"
    assert main(["sample", "--problem", "cube:6", "--space", space, "--count", "12", "--out", str(raw)]) == EXIT_OK
    assert main(["train", str(raw), "--space", space, "--epochs", "1", "--out", str(tmp_path / "m.npz")]) == EXIT_DATA


def test_bench_writes_report(tmp_path):
    out = tmp_path / "bench"
    assert main(["bench", "f-alpha-vs-nv", "--out", str(out)]) == EXIT_OK
    with open(out / "f-alpha-vs-nv.csv") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ['n_validation', 'mean_f_alpha', 'std_f_alpha']
    assert len(rows) == 7
    assert (out / "f-alpha-vs-nv.txt").exists()
