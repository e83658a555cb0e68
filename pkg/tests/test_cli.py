import json

import numpy as np
import pytest

from lowbudget.budget import BudgetSelection
from lowbudget.cli import main, validate_config
from lowbudget.network import load_checkpoint
from lowbudget.pipeline import RunConfig
from lowbudget.scoring import ScoreTable

FAST = ["--n-per-class", "20", "--epochs-uda", "2", "--epochs-finetune", "2", "--hidden-dims", "[8]"]


def run(*argv):
    return main([str(a) for a in argv])


def last_error(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


def test_defaults_only_file_resolves_to_defaults(tmp_path):
    (tmp_path / "c.json").write_text("{}")
    config, diagnostics = validate_config(tmp_path / "c.json")
    assert diagnostics == [] and config == RunConfig()


def test_config_diagnostics(tmp_path, capsys):
    (tmp_path / "c.json").write_text(json.dumps({"budget_fraction": 1.5, "sampler": "best", "colour": 1}))
    config, diagnostics = validate_config(tmp_path / "c.json")
    keys = dict(diagnostics)
    assert config is None
    assert "(0, 1]" in keys["budget_fraction"] and "uniform_entropy" in keys["sampler"] and "colour" in keys
    assert run("gen-data", "--config", tmp_path / "c.json", "--out", tmp_path) == 2
    assert set(last_error(capsys)["fields"]) == {"budget_fraction", "sampler", "colour"}


def test_bad_flag_value(tmp_path, capsys):
    assert run("gen-data", "--out", tmp_path, "--epochs-uda", "many") == 2
    assert last_error(capsys)["fields"] == ["epochs_uda"]


def test_missing_inputs(tmp_path, capsys):
    assert run("adapt", "--out", tmp_path) == 3
    assert run("gen-data", "--config", tmp_path / "nope.json", "--out", tmp_path) == 3
    assert last_error(capsys)["error"] == "missing_input"


def test_contract_violation_exit_code(tmp_path, capsys):
    (tmp_path / "scores.csv").write_text("sample_id,score\n1,0.5\n2,nan\n")
    assert run("select", "--out", tmp_path, "--scores", tmp_path / "scores.csv") == 5
    assert last_error(capsys)["error"] == "contract"


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exit_code(tmp_path, capsys):
    assert run("gen-data", "--out", tmp_path, *FAST) == 0
    code = run("adapt", "--out", tmp_path, *FAST, "--lr-uda", "1e200", "--optimizer", "sgd", "--weight-decay", "0")
    assert code == 4
    assert "step" in last_error(capsys)


def test_select_on_persisted_table(tmp_path):
    r = np.random.default_rng(0)
    ScoreTable(np.arange(57), r.random(57), "entropy").save(tmp_path / "in.csv")
    assert run("select", "--out", tmp_path, "--scores", tmp_path / "in.csv", "--sampler", "uniform",
               "--budget-fraction", "0.10") == 0
    sel = BudgetSelection.load(tmp_path / "selection.csv")
    assert sel.k == 5 and len((tmp_path / "selection.csv").read_text().splitlines()) == 6


def test_phases_resume_to_the_same_results_as_run_all(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for cmd in ("gen-data", "adapt", "select", "finetune"):
        assert run(cmd, "--out", a, *FAST) == 0, cmd
    assert run("run-all", "--out", b, *FAST) == 0
    for name in ("results.csv", "selection.csv", "scores.csv", "pool.csv", "target.csv", "oracle.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    for name in ("model_uda.npz", "model_finetuned.npz"):
        assert load_checkpoint(a / name)[0].fingerprint() == load_checkpoint(b / name)[0].fingerprint()


def test_run_all_twice_is_byte_identical(tmp_path):
    for d in ("x", "y"):
        assert run("run-all", "--out", tmp_path / d, "--seed", "0", *FAST) == 0
    for name in ("results.csv", "run_record.json", "curve.csv", "histogram.csv", "config.resolved.json"):
        assert (tmp_path / "x" / name).read_bytes() == (tmp_path / "y" / name).read_bytes(), name


def test_adapt_lambda_zero_matches_source_only(tmp_path):
    assert run("gen-data", "--out", tmp_path, *FAST) == 0
    assert run("adapt", "--out", tmp_path, *FAST, "--lambda", "0") == 0
    record = json.loads((tmp_path / "uda_record.json").read_text())
    assert all(row["identity_max_dev"] is None for row in record["epochs"])
    assert run("adapt", "--out", tmp_path / "again", *FAST, "--lambda", "0") == 3


def test_evaluate_and_analyze(tmp_path, capsys):
    assert run("run-all", "--out", tmp_path, *FAST) == 0
    capsys.readouterr()
    assert run("evaluate", "--out", tmp_path, *FAST) == 0
    acc = float(capsys.readouterr().out.strip())
    results = (tmp_path / "results.csv").read_text().splitlines()[1].split(",")
    assert acc == pytest.approx(float(results[4]), abs=1e-6)
    assert run("analyze", "--out", tmp_path, *FAST, "--checkpoints",
               tmp_path / "model_uda.npz", tmp_path / "model_finetuned.npz") == 0
    regions = (tmp_path / "regions.csv").read_text().splitlines()
    assert len(regions) == 3 and regions[1].startswith("model_uda,")
    assert (tmp_path / "histogram.csv").exists()


def test_output_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("LOWBUDGET_OUTPUT_DIR", str(tmp_path / "env"))
    assert run("gen-data", *FAST) == 0
    assert (tmp_path / "env" / "target.csv").exists()
