import json

import pandas as pd
import pytest

from ivpsr import __version__
from ivpsr.config import settings
from ivpsr.main import cli_main


def run(*argv):
    return cli_main([str(a) for a in argv])


def write_json(path, doc):
    path.write_text(json.dumps(doc))
    return path


SPEC_HMM = {"name": "spec_hmm", "plugin": "hmm", "feature": {"kind": "discrete_indicator", "alphabet_size": 2}}


@pytest.fixture(autouse=True)
def workdir(tmp_path, monkeypatch):
    """Run every command inside a scratch directory"""
    monkeypatch.chdir(tmp_path)
    return tmp_path


@pytest.fixture
def bkt_csv(workdir):
    path = workdir / "bkt.csv"
    assert run("generate", "--system", "bkt", "--seed", 4, "--n-seqs", 60, "--out", path) == 0
    return path


# Usage Tests
def test_version(capsys):
    assert run("--version") == 0
    assert __version__ in capsys.readouterr().out


def test_missing_subcommand_is_a_usage_error():
    assert run() == 1


def test_unknown_flag_is_a_usage_error():
    assert run("generate", "--bogus") == 1


# Generate Tests
def test_generate_is_deterministic(workdir):
    assert run("generate", "--system", "bkt", "--seed", 7, "--n-seqs", 20, "--out", workdir / "a.csv") == 0
    assert run("generate", "--system", "bkt", "--seed", 7, "--n-seqs", 20, "--out", workdir / "b.csv") == 0
    assert (workdir / "a.csv").read_bytes() == (workdir / "b.csv").read_bytes()
    assert (workdir / "a_params.json").exists()


def test_generate_defaults_to_output_dir(workdir):
    assert run("generate", "--n-seqs", 5) == 0
    assert (workdir / "results" / "sequences.csv").exists()


def test_generate_hmm_from_params(workdir):
    params = write_json(workdir / "hmm.json", {
        "n_states": 2, "transition": [[0.9, 0.2], [0.1, 0.8]], "emission": [[0.7, 0.1], [0.3, 0.9]],
        "initial": [0.5, 0.5],
    })
    out = workdir / "hmm_seqs.csv"
    assert run("generate", "--system", "hmm", "--params", params, "--n-seqs", 3, "--length", 10, "--out", out) == 0
    df = pd.read_csv(out)
    assert len(df) == 30
    assert df["seq_id"].nunique() == 3


def test_generate_lds_without_params_is_a_config_error():
    assert run("generate", "--system", "lds") == 1


def test_generate_subsystem_lds(workdir):
    out = workdir / "lds.csv"
    assert run("generate", "--system", "subsystem_lds", "--length", 50, "--out", out) == 0
    assert (workdir / "lds_params.json").exists()


# Train / Filter / Evaluate Tests
def test_train_filter_evaluate_round_trip(workdir, bkt_csv, capsys):
    config = write_json(workdir / "model.json", SPEC_HMM)
    model = workdir / "spec_hmm.json"
    assert run("train", "--data", bkt_csv, "--config", config, "--out", model) == 0
    assert model.exists()

    preds = workdir / "preds.csv"
    assert run("filter", "--model", model, "--data", bkt_csv, "--out", preds) == 0
    df = pd.read_csv(preds)
    assert list(df.columns) == ["seq_id", "t", "p_0", "p_1"]
    assert len(df) == len(pd.read_csv(bkt_csv))
    assert (df["p_0"] + df["p_1"]).sub(1.0).abs().max() < 1e-9

    capsys.readouterr()
    assert run("evaluate", "--model", model, "--data", bkt_csv, "--out", workdir / "eval.json") == 0
    report = json.loads(capsys.readouterr().out)
    assert report["metric"] == "mae"
    assert 0.0 < report["pooled"] < 0.5
    assert json.loads((workdir / "eval.json").read_text()) == report


def test_train_rejects_unsaveable_plugin(workdir, bkt_csv):
    config = write_json(workdir / "em.json", {"name": "em", "plugin": "em"})
    assert run("train", "--data", bkt_csv, "--config", config) == 1


def test_train_with_missing_data_file(workdir):
    config = write_json(workdir / "model.json", SPEC_HMM)
    assert run("train", "--data", workdir / "missing.csv", "--config", config) == 1


def test_malformed_config_json(workdir, bkt_csv):
    config = workdir / "broken.json"
    config.write_text("{not json")
    assert run("train", "--data", bkt_csv, "--config", config) == 1


def test_invalid_config_values(workdir, bkt_csv):
    config = write_json(workdir / "bad.json", {"name": "x", "plugin": "hmm",
                                               "feature": {"kind": "discrete_indicator", "k": 0, "alphabet_size": 2}})
    assert run("train", "--data", bkt_csv, "--config", config) == 1


def test_malformed_data_is_a_runtime_error(workdir):
    data = workdir / "bad.csv"
    data.write_text("seq_id,t,obs\na,1,0\na,2,x\n")
    config = write_json(workdir / "model.json", SPEC_HMM)
    assert run("train", "--data", data, "--config", config) == 2


# Experiment and Bounds Tests
def test_experiment_bkt_writes_artifacts(workdir):
    config = write_json(workdir / "exp.json", {
        "generator": {"n_seqs": 40, "seed": 2},
        "split": {"n_train": 25, "n_test": 10, "n_splits": 2},
        "models": [SPEC_HMM, {"name": "em", "plugin": "em"}],
    })
    out = workdir / "bkt_run"
    assert run("experiment", "bkt", "--config", config, "--output-dir", out) == 0
    table = pd.read_csv(out / "result_table.csv")
    assert len(table) == 4
    assert (out / "scatter_spec_hmm_vs_em.csv").exists()
    assert json.loads((out / "metadata.json").read_text())["config"]["experiment"] == "bkt"


def test_experiment_with_missing_config():
    assert run("experiment", "bkt", "--config", "nowhere.json") == 1


def test_experiment_defaults_to_configured_output_dir(workdir, monkeypatch):
    monkeypatch.setattr(settings, "output_dir", str(workdir / "custom"))
    config = write_json(workdir / "bounds.json", {"bounds": {"n_list": [50], "trials": 10}})
    assert run("experiment", "bounds", "--config", config) == 0
    assert (workdir / "custom" / "bounds_coverage.csv").exists()
    assert not (workdir / "results").exists()


def test_bounds_point_mass(workdir, capsys):
    assert run("bounds", "--preset", "point-mass", "--n", 50, 100, "--trials", 20, "--output-dir", workdir / "b") == 0
    records = json.loads(capsys.readouterr().out)
    assert [r["n"] for r in records] == [50, 100]
    assert all(r["violations"] == 0 for r in records)
    assert (workdir / "b" / "bounds_coverage.csv").exists()


def test_bounds_basis_uniform(workdir, capsys):
    assert run("bounds", "--n", 100, "--trials", 100) == 0
    records = json.loads(capsys.readouterr().out)
    assert records[0]["rate"] <= 0.1
