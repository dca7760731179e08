import json

import pytest

from fedexdnn import cli

from helpers import tiny_dict


@pytest.fixture
def cfg_path(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(tiny_dict(rounds=1)))
    return path


def run(*args):
    return cli.main([str(a) for a in args])


def test_fed_writes_reports(tmp_path, cfg_path, capsys):
    assert run("fed", "--config", cfg_path, "--out", tmp_path / "o") == 0
    assert (tmp_path / "o" / "round_001.json").is_file()
    assert (tmp_path / "o" / "summary.csv").is_file()


def test_fed_aggregator_sweep_summary(tmp_path, cfg_path):
    out = tmp_path / "o"
    assert run("fed", "--config", cfg_path, "--out", out,
               "--aggregator", "fedcc,fedavg_ex,kmeans_ex") == 0
    for agg in ("fedcc", "fedavg_ex", "kmeans_ex"):
        assert (out / agg / "round_001.json").is_file()
    rows = (out / "summary.csv").read_text().splitlines()
    assert rows[0].startswith("variant,round,aggregator,auc")
    assert {r.split(",")[0] for r in rows[1:]} == {"fedcc", "fedavg_ex", "kmeans_ex"}


def test_invalid_aggregator_lists_valid_values(tmp_path, cfg_path, capsys):
    assert run("fed", "--config", cfg_path, "--out", tmp_path, "--aggregator", "median") == 2
    err = capsys.readouterr().err
    assert "fedcc, fedavg_ex, kmeans_ex" in err


def test_local_exemplar_sweep(tmp_path, cfg_path):
    out = tmp_path / "o"
    assert run("local", "--config", cfg_path, "--out", out, "--exemplars", "8,16,32,64,128") == 0
    reports = sorted(out.glob("K*/round_*.json"))
    assert len(reports) == 5
    rep = json.loads((out / "K16" / "round_001.json").read_text())
    assert list(rep["client_losses"]) == ["0"]


def test_missing_dataset_path_exit_2(tmp_path, capsys):
    path = tmp_path / "cfg.json"
    d = tiny_dict(partition="sequential")
    d["data"].update(source="csv", train_path=str(tmp_path / "missing.csv"),
                     test_path=str(tmp_path / "missing.csv"))
    path.write_text(json.dumps(d))
    assert run("fed", "--config", path, "--out", tmp_path / "o") == 2
    assert "data.train_path" in capsys.readouterr().err


def test_missing_config_file_exit_2(tmp_path, capsys):
    assert run("fed", "--config", tmp_path / "none.json", "--out", tmp_path) == 2


def test_rounds_default_when_omitted(tmp_path):
    d = tiny_dict()
    del d["rounds"]
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(d))
    from fedexdnn.config import load_config
    assert load_config(path).rounds == 5


def test_ablate_toggles(tmp_path, cfg_path):
    out = tmp_path / "o"
    assert run("ablate", "--config", cfg_path, "--out", out, "--toggle", "absolute",
               "--toggle", "balance") == 0
    assert {p.name for p in out.iterdir() if p.is_dir()} == {
        "full", "without_absolute", "without_balance"}
    manifest = json.loads((out / "without_absolute" / "manifest.json").read_text())
    assert manifest["config"]["loss"]["absolute_weight"] == 0.0
    assert manifest["config"]["loss"]["balance_weight"] == 1.0


def test_ablate_empty_toggles_runs_full_model(tmp_path, cfg_path):
    out = tmp_path / "o"
    assert run("ablate", "--config", cfg_path, "--out", out) == 0
    assert [p.name for p in out.iterdir() if p.is_dir()] == ["full"]
    assert (out / "full" / "round_001.json").is_file()


def test_ablate_unknown_toggle(tmp_path, cfg_path, capsys):
    assert run("ablate", "--config", cfg_path, "--out", tmp_path, "--toggle", "bogus") == 2
    assert "cluster, drp, balance, absolute" in capsys.readouterr().err


def test_contamination_sweep(tmp_path, cfg_path):
    out = tmp_path / "o"
    assert run("ablate", "--config", cfg_path, "--out", out, "--contaminate", "0.01,0.05",
               "--balance-weights", "0,1,5") == 0
    dirs = {p.name for p in out.iterdir() if p.is_dir()}
    assert len(dirs) == 6 and "contam0.05_bal5" in dirs
    manifest = json.loads((out / "contam0.05_bal5" / "manifest.json").read_text())
    assert manifest["config"]["data"]["contamination"] == 0.05


def test_seed_flag_overrides(tmp_path, cfg_path):
    out = tmp_path / "o"
    assert run("fed", "--config", cfg_path, "--out", out, "--seed", "42",
               "--parallel-clients", "2") == 0
    rep = json.loads((out / "round_001.json").read_text())
    assert rep["seed"] == 42


def test_runtime_error_exit_3(tmp_path, monkeypatch, cfg_path):
    from fedexdnn.client import TrainingError

    def boom(*a, **k):
        raise TrainingError("non-finite loss")
    monkeypatch.setattr(cli, "run_experiment", boom)
    assert run("fed", "--config", cfg_path, "--out", tmp_path) == 3


def test_log_env(monkeypatch, tmp_path, cfg_path):
    monkeypatch.setenv("FEDEXDNN_LOG", "debug")
    assert run("fed", "--config", cfg_path, "--out", tmp_path / "o") == 0


def test_local_single_mode_reaches_high_auc(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"rounds": 5, "seed": 0, "train": {"local_epochs": 30},
                                "data": {"modes": 1, "n_per_mode": 400}}))
    out = tmp_path / "o"
    assert run("local", "--config", path, "--out", out) == 0
    rep = json.loads((out / "round_005.json").read_text())
    assert rep["auc"] >= 0.95
