import json
from dataclasses import replace

import jsonschema
import numpy as np
import pytest

from fedexdnn import client, data as dt, fedserver, orchestrator as orc
from fedexdnn.config import ConfigError, DataSection, config_from_dict, load_config, override
from fedexdnn.models import GlobalModel

from helpers import tiny_config, tiny_dict


def test_rounds_emit_reports(tmp_path):
    reports, state = orc.run_experiment(tiny_config(rounds=3), tmp_path)
    assert [r.round for r in reports] == [1, 2, 3]
    assert sorted(p.name for p in tmp_path.glob("round_*.json")) == [
        "round_001.json", "round_002.json", "round_003.json"]
    for r in reports:
        assert set(r.client_losses) == {"0", "1"}
        assert 0 <= r.auc <= 1
    lines = (tmp_path / "summary.csv").read_text().splitlines()
    assert lines[0] == "round,aggregator,auc,f1,precision,recall,threshold,seconds"
    assert len(lines) == 4


def test_reports_validate_and_embed_config(tmp_path):
    cfg = tiny_config()
    orc.run_experiment(cfg, tmp_path)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["config"] == cfg.to_dict() and manifest["seed"] == cfg.seed
    for path in tmp_path.glob("round_*.json"):
        rep = json.loads(path.read_text())
        jsonschema.validate(rep, orc.REPORT_SCHEMA)
        assert rep["config_hash"] == cfg.hash() and rep["seed"] == cfg.seed
        assert "wall_time" not in rep


def test_zero_rounds_evaluates_initial_model():
    reports, state = orc.run_experiment(tiny_config(rounds=0))
    assert len(reports) == 1 and reports[0].round == 0
    assert reports[0].client_losses == {}
    assert state.model.round_index == 0


def test_same_config_byte_identical(tmp_path):
    cfg = tiny_config(aggregator="fedcc")
    orc.run_experiment(cfg, tmp_path / "a")
    orc.run_experiment(cfg, tmp_path / "b")
    for name in ("round_001.json", "round_002.json", "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_parallel_clients_match_serial():
    a, _ = orc.run_experiment(tiny_config())
    b, _ = orc.run_experiment(tiny_config(parallel_clients=2))
    assert [r.to_json_dict() | {"config_hash": None} for r in a] == \
        [r.to_json_dict() | {"config_hash": None} for r in b]


def test_single_client_equals_local_training():
    cfg = tiny_config(clients=1, modes_per_client=2, rounds=1)
    state = orc.init_state(cfg)
    start = state.model
    orc.run_round(state)
    seed = orc.derive_seed(cfg.seed, orc._TAG_CLIENT, 0, 1)
    direct = client.local_train(state.dataset.shards[0], start, cfg.loss, cfg.train,
                                cfg.num_exemplars, seed)
    assert np.array_equal(state.model.encoder.values, direct.encoder.values)
    assert np.array_equal(state.model.exemplars.matrix, direct.exemplars.matrix)


@pytest.mark.parametrize("agg", fedserver.AGGREGATORS)
def test_every_aggregator_runs(agg):
    reports, _ = orc.run_experiment(tiny_config(aggregator=agg, rounds=1))
    assert reports[0].aggregator == agg and reports[0].auc is not None


def test_auc_only_mode():
    reports, _ = orc.run_experiment(tiny_config(rounds=1, eval=replace(
        tiny_config().eval, mode="auc_only")))
    assert reports[0].auc is not None and reports[0].f1 is None


def test_csv_pipeline(tmp_path, rng):
    t = np.arange(400)
    def write(name, labels):
        x = np.column_stack([np.sin(t / 5), np.cos(t / 7)]) + 0.05 * rng.standard_normal((400, 2))
        x[labels == 1] += 2.0
        rows = ["a,b,label"] + [f"{x[i,0]},{x[i,1]},{labels[i]}" for i in range(400)]
        (tmp_path / name).write_text("\n".join(rows) + "\n")
    clean = np.zeros(400, int)
    dirty = np.zeros(400, int)
    dirty[200:230] = 1
    write("train.csv", clean)
    write("test.csv", dirty)
    data = DataSection(source="csv", train_path=str(tmp_path / "train.csv"),
                       test_path=str(tmp_path / "test.csv"), seg_len=10, stride=5)
    cfg = tiny_config(partition="sequential", data=data, rounds=1)
    reports, state = orc.run_experiment(cfg)
    assert state.dataset.channels == 2 and reports[0].auc is not None


def test_csv_missing_path_names_field(tmp_path):
    data = DataSection(source="csv", train_path=str(tmp_path / "nope.csv"),
                       test_path=str(tmp_path / "nope.csv"))
    with pytest.raises(ConfigError) as err:
        orc.prepare_data(tiny_config(partition="sequential", data=data))
    assert err.value.field == "data.train_path"


def test_derive_seed_stable_and_distinct():
    assert orc.derive_seed(1, 2, 3) == orc.derive_seed(1, 2, 3)
    assert len({orc.derive_seed(1, c, r) for c in range(5) for r in range(5)}) == 25


# config --------------------------------------------------------------------------

def test_config_roundtrip_and_defaults(tmp_path):
    d = tiny_dict()
    assert config_from_dict(d) == tiny_config()
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"aggregator": "kmeans_ex"}))
    cfg = load_config(path)
    assert cfg.rounds == 5 and cfg.aggregator == "kmeans_ex"
    assert cfg.train.learning_rate == 0.005 and cfg.fedcc.steps == 500


def test_config_errors():
    with pytest.raises(ConfigError, match="fedcc, fedavg_ex, kmeans_ex"):
        config_from_dict({"aggregator": "median"})
    with pytest.raises(ConfigError) as err:
        config_from_dict({"loss": {"gamma9": 1}})
    assert err.value.field == "loss.gamma9"
    with pytest.raises(ConfigError):
        config_from_dict({"train": {"local_epochs": 0}})
    with pytest.raises(ConfigError) as err:
        config_from_dict({"data": {"source": "csv"}})
    assert err.value.field == "data.train_path"


def test_override_nested():
    cfg = override(tiny_config(), **{"loss.balance_weight": 0.0, "rounds": 7})
    assert cfg.loss.balance_weight == 0.0 and cfg.rounds == 7
    assert cfg.hash() != tiny_config().hash()


# privacy boundary ------------------------------------------------------------------

def test_server_inputs_are_models_only():
    state = orc.init_state(tiny_config())
    shard = state.dataset.shards[0]
    with pytest.raises(TypeError):
        fedserver.aggregate(list(shard.train), "fedcc", 1)
    with pytest.raises(TypeError):
        fedserver.aggregate(list(state.dataset.test), "fedavg_ex", 1)
