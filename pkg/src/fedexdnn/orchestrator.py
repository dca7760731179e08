"""Round loop: data preparation, client dispatch, aggregation and evaluation."""
from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import data as dt
from . import encoder as enc
from . import exdnn
from . import fedserver
from . import metrics
from .client import local_train, score_dataset
from .config import ConfigError, ExperimentConfig
from .models import GlobalModel, LocalModel

log = logging.getLogger(__name__)

# tags keep independent random streams apart
_TAG_TRAIN_DATA, _TAG_VAL_DATA, _TAG_TEST_DATA = 1, 2, 3
_TAG_PARTITION, _TAG_INIT, _TAG_CLIENT, _TAG_SERVER = 4, 5, 6, 7

REPORT_SCHEMA = {
    "type": "object",
    "required": ["round", "aggregator", "seed", "config_hash", "client_losses",
                 "client_samples", "auc", "f1", "precision", "recall", "threshold",
                 "per_client_auc"],
    "properties": {
        "round": {"type": "integer", "minimum": 0},
        "aggregator": {"type": "string"},
        "seed": {"type": "integer"},
        "config_hash": {"type": "string"},
        "client_losses": {"type": "object", "additionalProperties": {"type": "number"}},
        "client_samples": {"type": "object", "additionalProperties": {"type": "integer"}},
        "auc": {"type": ["number", "null"]},
        "f1": {"type": ["number", "null"]},
        "precision": {"type": ["number", "null"]},
        "recall": {"type": ["number", "null"]},
        "threshold": {"type": ["number", "null"]},
        "per_client_auc": {"type": "object",
                           "additionalProperties": {"type": ["number", "null"]}},
        "server": {"type": "object"},
    },
}


class OrchestrationError(RuntimeError):
    pass


def derive_seed(master: int, *parts: int) -> int:
    """Stable 32-bit seed for the stream named by ``parts`` under ``master``."""
    return int(np.random.SeedSequence([int(master), *map(int, parts)]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# data


@dataclass
class Dataset:
    shards: list[dt.ClientShard]
    val: list[dt.Segment]
    test: list[dt.Segment]
    channels: int


def _label_column(path: str, label_column: str | None, key: str) -> str | None:
    """Training files may omit the label column; evaluation files must carry it."""
    if label_column is None or key != "train_path":
        return label_column
    with open(path, encoding="utf-8") as fh:
        header = [h.strip() for h in fh.readline().split(",")]
    return label_column if label_column in header else None


def prepare_data(cfg: ExperimentConfig) -> Dataset:
    d = cfg.data
    if d.source == "synthetic":
        base = dt.SyntheticSpec(d.modes, d.channels, d.seg_len, d.n_per_mode,
                                d.contamination, d.noise_sigma, d.phase_jitter)
        train, _ = dt.synth_multimode(base, derive_seed(cfg.seed, _TAG_TRAIN_DATA))
        ev = replace(base, n_per_mode=d.n_per_mode_eval,
                     anomaly_fraction=d.eval_anomaly_fraction)
        val, _ = dt.synth_multimode(ev, derive_seed(cfg.seed, _TAG_VAL_DATA))
        test, _ = dt.synth_multimode(ev, derive_seed(cfg.seed, _TAG_TEST_DATA))
        channels = d.channels
    else:
        tables = {}
        for key in ("train_path", "val_path", "test_path"):
            path = getattr(d, key)
            if path:
                if not Path(path).is_file():
                    raise ConfigError(f"data.{key}: file not found: {path}", f"data.{key}")
                tables[key] = dt.load_csv(path, _label_column(path, d.label_column, key))
        train = dt.make_windows(tables["train_path"], d.seg_len, d.stride, "train")
        val = (dt.make_windows(tables["val_path"], d.seg_len, d.stride, "val")
               if "val_path" in tables else [])
        test = dt.make_windows(tables["test_path"], d.seg_len, d.stride, "test")
        if d.normalize:
            train, (val, test), _ = dt.normalize_fit_apply(train, val, test)
        channels = tables["train_path"].channels

    if cfg.partition == "by_mode":
        if d.source != "synthetic":
            raise OrchestrationError("partition 'by_mode' needs mode-tagged synthetic data")
        shards = dt.partition_by_mode(train, cfg.clients, cfg.modes_per_client,
                                      derive_seed(cfg.seed, _TAG_PARTITION))
    else:
        shards = dt.partition_sequential(train, cfg.clients)
    for s in shards:
        if not s.train:
            raise OrchestrationError(f"client {s.client_id} received no training data")
    return Dataset(shards, list(val), list(test), channels)


# ---------------------------------------------------------------------------
# rounds


@dataclass
class RoundReport:
    round: int
    aggregator: str
    seed: int
    config_hash: str
    client_losses: dict[str, float]
    client_samples: dict[str, int]
    auc: float | None
    f1: float | None
    precision: float | None
    recall: float | None
    threshold: float | None
    per_client_auc: dict[str, float | None]
    server: dict = field(default_factory=dict)
    wall_time: float = 0.0  # kept out of the JSON so reruns compare byte-for-byte

    def to_json_dict(self) -> dict:
        out = asdict(self)
        out.pop("wall_time")
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True, indent=2) + "\n"


@dataclass
class ExperimentState:
    cfg: ExperimentConfig
    dataset: Dataset
    model: GlobalModel
    round_index: int = 0
    projection: dict | None = None
    last_uploads: list[LocalModel] = field(default_factory=list)


def initial_model(cfg: ExperimentConfig, channels: int) -> GlobalModel:
    e = cfg.encoder
    config = enc.EncoderConfig(channels, e.num_layers, e.hidden_dim, e.embed_dim, e.bidirectional)
    params = enc.init(config, derive_seed(cfg.seed, _TAG_INIT, 0))
    exemplars = exdnn.random_exemplars(e.embed_dim, cfg.num_exemplars,
                                       derive_seed(cfg.seed, _TAG_INIT, 1))
    return GlobalModel(params, exemplars, 0)


def init_state(cfg: ExperimentConfig, dataset: Dataset | None = None) -> ExperimentState:
    dataset = dataset or prepare_data(cfg)
    return ExperimentState(cfg, dataset, initial_model(cfg, dataset.channels))


def evaluate(model, dataset: Dataset, mode: str = "val_threshold") -> metrics.Detection | None:
    """Score the pooled test set; threshold from validation when one is available."""
    if not dataset.test:
        return None
    test = metrics.ScoredSet(score_dataset(model, dataset.test), dt.labels_of(dataset.test))
    n_pos = int(test.labels.sum())
    if n_pos in (0, len(test.labels)):
        log.warning("test set holds a single class; metrics skipped")
        return None
    if mode == "auc_only":
        return metrics.Detection(float("nan"), float("nan"), float("nan"), float("nan"),
                                 metrics.auc(test))
    if dataset.val:
        val = metrics.ScoredSet(score_dataset(model, dataset.val), dt.labels_of(dataset.val))
        if 0 < val.labels.sum() < len(val.labels):
            return metrics.select_then_apply(val, test)
        log.warning("validation set holds a single class; selecting threshold on test")
    best = metrics.best_f1(test)
    return replace(best, auc=metrics.auc(test))


def _nan_to_none(x):
    return None if x is None or not np.isfinite(x) else float(x)


def _train_clients(state: ExperimentState, round_index: int) -> list[LocalModel]:
    cfg = state.cfg

    def job(shard):
        seed = derive_seed(cfg.seed, _TAG_CLIENT, shard.client_id, round_index)
        return local_train(shard, state.model, cfg.loss, cfg.train, cfg.num_exemplars, seed)

    if cfg.parallel_clients > 1:
        with ThreadPoolExecutor(max_workers=cfg.parallel_clients) as pool:
            uploads = list(pool.map(job, state.dataset.shards))
    else:
        uploads = [job(s) for s in state.dataset.shards]
    return sorted(uploads, key=lambda m: m.client_id)


def _report(state: ExperimentState, round_index: int, uploads: Sequence[LocalModel],
            server: dict, started: float) -> RoundReport:
    cfg = state.cfg
    det = evaluate(state.model, state.dataset, cfg.eval.mode)
    per_client = {}
    for m in uploads:
        d = evaluate(m, state.dataset, "auc_only")
        per_client[str(m.client_id)] = _nan_to_none(d.auc) if d else None
    return RoundReport(
        round=round_index,
        aggregator=cfg.aggregator,
        seed=cfg.seed,
        config_hash=cfg.hash(),
        client_losses={str(m.client_id): float(m.final_loss) for m in uploads},
        client_samples={str(m.client_id): int(m.n_samples) for m in uploads},
        auc=_nan_to_none(det.auc) if det else None,
        f1=_nan_to_none(det.f1) if det else None,
        precision=_nan_to_none(det.precision) if det else None,
        recall=_nan_to_none(det.recall) if det else None,
        threshold=_nan_to_none(det.threshold) if det else None,
        per_client_auc=per_client,
        server={k: _nan_to_none(v) if isinstance(v, float) else v for k, v in server.items()},
        wall_time=time.perf_counter() - started,
    )


def run_round(state: ExperimentState) -> RoundReport:
    """One federated round: local training, upload, aggregation, evaluation."""
    started = time.perf_counter()
    r = state.round_index + 1
    uploads = _train_clients(state, r)
    outcome = fedserver.aggregate(uploads, state.cfg.aggregator, r, state.cfg.fedcc,
                                  derive_seed(state.cfg.seed, _TAG_SERVER, r), state.projection)
    state.model = outcome.model
    state.projection = outcome.projection
    state.round_index = r
    state.last_uploads = uploads
    report = _report(state, r, uploads, outcome.diagnostics, started)
    log.info("round %d %s auc=%s f1=%s (%.1fs)", r, state.cfg.aggregator, report.auc,
             report.f1, report.wall_time)
    return report


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None,
                   dataset: Dataset | None = None) -> tuple[list[RoundReport], ExperimentState]:
    """Run ``cfg.rounds`` rounds; with zero rounds only the initial model is evaluated."""
    state = init_state(cfg, dataset)
    reports = []
    if cfg.rounds == 0:
        reports.append(_report(state, 0, [], {}, time.perf_counter()))
    for _ in range(cfg.rounds):
        reports.append(run_round(state))
    if out_dir is not None:
        write_reports(reports, cfg, out_dir, state)
    return reports, state


# ---------------------------------------------------------------------------
# output


SUMMARY_FIELDS = ("round", "aggregator", "auc", "f1", "precision", "recall", "threshold",
                  "seconds")


def write_reports(reports: Sequence[RoundReport], cfg: ExperimentConfig, out_dir: str | Path,
                  state: ExperimentState | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for rep in reports:
        (out / f"round_{rep.round:03d}.json").write_text(rep.to_json())
    lines = [",".join(SUMMARY_FIELDS)]
    for rep in reports:
        row = [rep.round, rep.aggregator, rep.auc, rep.f1, rep.precision, rep.recall,
               rep.threshold, f"{rep.wall_time:.3f}"]
        lines.append(",".join("" if v is None else str(v) for v in row))
    (out / "summary.csv").write_text("\n".join(lines) + "\n")
    manifest = {"config": cfg.to_dict(), "config_hash": cfg.hash(), "seed": cfg.seed,
                "rounds": [r.round for r in reports]}
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    if state is not None:
        enc.save_checkpoint(state.model.encoder, out / "encoder.json")
        np.save(out / "exemplars.npy", state.model.exemplars.matrix)
    return out
