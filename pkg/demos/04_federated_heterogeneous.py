"""Two clients, each seeing two of four normal modes, under each exemplar aggregator.

One seed, same data for every aggregator.  Takes about a minute.
"""
# %%
from pathlib import Path

from fedexdnn.config import load_config, override
from fedexdnn.orchestrator import init_state, run_experiment

cfg = load_config(Path(__file__).resolve().parents[1] / "configs" / "heterogeneous.json")
dataset = init_state(cfg).dataset
for shard in dataset.shards:
    print(f"client {shard.client_id}: {len(shard.train)} unlabeled segments")

# %%
for agg in ("fedcc", "fedavg_ex", "kmeans_ex"):
    reports, _ = run_experiment(override(cfg, aggregator=agg), dataset=dataset)
    curve = " ".join(f"{r.auc:.3f}" for r in reports)
    print(f"{agg:10s} auc by round: {curve}")
