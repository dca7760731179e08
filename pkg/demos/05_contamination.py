"""Training data with 5% anomalies mixed in: the balance term against none.

Three seeds per weight, about 45 seconds.
"""
# %%
from pathlib import Path

import numpy as np

from fedexdnn.config import load_config, override
from fedexdnn.orchestrator import init_state, run_experiment

base = load_config(Path(__file__).resolve().parents[1] / "configs" / "contaminated.json")

# %%
results = {0.0: [], 1.0: []}
for seed in range(3):
    cfg = override(base, seed=seed)
    dataset = init_state(cfg).dataset
    for w in results:
        reports, _ = run_experiment(override(cfg, **{"loss.balance_weight": w}), dataset=dataset)
        results[w].append(reports[-1].auc)

for w, aucs in results.items():
    print(f"balance weight {w:g}: {np.round(aucs, 3).tolist()} mean {np.mean(aucs):.3f}")
