"""One device, one normal pattern: train the exemplar detector and look at its scores."""
# %%
import numpy as np

from fedexdnn import data as dt
from fedexdnn import encoder as enc
from fedexdnn.client import TrainConfig, score_dataset
from fedexdnn.config import DataSection, ExperimentConfig
from fedexdnn.orchestrator import run_experiment

# %% a single client that sees every normal mode; five rounds of 30 local epochs
cfg = ExperimentConfig(clients=1, modes_per_client=1, aggregator="fedavg_ex", rounds=5,
                       train=TrainConfig(local_epochs=30),
                       data=DataSection(modes=1, n_per_mode=400))
reports, state = run_experiment(cfg)
for r in reports:
    print(f"round {r.round}: auc {r.auc:.3f} f1 {r.f1:.3f} loss {r.client_losses['0']:.3f}")

# %% anomaly score is the negative best cosine to any exemplar
scores = score_dataset(state.model, state.dataset.test)
labels = dt.labels_of(state.dataset.test)
print("mean score, normal  :", round(float(scores[labels == 0].mean()), 3))
print("mean score, anomaly :", round(float(scores[labels == 1].mean()), 3))

# %% how the exemplars are used: share of test normals nearest to each one
emb = enc.forward(state.model.encoder, dt.stack(state.dataset.test))
emb /= np.linalg.norm(emb, axis=1, keepdims=True)
C = state.model.exemplars.matrix / np.linalg.norm(state.model.exemplars.matrix, axis=0)
nearest = (emb[labels == 0] @ C).argmax(axis=1)
print("exemplar usage:", np.bincount(nearest, minlength=C.shape[1]))
