"""Server side: merging exemplars whose slots disagree across clients.

Three clients hold noisy copies of the same four centroids, each in its own slot
order.  Slot-wise averaging mixes unrelated centroids; constrained clustering and
k-means both recover them.
"""
# %%
import numpy as np
from scipy.optimize import linear_sum_assignment

from fedexdnn import fedserver as fs

rng = np.random.default_rng(7)
truth = rng.standard_normal((8, 4))
truth /= np.linalg.norm(truth, axis=0)
mats = [truth[:, rng.permutation(4)] + 0.05 * rng.standard_normal((8, 4)) for _ in range(3)]


def matched_min_cos(U):
    Un = U / np.linalg.norm(U, axis=0)
    sims = Un.T @ truth
    r, c = linear_sum_assignment(-sims)
    return sims[r, c].min()


# %% slot-wise mean
print("slot average   ", round(matched_min_cos(np.mean(mats, axis=0)), 4))

# %% constrained clustering, then assignment-weighted merge
res = fs.fedcc_train(mats, fs.FedCCConfig(seed=0))
U = fs.merge_exemplars(res.assignments, mats).matrix
print("fedcc          ", round(matched_min_cos(U), 4))
print("hard clusters  ", res.assignments.argmax(axis=1).reshape(3, 4))
print("loss first/last", round(res.loss_history[0], 3), round(res.loss_history[-1], 3))

# %% k-means over the pooled unit exemplars
pooled = np.concatenate([m.T for m in mats])
km = fs.kmeans_fit(pooled / np.linalg.norm(pooled, axis=1, keepdims=True), 4, seed=0)
print("kmeans         ", round(matched_min_cos(km.centers.T), 4))
