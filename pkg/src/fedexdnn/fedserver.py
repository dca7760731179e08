"""Server-side aggregation of uploaded local models.

Encoders are combined by sample-weighted federated averaging.  Exemplars are
combined by one of three aggregators:

* ``fedcc``     -- constrained clustering of all local exemplars in a learned
                   projection space, then a soft-assignment weighted merge;
* ``fedavg_ex`` -- slot-wise averaging;
* ``kmeans_ex`` -- k-means over the pooled exemplars.

Everything here consumes :class:`LocalModel` uploads (parameters only).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from . import numkernel as nk
from .encoder import EncoderParams
from .exdnn import ExemplarSet, target_dist
from .models import GlobalModel, LocalModel
from .numkernel import Tensor

log = logging.getLogger(__name__)

AGGREGATORS = ("fedcc", "fedavg_ex", "kmeans_ex")
REJITTER_SCALE = 1e-6


class AggregationError(ValueError):
    pass


def _check_uploads(models: Sequence[LocalModel]) -> None:
    if not models:
        raise AggregationError("no local models to aggregate")
    for m in models:
        if not isinstance(m, LocalModel):
            raise TypeError(f"server accepts LocalModel uploads only, got {type(m).__name__}")


def pooled_exemplars(models: Sequence[LocalModel]) -> np.ndarray:
    """Stack local exemplars as N×d rows, client-major then slot (row = l*K + i)."""
    _check_uploads(models)
    shapes = {m.exemplars.matrix.shape for m in models}
    if len(shapes) != 1:
        raise AggregationError(f"exemplar shapes differ across clients: {sorted(shapes)}")
    return np.concatenate([m.exemplars.matrix.T for m in models], axis=0)


# ---------------------------------------------------------------------------
# encoders


def fedavg_encoders(models: Sequence[LocalModel]) -> EncoderParams:
    """Average encoder parameters weighted by each client's sample count."""
    _check_uploads(models)
    prints = {m.encoder.fingerprint for m in models}
    if len(prints) != 1:
        raise AggregationError(f"encoder fingerprints differ: {sorted(prints)}")
    # sort by client id so the sum order is fixed regardless of upload order
    ordered = sorted(models, key=lambda m: m.client_id)
    total = float(sum(m.n_samples for m in ordered))
    acc = np.zeros_like(ordered[0].encoder.values)
    for m in ordered:
        acc += (m.n_samples / total) * m.encoder.values
    return EncoderParams(ordered[0].encoder.config, acc)


# ---------------------------------------------------------------------------
# baseline exemplar aggregators


def _rejitter_degenerate(matrix: np.ndarray, seed: int) -> np.ndarray:
    norms = np.linalg.norm(matrix, axis=0)
    bad = norms < 1e-12
    if np.any(bad):
        log.warning("exemplar slot(s) %s collapsed to zero norm; re-jittering",
                    np.flatnonzero(bad).tolist())
        rng = np.random.default_rng(seed)
        matrix = matrix.copy()
        matrix[:, bad] += REJITTER_SCALE * rng.standard_normal((matrix.shape[0], int(bad.sum())))
    return matrix


def avg_exemplars(models: Sequence[LocalModel], seed: int = 0) -> ExemplarSet:
    """Slot-wise mean of local exemplars (FedAvgEx)."""
    pooled = pooled_exemplars(models)
    K = models[0].exemplars.count
    mean = pooled.reshape(len(models), K, -1).mean(axis=0).T
    return ExemplarSet(_rejitter_degenerate(mean, seed))


@dataclass
class KMeansResult:
    centers: np.ndarray  # K×d
    labels: np.ndarray
    distortion: list[float] = field(default_factory=list)  # per Lloyd iteration


def kmeans_pp_seeds(points: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    """Indices of K k-means++ seeds (squared-distance weighted sampling)."""
    n = len(points)
    idx = [int(rng.integers(n))]
    d2 = ((points - points[idx[0]]) ** 2).sum(axis=1)
    for _ in range(1, K):
        total = d2.sum()
        if total <= 0:
            # every point coincides with a seed; pick an unused one uniformly
            unused = np.setdiff1d(np.arange(n), idx)
            nxt = int(rng.choice(unused)) if len(unused) else int(rng.integers(n))
        else:
            nxt = int(rng.choice(n, p=d2 / total))
        idx.append(nxt)
        d2 = np.minimum(d2, ((points - points[nxt]) ** 2).sum(axis=1))
    return np.array(idx)


def kmeans_fit(points: np.ndarray, K: int, seed: int, tol: float = 1e-8,
               max_iter: int = 100) -> KMeansResult:
    """k-means++ seeding followed by Lloyd iterations.

    An empty cluster is re-seeded from the point farthest from its center.
    """
    points = np.asarray(points, dtype=np.float64)
    if K < 1 or K > len(points):
        raise AggregationError(f"cannot form {K} clusters from {len(points)} points")
    rng = np.random.default_rng(seed)
    centers = points[kmeans_pp_seeds(points, K, rng)].copy()
    distortion = []
    labels = np.zeros(len(points), dtype=int)
    for _ in range(max_iter):
        d2 = ((points[:, None, :] - centers[None]) ** 2).sum(axis=2)
        labels = d2.argmin(axis=1)
        new = centers.copy()
        for j in range(K):
            members = labels == j
            if members.any():
                new[j] = points[members].mean(axis=0)
            else:
                far = int(d2[np.arange(len(points)), labels].argmax())
                new[j] = points[far]
                labels[far] = j
        d2_new = ((points - new[labels]) ** 2).sum(axis=1)
        distortion.append(float(d2_new.sum()))
        shift = float(np.abs(new - centers).max())
        centers = new
        if shift <= tol:
            break
    return KMeansResult(centers, labels, distortion)


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise nk.DegenerateInputError("zero-norm exemplar")
    return x / norms


def kmeans_exemplars(models: Sequence[LocalModel], K: int | None = None,
                     seed: int = 0) -> ExemplarSet:
    """k-means over the pooled, unit-normalised local exemplars (FedKmsEx)."""
    pooled = _unit_rows(pooled_exemplars(models))
    K = models[0].exemplars.count if K is None else K
    result = kmeans_fit(pooled, K, seed)
    return ExemplarSet(_rejitter_degenerate(result.centers.T, seed))


# ---------------------------------------------------------------------------
# constrained clustering (FedCC)


@dataclass(frozen=True)
class FedCCConfig:
    steps: int = 500
    batch_size: int = 256
    learning_rate: float = 0.005
    gamma4: float = 5.0
    gamma5: float = 1.0
    align_k: int | None = None  # None = number of clients
    literal_eq11: bool = False
    balance_on: str = "q"  # "q" or "p"
    hidden_mult: int = 4
    warm_start: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.balance_on not in ("q", "p"):
            raise AggregationError("balance_on must be 'q' or 'p'")
        if self.steps < 0 or self.batch_size < 2:
            raise AggregationError("steps must be >= 0 and batch_size >= 2")


def init_projection(d: int, seed: int, hidden_mult: int = 4) -> dict[str, np.ndarray]:
    """Three fully connected layers d -> 4d -> 4d -> d (uniform ±1/sqrt(fan_in))."""
    rng = np.random.default_rng(seed)
    widths = [d, hidden_mult * d, hidden_mult * d, d]
    params = {}
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        bound = 1.0 / np.sqrt(a)
        params[f"w{i}"] = rng.uniform(-bound, bound, size=(a, b))
        params[f"b{i}"] = np.zeros(b)
    return params


def project(params: Mapping[str, object], x) -> Tensor:
    """Apply h: ReLU after the first two layers, linear output."""
    h = nk.as_tensor(x)
    for i in range(3):
        h = h @ params[f"w{i}"] + params[f"b{i}"]
        if i < 2:
            h = nk.relu(h)
    return h


def build_alignment(local_exemplars: Sequence[np.ndarray] | np.ndarray, align_k: int,
                    K: int | None = None) -> np.ndarray:
    """Pairwise ±1 alignment matrix over the N = L·K pooled exemplars.

    ``local_exemplars`` is either a list of d×K matrices (one per client) or the
    pooled N×d rows together with ``K``.  A pair is positive when both
    exemplars share a slot index and one is among the other's ``align_k``
    cosine nearest neighbours (either direction); every other pair is
    negative.  The diagonal holds 0 and is ignored by the loss.
    """
    if isinstance(local_exemplars, np.ndarray) and local_exemplars.ndim == 2:
        if K is None:
            raise AggregationError("K is required with pooled exemplars")
        rows = local_exemplars
    else:
        mats = list(local_exemplars)
        K = mats[0].shape[1]
        rows = np.concatenate([m.T for m in mats], axis=0)
    N = len(rows)
    slots = np.arange(N) % K
    unit = _unit_rows(rows)
    sims = unit @ unit.T
    np.fill_diagonal(sims, -np.inf)
    kk = min(align_k, N - 1)
    knn = np.zeros((N, N), dtype=bool)  # knn[a, b]: a is a neighbour of b
    if kk > 0:
        nearest = np.argsort(-sims, axis=1, kind="stable")[:, :kk]
        for b in range(N):
            knn[nearest[b], b] = True
    positive = (slots[:, None] == slots[None, :]) & (knn | knn.T)
    e = np.where(positive, 1.0, -1.0)
    np.fill_diagonal(e, 0.0)
    return e


def _soft_assign_latent(H: Tensor, V, gamma4) -> Tensor:
    sims = nk.cosine_matrix(H, V)
    return nk.softmax_scaled(sims, gamma4, axis=1)


def _differentiable_target(Q: Tensor) -> Tensor:
    weight = (Q * Q) / Q.sum(axis=0, keepdims=True)
    return weight / weight.sum(axis=1, keepdims=True)


def fedcc_terms(proj: Mapping[str, object], centers, exemplars: np.ndarray, e: np.ndarray,
                cfg: FedCCConfig, target: np.ndarray | None = None) -> dict[str, Tensor]:
    """Clustering, balance and alignment terms of the constrained clustering loss.

    ``exemplars`` are the pooled N×d rows fed to the projection, ``centers`` the
    K×d latent centers.  ``target`` pins P (otherwise recomputed, detached).
    """
    H = project(proj, exemplars)
    N = H.shape[0]
    Q = _soft_assign_latent(H, centers, cfg.gamma4)
    P = target_dist(Q) if target is None else np.asarray(target)
    clustering = -(nk.guarded_log(Q) * P).sum() * (1.0 / N)
    assign = Q if cfg.balance_on == "q" else _differentiable_target(Q)
    balance = -nk.guarded_log(assign.mean(axis=0)).sum()
    S = nk.cosine_matrix(H, H)
    sign = e if cfg.literal_eq11 else -e
    off_diag = 1.0 - np.eye(N)
    pair = nk.exp(S * (sign * cfg.gamma5)) * off_diag
    alignment = nk.log(pair.sum(axis=1) + 1.0).mean()
    return {"clustering": clustering, "balance": balance, "alignment": alignment}


def fedcc_loss(proj: Mapping[str, object], centers, exemplars: np.ndarray, e: np.ndarray,
               cfg: FedCCConfig, target: np.ndarray | None = None) -> Tensor:
    terms = fedcc_terms(proj, centers, exemplars, e, cfg, target)
    return terms["clustering"] + terms["balance"] + terms["alignment"]


@dataclass
class FedCCResult:
    assignments: np.ndarray  # N×K soft assignment of every local exemplar
    projection: dict[str, np.ndarray]
    centers: np.ndarray  # K×d, latent space
    loss_history: list[float]
    alignment: np.ndarray


def fedcc_train(models_or_exemplars, cfg: FedCCConfig = FedCCConfig(), K: int | None = None,
                init_projection_params: Mapping[str, np.ndarray] | None = None) -> FedCCResult:
    """Learn the projection and latent centers, return soft assignments of all exemplars.

    Accepts LocalModel uploads or a list of d×K exemplar matrices.
    """
    if models_or_exemplars and isinstance(models_or_exemplars[0], LocalModel):
        _check_uploads(models_or_exemplars)
        mats = [m.exemplars.matrix for m in models_or_exemplars]
    else:
        mats = [np.asarray(m, dtype=np.float64) for m in models_or_exemplars]
    if not mats:
        raise AggregationError("no exemplars to cluster")
    K = mats[0].shape[1] if K is None else K
    L = len(mats)
    rows = _unit_rows(np.concatenate([m.T for m in mats], axis=0))
    N, d = rows.shape
    if N < K:
        raise AggregationError(f"{N} exemplars cannot fill {K} centers")
    align_k = L if cfg.align_k is None else cfg.align_k
    e = build_alignment(rows, align_k, K=mats[0].shape[1])

    rng = np.random.default_rng(cfg.seed)
    proj = ({k: v.copy() for k, v in init_projection_params.items()}
            if init_projection_params is not None
            else init_projection(d, int(rng.integers(2**31)), cfg.hidden_mult))
    H0 = _unit_rows(project(proj, rows).numpy())
    seeds = kmeans_pp_seeds(H0, K, rng)
    state = {**proj, "centers": H0[seeds].copy()}
    opt = nk.Adam(state, lr=cfg.learning_rate)

    history = []
    for step in range(cfg.steps):
        if N > cfg.batch_size:
            idx = np.sort(rng.choice(N, size=cfg.batch_size, replace=False))
        else:
            idx = np.arange(N)
        tensors = nk.leaves(state)
        with nk.GradTape() as tape:
            loss = fedcc_loss(tensors, tensors["centers"], rows[idx], e[np.ix_(idx, idx)], cfg)
        value = loss.item()
        if not np.isfinite(value):
            raise AggregationError(f"FedCC loss became non-finite at step {step}")
        opt.step(tape.gradient(loss, tensors))
        history.append(value)

    final_proj = {k: v for k, v in state.items() if k != "centers"}
    Q = _soft_assign_latent(project(final_proj, rows), state["centers"], cfg.gamma4).numpy()
    return FedCCResult(Q, final_proj, state["centers"].copy(), history, e)


def merge_exemplars(assignments: np.ndarray, local_exemplars, seed: int = 0) -> ExemplarSet:
    """Assignment-weighted mean of the local exemplars in their original space.

    ``local_exemplars`` is the pooled N×d array or a list of d×K matrices.  A
    center whose assignment column sums to ~0 is re-seeded from the exemplar
    least covered by the other centers.
    """
    Q = np.asarray(assignments, dtype=np.float64)
    if isinstance(local_exemplars, np.ndarray) and local_exemplars.ndim == 2:
        rows = local_exemplars
    else:
        rows = np.concatenate([np.asarray(m).T for m in local_exemplars], axis=0)
    if Q.shape[0] != rows.shape[0]:
        raise AggregationError(f"{Q.shape[0]} assignment rows for {rows.shape[0]} exemplars")
    mass = Q.sum(axis=0)
    U = np.empty((Q.shape[1], rows.shape[1]))
    dead = mass < 1e-12
    for z in np.flatnonzero(~dead):
        U[z] = (Q[:, z] @ rows) / mass[z]
    if np.any(dead):
        coverage = Q[:, ~dead].max(axis=1) if np.any(~dead) else np.zeros(len(rows))
        order = np.argsort(coverage, kind="stable")
        for rank, z in enumerate(np.flatnonzero(dead)):
            log.warning("global exemplar %d received no assignment mass; re-seeding", z)
            U[z] = rows[order[rank % len(order)]]
    return ExemplarSet(_rejitter_degenerate(U.T, seed))


# ---------------------------------------------------------------------------
# one server step


@dataclass
class ServerOutcome:
    model: GlobalModel
    diagnostics: dict = field(default_factory=dict)
    projection: dict[str, np.ndarray] | None = None


def aggregate(models: Sequence[LocalModel], aggregator: str, round_index: int,
              fedcc_cfg: FedCCConfig = FedCCConfig(), seed: int = 0,
              previous_projection: Mapping[str, np.ndarray] | None = None) -> ServerOutcome:
    """Global exemplars via the chosen aggregator plus FedAvg of encoders."""
    _check_uploads(models)
    if aggregator not in AGGREGATORS:
        raise AggregationError(
            f"unknown aggregator {aggregator!r}; valid values: {', '.join(AGGREGATORS)}")
    ordered = sorted(models, key=lambda m: m.client_id)
    diagnostics: dict = {}
    projection = None
    if aggregator == "fedavg_ex":
        U = avg_exemplars(ordered, seed)
    elif aggregator == "kmeans_ex":
        U = kmeans_exemplars(ordered, seed=seed)
    else:
        cfg = replace(fedcc_cfg, seed=seed)
        warm = previous_projection if fedcc_cfg.warm_start else None
        result = fedcc_train(ordered, cfg, init_projection_params=warm)
        U = merge_exemplars(result.assignments, pooled_exemplars(ordered), seed)
        projection = result.projection
        diagnostics["fedcc_final_loss"] = result.loss_history[-1] if result.loss_history else None
    encoder = fedavg_encoders(ordered)
    scales = None
    if all(m.scales for m in ordered):
        total = float(sum(m.n_samples for m in ordered))
        scales = {g: sum(m.n_samples / total * m.scales[g] for m in ordered)
                  for g in ordered[0].scales}
    return ServerOutcome(GlobalModel(encoder, U, round_index, scales), diagnostics, projection)
