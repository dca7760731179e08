"""Exemplar module: soft assignment, DEC-style losses, DRP, absolute score loss."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from . import encoder as enc
from . import numkernel as nk
from .numkernel import LOG_EPS, Tensor

log = logging.getLogger(__name__)

TERMS = ("cluster", "drp", "balance", "absolute")


class ExemplarError(ValueError):
    pass


@dataclass(frozen=True)
class ExemplarSet:
    """Exemplars stored column-wise as a d×K matrix."""

    matrix: np.ndarray

    def __post_init__(self):
        if self.matrix.ndim != 2 or self.matrix.shape[1] < 1:
            raise ExemplarError("exemplar matrix must be d x K with K >= 1")
        if np.any(np.linalg.norm(self.matrix, axis=0) == 0):
            raise ExemplarError("every exemplar needs a positive norm")

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    @property
    def count(self) -> int:
        return self.matrix.shape[1]


def random_exemplars(dim: int, count: int, seed: int) -> ExemplarSet:
    """Random unit-norm exemplars."""
    rng = np.random.default_rng(seed)
    m = rng.standard_normal((dim, count))
    return ExemplarSet(m / np.linalg.norm(m, axis=0, keepdims=True))


@dataclass(frozen=True)
class LossConfig:
    gamma1: float = 2.0
    gamma2: float = 10.0
    gamma3: float = 10.0
    margin: float = 0.5
    knn_k: int = 10
    cluster_weight: float = 1.0
    drp_weight: float = 1.0
    balance_weight: float = 1.0
    absolute_weight: float = 1.0
    alpha: tuple[float, ...] | None = None  # None = uniform prior
    learnable_scales: bool = False

    def __post_init__(self):
        if min(self.gamma1, self.gamma2, self.gamma3) <= 0:
            raise ExemplarError("scale factors must be positive")
        if not 0 < self.margin < 1:
            raise ExemplarError("margin must lie in (0, 1)")
        if self.knn_k < 1:
            raise ExemplarError("knn_k must be >= 1")
        if self.alpha is not None and abs(sum(self.alpha) - 1.0) > 1e-9:
            raise ExemplarError("alpha must sum to 1")

    def prior(self, K: int) -> np.ndarray:
        if self.alpha is None:
            return np.full(K, 1.0 / K)
        if len(self.alpha) != K:
            raise ExemplarError(f"alpha has {len(self.alpha)} entries for {K} exemplars")
        return np.asarray(self.alpha, dtype=float)

    def without(self, *terms: str) -> "LossConfig":
        """Copy with the named loss terms zero-weighted."""
        unknown = set(terms) - set(TERMS)
        if unknown:
            raise ExemplarError(f"unknown loss term(s) {sorted(unknown)}; valid: {list(TERMS)}")
        return replace(self, **{f"{t}_weight": 0.0 for t in terms})


# ---------------------------------------------------------------------------
# assignments


def soft_assign(embeddings, exemplars, gamma1=2.0) -> Tensor:
    """Row-wise softmax of ``gamma1`` times embedding/exemplar cosine similarity.

    ``embeddings`` is n×d, ``exemplars`` a d×K matrix (array, Tensor or ExemplarSet).
    """
    C = nk.as_tensor(getattr(exemplars, "matrix", exemplars))
    sims = nk.cosine_matrix(embeddings, nk.transpose(C))
    return nk.softmax_scaled(sims, gamma1, axis=1)


def target_dist(Q) -> np.ndarray:
    """Sharpened targets: square, divide by soft cluster size, renormalise rows.

    The result is a constant; no gradient flows through it.
    """
    q = np.asarray(getattr(Q, "value", Q), dtype=np.float64)
    if q.shape[0] == 1:
        return q.copy()  # exact identity; the float path is off by rounding
    weight = q ** 2 / q.sum(axis=0, keepdims=True)
    return weight / weight.sum(axis=1, keepdims=True)


def cluster_loss(P, Q) -> Tensor:
    """Mean row-wise KL(p_i || q_i), with 0·log 0 = 0 and logs guarded by 1e-12."""
    P = np.asarray(getattr(P, "value", P), dtype=np.float64)
    Q = nk.as_tensor(Q)
    if P.shape != Q.shape:
        raise nk.ShapeError(f"cluster_loss: P {P.shape} vs Q {Q.shape}")
    bad = (P > 0) & (Q.value < LOG_EPS)
    if np.any(bad):
        log.warning("cluster_loss: %d assignments below %g where target is positive; "
                    "penalty capped by the log guard", int(bad.sum()), LOG_EPS)
    log_ratio = np.log(P + LOG_EPS) - nk.guarded_log(Q)
    return (log_ratio * P).sum() * (1.0 / P.shape[0])


def balance_loss(Q, alpha) -> Tensor:
    """Cross-entropy between the prior ``alpha`` and the mean soft assignment."""
    Q = nk.as_tensor(Q)
    alpha = np.asarray(alpha, dtype=np.float64)
    return -(nk.guarded_log(Q.mean(axis=0)) * alpha).sum()


def knn_positive_mask(raw, k: int) -> np.ndarray:
    """``mask[i, j]`` is True when j is among the k nearest (cosine) neighbours of i.

    Neighbours are found in the flattened raw input space, self excluded.
    """
    x = np.asarray(raw, dtype=np.float64).reshape(len(raw), -1)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    xn = x / np.where(norms > 0, norms, 1.0)
    sims = xn @ xn.T
    n = len(x)
    np.fill_diagonal(sims, -np.inf)
    mask = np.zeros((n, n), dtype=bool)
    kk = min(k, n - 1)
    if kk > 0:
        order = np.argsort(-sims, axis=1, kind="stable")[:, :kk]
        np.put_along_axis(mask, order, True, axis=1)
    return mask


def drp_loss(embeddings, raw, gamma2=10.0, knn_k: int = 10) -> Tensor:
    """Relation-preserving loss over one minibatch.

    For anchor i with raw-space neighbours P_i the term is
    ``log(1 + sum_{p in P_i, q not in P_i} exp(gamma2 * (s_iq - s_ip)))``;
    the double sum factorises into (sum_q e^{γ s_iq}) (sum_p e^{-γ s_ip}).
    """
    emb = nk.as_tensor(embeddings)
    n = emb.shape[0]
    if n < 2:
        raise ExemplarError("drp_loss needs at least two samples")
    pos = knn_positive_mask(raw, knn_k)
    neg = ~pos
    np.fill_diagonal(neg, False)
    S = nk.cosine_matrix(emb, emb)
    scaled = S * gamma2
    neg_sum = (nk.exp(scaled) * neg.astype(float)).sum(axis=1)
    pos_sum = (nk.exp(-scaled) * pos.astype(float)).sum(axis=1)
    return nk.log(neg_sum * pos_sum + 1.0).mean()


def absolute_loss(embeddings, exemplars, Q, gamma3=10.0, margin: float = 0.5) -> Tensor:
    """Margin loss on the similarity between a sample and its soft nearest exemplar."""
    C = nk.as_tensor(getattr(exemplars, "matrix", exemplars))
    Q = nk.as_tensor(Q)
    soft_nearest = Q @ nk.transpose(nk.normalize(C, axis=0))  # n×d
    t = (nk.normalize(embeddings) * soft_nearest).sum(axis=1)
    return nk.softplus((t - margin) * (-1.0) * gamma3).mean()


# ---------------------------------------------------------------------------
# full objective


@dataclass
class LossTerms:
    total: Tensor
    parts: dict[str, float] = field(default_factory=dict)


def objective(embeddings, raw, exemplars, cfg: LossConfig,
              scales: Mapping[str, object] | None = None, target=None) -> LossTerms:
    """Weighted sum of the cluster, DRP, balance and absolute terms for one batch.

    ``scales`` overrides gamma1..gamma3 (used when scale factors are learned).
    ``target`` pins P instead of recomputing it from the current assignments.
    """
    scales = scales or {}
    g1 = scales.get("gamma1", cfg.gamma1)
    g2 = scales.get("gamma2", cfg.gamma2)
    g3 = scales.get("gamma3", cfg.gamma3)
    C = nk.as_tensor(getattr(exemplars, "matrix", exemplars))
    Q = soft_assign(embeddings, C, g1)
    terms: dict[str, Tensor] = {}
    if cfg.cluster_weight:
        P = target_dist(Q) if target is None else target
        terms["cluster"] = cluster_loss(P, Q) * cfg.cluster_weight
    if cfg.drp_weight and len(raw) >= 2:
        terms["drp"] = drp_loss(embeddings, raw, g2, cfg.knn_k) * cfg.drp_weight
    if cfg.balance_weight:
        terms["balance"] = balance_loss(Q, cfg.prior(C.shape[1])) * cfg.balance_weight
    if cfg.absolute_weight:
        terms["absolute"] = absolute_loss(embeddings, C, Q, g3, cfg.margin) * cfg.absolute_weight
    total = nk.as_tensor(0.0)
    for t in terms.values():
        total = total + t
    return LossTerms(total, {k: t.item() for k, t in terms.items()})


def total_loss(batch, params: enc.EncoderParams, exemplars: ExemplarSet, cfg: LossConfig):
    """Objective value, its per-term breakdown and gradients for θ (flat) and C."""
    raw = np.asarray(batch if not isinstance(batch, (list, tuple)) else
                     [getattr(s, "values", s) for s in batch], dtype=np.float64)
    if len(raw) == 0:
        raise ExemplarError("empty batch")
    weights = nk.leaves(params.unflatten())
    C = Tensor(exemplars.matrix, requires_grad=True)
    with nk.GradTape() as tape:
        emb = enc.forward_tensors(weights, params.config, raw)
        terms = objective(emb, raw, C, cfg)
    grads = tape.gradient(terms.total, {**weights, "__exemplars__": C})
    C_grad = grads.pop("__exemplars__")
    theta_grad = enc.EncoderParams.from_arrays(params.config, grads).values
    return terms.total.item(), terms.parts, {"encoder": theta_grad, "exemplars": C_grad}


# ---------------------------------------------------------------------------
# scoring


def anomaly_scores_from_embeddings(embeddings: np.ndarray, exemplars) -> np.ndarray:
    """Negative best cosine similarity to any exemplar; higher is more anomalous."""
    C = np.asarray(getattr(exemplars, "matrix", exemplars), dtype=np.float64)
    emb = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    en = np.linalg.norm(emb, axis=1, keepdims=True)
    if np.any(en == 0):
        raise nk.DegenerateInputError("anomaly score undefined for a zero embedding")
    sims = (emb / en) @ (C / np.linalg.norm(C, axis=0, keepdims=True))
    return -np.clip(sims.max(axis=1), -1.0, 1.0)


def anomaly_score(params: enc.EncoderParams, exemplars, segment) -> float:
    return float(anomaly_scores_from_embeddings(enc.forward(params, segment), exemplars)[0])
