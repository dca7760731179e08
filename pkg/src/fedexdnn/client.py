"""Local ExDNN training on one edge device."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import encoder as enc
from . import exdnn
from . import numkernel as nk
from .data import ClientShard, stack
from .models import GlobalModel, LocalModel

log = logging.getLogger(__name__)

SCALE_FLOOR = 1e-3


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    learning_rate: float = 0.005
    local_epochs: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.local_epochs < 1:
            raise ValueError("local_epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


def steps_per_epoch(n: int, batch_size: int) -> int:
    return math.ceil(n / batch_size)


def local_train(shard: ClientShard, init: GlobalModel, loss_cfg: exdnn.LossConfig,
                train_cfg: TrainConfig, num_exemplars: int | None = None,
                seed: int | None = None) -> LocalModel:
    """Jointly fit encoder and exemplars on the shard, starting from ``init``.

    ``loss_history[0]`` is the full objective before any update (mean over the
    first epoch's batches) and each later entry is one epoch's mean batch loss.
    If ``init`` carries no exemplars, ``num_exemplars`` random unit vectors are used.
    """
    if not shard.train:
        raise TrainingError(f"client {shard.client_id}: empty training shard")
    seed = train_cfg.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    x = stack(shard.train)  # labels never reach this point: train holds UnlabeledSegment
    n = len(x)
    config = init.encoder.config
    if x.shape[1] != config.input_dim:
        raise TrainingError(
            f"client {shard.client_id}: data has {x.shape[1]} channels, encoder expects "
            f"{config.input_dim}")

    if init.exemplars is None:
        if num_exemplars is None:
            raise TrainingError("fresh exemplar initialisation needs num_exemplars")
        exemplars = exdnn.random_exemplars(config.embed_dim, num_exemplars,
                                           int(rng.integers(2**31)))
    else:
        exemplars = init.exemplars

    weights = init.encoder.unflatten()
    state = {f"enc:{k}": v for k, v in weights.items()}
    state["exemplars"] = exemplars.matrix.copy()
    if loss_cfg.learnable_scales:
        base = init.scales or {}
        for g in ("gamma1", "gamma2", "gamma3"):
            state[g] = np.array(base.get(g, getattr(loss_cfg, g)), dtype=np.float64)
    opt = nk.Adam(state, lr=train_cfg.learning_rate)

    def batch_loss(batch, track: bool):
        tensors = nk.leaves(state) if track else {k: nk.as_tensor(v) for k, v in state.items()}
        enc_w = {k[4:]: t for k, t in tensors.items() if k.startswith("enc:")}
        scales = {g: tensors[g] for g in ("gamma1", "gamma2", "gamma3") if g in tensors}
        emb = enc.forward_tensors(enc_w, config, batch)
        return tensors, exdnn.objective(emb, batch, tensors["exemplars"], loss_cfg, scales)

    history = []
    order = rng.permutation(n)
    first = [batch_loss(x[order[i:i + train_cfg.batch_size]], False)[1].total.item()
             for i in range(0, n, train_cfg.batch_size)]
    history.append(float(np.mean(first)))

    for epoch in range(train_cfg.local_epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, train_cfg.batch_size):
            batch = x[order[start:start + train_cfg.batch_size]]
            with nk.GradTape() as tape:
                tensors, terms = batch_loss(batch, True)
            value = terms.total.item()
            if not np.isfinite(value):
                bad = [k for k, v in terms.parts.items() if not np.isfinite(v)]
                raise TrainingError(
                    f"client {shard.client_id}, epoch {epoch}: non-finite loss in term(s) {bad}")
            grads = tape.gradient(terms.total, tensors)
            opt.step(grads)
            for g in ("gamma1", "gamma2", "gamma3"):
                if g in state:
                    np.maximum(state[g], SCALE_FLOOR, out=state[g])
            losses.append(value)
        history.append(float(np.mean(losses)))
        log.debug("client %d epoch %d loss %.6f", shard.client_id, epoch, history[-1])

    new_encoder = enc.EncoderParams.from_arrays(
        config, {k[4:]: v for k, v in state.items() if k.startswith("enc:")})
    scales = ({g: float(state[g]) for g in ("gamma1", "gamma2", "gamma3")}
              if loss_cfg.learnable_scales else None)
    return LocalModel(
        client_id=shard.client_id,
        encoder=new_encoder,
        exemplars=exdnn.ExemplarSet(state["exemplars"].copy()),
        n_samples=n,
        final_loss=history[-1],
        epochs=train_cfg.local_epochs,
        loss_history=tuple(history),
        scales=scales,
    )


def score_dataset(model, segments: Sequence, chunk: int = 1024) -> np.ndarray:
    """Anomaly score per segment, order preserved.

    ``model`` is anything with ``encoder`` and ``exemplars`` attributes.
    """
    if len(segments) == 0:
        return np.zeros(0)
    x = stack(segments) if not isinstance(segments, np.ndarray) else segments
    out = []
    for i in range(0, len(x), chunk):
        emb = enc.forward(model.encoder, x[i:i + chunk])
        out.append(exdnn.anomaly_scores_from_embeddings(emb, model.exemplars))
    return np.concatenate(out)
