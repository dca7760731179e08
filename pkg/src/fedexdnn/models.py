"""Model bundles exchanged between clients and the server.

Neither bundle holds data; only parameters and scalar bookkeeping cross the
client/server boundary.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .encoder import EncoderParams
from .exdnn import ExemplarSet


@dataclass(frozen=True)
class LocalModel:
    client_id: int
    encoder: EncoderParams
    exemplars: ExemplarSet
    n_samples: int
    final_loss: float = float("nan")
    epochs: int = 0
    loss_history: tuple[float, ...] = ()
    scales: dict[str, float] | None = None

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if not np.all(np.isfinite(self.encoder.values)) or not np.all(
                np.isfinite(self.exemplars.matrix)):
            raise ValueError(f"client {self.client_id}: non-finite parameters")


@dataclass(frozen=True)
class GlobalModel:
    encoder: EncoderParams
    exemplars: ExemplarSet | None
    round_index: int = 0
    scales: dict[str, float] | None = field(default=None)
