"""Stacked LSTM sequence encoder with a fully connected embedding head."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from . import numkernel as nk
from .numkernel import Tensor

CHECKPOINT_FORMAT = "fedexdnn-encoder/1"


class EncoderError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int
    num_layers: int = 4
    hidden_dim: int = 8
    embed_dim: int = 8
    bidirectional: bool = False

    def __post_init__(self):
        for name in ("input_dim", "num_layers", "hidden_dim", "embed_dim"):
            if getattr(self, name) < 1:
                raise EncoderError(f"{name} must be >= 1")

    @property
    def directions(self) -> int:
        return 2 if self.bidirectional else 1

    def manifest(self) -> list[tuple[str, tuple[int, ...]]]:
        h = self.hidden_dim
        out = []
        for layer in range(self.num_layers):
            fan_in = self.input_dim if layer == 0 else h * self.directions
            for suffix in ("", "_rev")[: self.directions]:
                prefix = f"lstm{layer}{suffix}"
                out += [(f"{prefix}.w_x", (fan_in, 4 * h)),
                        (f"{prefix}.w_h", (h, 4 * h)),
                        (f"{prefix}.b", (4 * h,))]
        out += [("embed.w", (h * self.directions, self.embed_dim)),
                ("embed.b", (self.embed_dim,))]
        return out

    def fingerprint(self) -> str:
        blob = json.dumps({"config": asdict(self), "manifest": self.manifest()},
                          sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class EncoderParams:
    config: EncoderConfig
    values: np.ndarray  # flat float64 vector

    def __post_init__(self):
        total = sum(int(np.prod(s)) for _, s in self.config.manifest())
        if self.values.shape != (total,):
            raise EncoderError(f"expected {total} values, got shape {self.values.shape}")

    @property
    def manifest(self) -> list[tuple[str, tuple[int, ...]]]:
        return self.config.manifest()

    @property
    def fingerprint(self) -> str:
        return self.config.fingerprint()

    def unflatten(self) -> dict[str, np.ndarray]:
        out, pos = {}, 0
        for name, shape in self.manifest:
            size = int(np.prod(shape))
            out[name] = self.values[pos:pos + size].reshape(shape).copy()
            pos += size
        return out

    @classmethod
    def from_arrays(cls, config: EncoderConfig, arrays: Mapping[str, np.ndarray]) -> "EncoderParams":
        parts = []
        for name, shape in config.manifest():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != shape:
                raise EncoderError(f"{name}: expected shape {shape}, got {arr.shape}")
            parts.append(arr.reshape(-1))
        return cls(config, np.concatenate(parts))


def param_count(config: EncoderConfig) -> int:
    return sum(int(np.prod(s)) for _, s in config.manifest())


def init(config: EncoderConfig, seed: int) -> EncoderParams:
    """Weights uniform in ±1/sqrt(fan_in), zero biases."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in config.manifest():
        if len(shape) == 1:
            arrays[name] = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(shape[0])
            arrays[name] = rng.uniform(-bound, bound, size=shape)
    return EncoderParams.from_arrays(config, arrays)


def zeros(config: EncoderConfig) -> EncoderParams:
    return EncoderParams(config, np.zeros(param_count(config)))


# ---------------------------------------------------------------------------
# forward pass


def _as_batch(x, config: EncoderConfig) -> np.ndarray:
    """Accept a Segment, a (channels, seg_len) array or an (n, channels, seg_len) batch."""
    arr = np.asarray(getattr(x, "values", x), dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise EncoderError(f"expected (n, channels, seg_len) input, got shape {arr.shape}")
    if arr.shape[1] != config.input_dim:
        raise EncoderError(
            f"input has {arr.shape[1]} channels, encoder expects {config.input_dim}")
    if arr.shape[2] < 1:
        raise EncoderError("seg_len must be >= 1")
    return arr


def _lstm_pass(steps: list, w_x: Tensor, w_h: Tensor, b: Tensor, hidden: int) -> list[Tensor]:
    n = steps[0].shape[0]
    h = nk.as_tensor(np.zeros((n, hidden)))
    c = nk.as_tensor(np.zeros((n, hidden)))
    outputs = []
    for x_t in steps:
        gates = x_t @ w_x + h @ w_h + b
        i = nk.sigmoid(gates[:, :hidden])
        f = nk.sigmoid(gates[:, hidden:2 * hidden])
        g = nk.tanh(gates[:, 2 * hidden:3 * hidden])
        o = nk.sigmoid(gates[:, 3 * hidden:])
        c = f * c + i * g
        h = o * nk.tanh(c)
        outputs.append(h)
    return outputs


def forward_tensors(weights: Mapping[str, Tensor], config: EncoderConfig, x,
                    fused: bool = True) -> Tensor:
    """Embed a batch with weights given as (possibly tracked) tensors; returns n×d.

    ``fused`` runs each layer as one sequence node with hand-written BPTT; the
    per-gate path builds the same graph out of primitive ops and serves as its
    reference.
    """
    batch = _as_batch(x, config)
    if not fused:
        return _forward_per_gate(weights, config, batch)
    h = config.hidden_dim
    seq = nk.as_tensor(np.ascontiguousarray(batch.transpose(2, 0, 1)))  # (T, n, m)
    for layer in range(config.num_layers):
        p = f"lstm{layer}"
        fwd = nk.lstm_sequence(seq, weights[f"{p}.w_x"], weights[f"{p}.w_h"], weights[f"{p}.b"])
        if not config.bidirectional:
            seq = fwd
            continue
        rev = nk.lstm_sequence(seq, weights[f"{p}_rev.w_x"], weights[f"{p}_rev.w_h"],
                               weights[f"{p}_rev.b"], reverse=True)
        seq = nk.concat([fwd, rev], axis=2)
    T = batch.shape[2]
    if config.bidirectional:
        # forward direction ends at the last step, reverse direction at the first
        last = nk.concat([nk.take(seq, (T - 1, slice(None), slice(0, h))),
                          nk.take(seq, (0, slice(None), slice(h, 2 * h)))], axis=1)
    else:
        last = nk.take(seq, T - 1)
    return last @ weights["embed.w"] + weights["embed.b"]


def _forward_per_gate(weights: Mapping[str, Tensor], config: EncoderConfig,
                      batch: np.ndarray) -> Tensor:
    h = config.hidden_dim
    steps = [nk.as_tensor(batch[:, :, t]) for t in range(batch.shape[2])]
    for layer in range(config.num_layers):
        fwd = _lstm_pass(steps, weights[f"lstm{layer}.w_x"], weights[f"lstm{layer}.w_h"],
                         weights[f"lstm{layer}.b"], h)
        if not config.bidirectional:
            steps = fwd
            continue
        rev = _lstm_pass(steps[::-1], weights[f"lstm{layer}_rev.w_x"],
                         weights[f"lstm{layer}_rev.w_h"], weights[f"lstm{layer}_rev.b"], h)[::-1]
        steps = [nk.concat([a, r], axis=1) for a, r in zip(fwd, rev)]
    if config.bidirectional:
        last = nk.concat([steps[-1][:, :h], steps[0][:, h:]], axis=1)
    else:
        last = steps[-1]
    return last @ weights["embed.w"] + weights["embed.b"]


def forward(params: EncoderParams, x) -> np.ndarray:
    """Embeddings as a plain array: shape (d,) for one segment, (n, d) for a batch."""
    single = np.asarray(getattr(x, "values", x)).ndim == 2
    weights = {k: nk.as_tensor(v) for k, v in params.unflatten().items()}
    out = forward_tensors(weights, params.config, x).numpy()
    return out[0] if single else out


# ---------------------------------------------------------------------------
# serialisation


def serialize(params: EncoderParams) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "fingerprint": params.fingerprint,
        "config": asdict(params.config),
        "manifest": [[name, list(shape)] for name, shape in params.manifest],
        "values": [float(v) for v in params.values],
    }


def deserialize(record: Mapping, expected: EncoderConfig | None = None) -> EncoderParams:
    if record.get("format") != CHECKPOINT_FORMAT:
        raise EncoderError(f"unknown checkpoint format {record.get('format')!r}")
    config = EncoderConfig(**record["config"])
    if record["fingerprint"] != config.fingerprint():
        raise EncoderError("checkpoint fingerprint does not match its config")
    if expected is not None and expected.fingerprint() != config.fingerprint():
        raise EncoderError(
            f"fingerprint mismatch: checkpoint {config.fingerprint()} vs expected "
            f"{expected.fingerprint()}")
    manifest = [(n, tuple(s)) for n, s in record["manifest"]]
    if manifest != config.manifest():
        raise EncoderError("checkpoint manifest does not match its config")
    return EncoderParams(config, np.array(record["values"], dtype=np.float64))


def save_checkpoint(params: EncoderParams, path: str | Path) -> None:
    Path(path).write_text(json.dumps(serialize(params), indent=1))


def load_checkpoint(path: str | Path, expected: EncoderConfig | None = None) -> EncoderParams:
    return deserialize(json.loads(Path(path).read_text()), expected)
