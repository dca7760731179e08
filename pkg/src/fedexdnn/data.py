"""Series ingestion, windowing, normalisation, client partitioning and synthetic data."""
from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

NORMAL, ANOMALY = 0, 1
ANOMALY_MODE = -1


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class SeriesTable:
    values: np.ndarray  # timesteps x channels
    point_labels: np.ndarray | None = None
    columns: tuple[str, ...] = ()

    def __post_init__(self):
        if self.values.ndim != 2:
            raise DataError("values must be timesteps x channels")
        if not np.all(np.isfinite(self.values)):
            raise DataError("values must be finite")
        if self.point_labels is not None and len(self.point_labels) != len(self.values):
            raise DataError("label length must equal timesteps")

    @property
    def timesteps(self) -> int:
        return self.values.shape[0]

    @property
    def channels(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class Segment:
    """One window, stored channels x seg_len, with optional label and mode tag."""

    values: np.ndarray
    label: int | None = None
    origin: tuple[str, int] = ("", 0)
    mode: int | None = None

    @property
    def feature_dim(self) -> int:
        return self.values.shape[0]

    @property
    def seg_len(self) -> int:
        return self.values.shape[1]

    def unlabeled(self) -> "UnlabeledSegment":
        return UnlabeledSegment(self.values, self.origin)


@dataclass(frozen=True)
class UnlabeledSegment:
    """Training window as a client sees it: no label, no mode tag."""

    values: np.ndarray
    origin: tuple[str, int] = ("", 0)

    @property
    def feature_dim(self) -> int:
        return self.values.shape[0]

    @property
    def seg_len(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class ClientShard:
    client_id: int
    train: tuple[UnlabeledSegment, ...]
    val: tuple[Segment, ...] = ()
    test: tuple[Segment, ...] = ()

    def __post_init__(self):
        if any(not isinstance(s, UnlabeledSegment) for s in self.train):
            raise TypeError("ClientShard.train accepts UnlabeledSegment only")


def stack(segments: Sequence[Segment | UnlabeledSegment]) -> np.ndarray:
    """Stack windows into an (n, channels, seg_len) array."""
    if not segments:
        raise DataError("no segments to stack")
    return np.stack([s.values for s in segments]).astype(np.float64, copy=False)


def labels_of(segments: Sequence[Segment]) -> np.ndarray:
    if any(s.label is None for s in segments):
        raise DataError("segment without label")
    return np.array([s.label for s in segments], dtype=int)


# ---------------------------------------------------------------------------
# ingestion and windowing


def load_csv(path: str | Path, label_column: str | None = None) -> SeriesTable:
    """Read a header-first CSV with one row per timestep."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if label_column is not None and label_column not in header:
            raise DataError(f"{path}: label column {label_column!r} not in header")
        label_idx = header.index(label_column) if label_column is not None else None
        rows, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(
                    f"{path}: row {lineno} has {len(row)} columns, expected {len(header)}")
            parsed = []
            for col, cell in zip(header, row):
                try:
                    parsed.append(float(cell))
                except ValueError:
                    raise DataError(
                        f"{path}: row {lineno}, column {col!r}: cannot parse {cell!r}") from None
            if label_idx is not None:
                lab = parsed.pop(label_idx)
                if lab not in (0.0, 1.0):
                    raise DataError(f"{path}: row {lineno}: label must be 0 or 1, got {lab}")
                labels.append(int(lab))
            rows.append(parsed)
    if not rows:
        raise DataError(f"{path}: no data rows")
    columns = tuple(h for i, h in enumerate(header) if i != label_idx)
    point_labels = np.array(labels, dtype=int) if label_idx is not None else None
    return SeriesTable(np.array(rows, dtype=np.float64), point_labels, columns)


def make_windows(table: SeriesTable, seg_len: int, stride: int = 1,
                 source: str = "") -> list[Segment]:
    if stride < 1:
        raise DataError("stride must be >= 1")
    if seg_len < 1 or seg_len > table.timesteps:
        raise DataError(f"seg_len {seg_len} must lie in [1, {table.timesteps}]")
    out = []
    for start in range(0, table.timesteps - seg_len + 1, stride):
        window = table.values[start:start + seg_len].T.copy()
        label = None
        if table.point_labels is not None:
            label = ANOMALY if table.point_labels[start:start + seg_len].any() else NORMAL
        out.append(Segment(window, label, (source, start)))
    return out


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    scaled: np.ndarray  # bool per channel


def normalize_fit_apply(train: Sequence, *others: Sequence):
    """Per-channel z-score fitted on ``train`` and applied to every list.

    Channels with std < 1e-12 are only centred.  Returns
    ``(train_normed, [others_normed...], stats)``.
    """
    if not train:
        raise DataError("train must be non-empty")
    x = stack(train)
    mu = x.mean(axis=(0, 2))
    sd = x.std(axis=(0, 2))
    scaled = sd >= 1e-12
    div = np.where(scaled, sd, 1.0)
    stats = NormStats(mu, sd, scaled)

    def apply(segs):
        return [replace(s, values=(s.values - mu[:, None]) / div[:, None]) for s in segs]

    return apply(train), [apply(o) for o in others], stats


# ---------------------------------------------------------------------------
# partitioning


def _chunk_sizes(n: int, parts: int) -> list[int]:
    base, extra = divmod(n, parts)
    return [base + (1 if i < extra else 0) for i in range(parts)]


def partition_sequential(segments: Sequence[Segment], L: int) -> list[ClientShard]:
    """Contiguous, near-equal chunks; ``segments`` are taken to be in temporal order."""
    if L < 1:
        raise DataError("L must be >= 1")
    if L > len(segments):
        raise DataError(f"cannot split {len(segments)} segments across {L} clients")
    ordered = list(segments)
    shards, pos = [], 0
    for cid, size in enumerate(_chunk_sizes(len(ordered), L)):
        chunk = ordered[pos:pos + size]
        pos += size
        shards.append(ClientShard(cid, tuple(_strip(s) for s in chunk)))
    return shards


def assign_modes(modes: Sequence[int], L: int, modes_per_client: int,
                 seed: int) -> list[tuple[int, ...]]:
    """Seeded mode subset per client, cycling through a random permutation."""
    modes = sorted(set(modes))
    if modes_per_client < 1 or modes_per_client > len(modes):
        raise DataError(
            f"modes_per_client={modes_per_client} exceeds the {len(modes)} available modes")
    perm = np.random.default_rng(seed).permutation(modes)
    return [tuple(sorted(int(perm[(c * modes_per_client + i) % len(modes)])
                         for i in range(modes_per_client))) for c in range(L)]


def partition_by_mode(segments: Sequence[Segment], L: int, modes_per_client: int,
                      seed: int) -> list[ClientShard]:
    """Give every client only a seeded subset of the normal modes.

    Normal segments of a mode are dealt round-robin to the clients owning it.
    Anomalous (contaminating) segments are dealt round-robin to all clients.
    Segments of modes owned by no client are dropped.
    """
    if L < 1:
        raise DataError("L must be >= 1")
    if any(s.mode is None for s in segments):
        raise DataError("partition_by_mode needs mode-tagged segments")
    normal_modes = [s.mode for s in segments if s.mode != ANOMALY_MODE]
    owners = assign_modes(normal_modes, L, modes_per_client, seed)
    buckets: list[list[Segment]] = [[] for _ in range(L)]
    dealt: dict[int, int] = {}
    anomalies = 0
    for s in segments:
        if s.mode == ANOMALY_MODE:
            buckets[anomalies % L].append(s)
            anomalies += 1
            continue
        holders = [c for c in range(L) if s.mode in owners[c]]
        if not holders:
            continue
        k = dealt.get(s.mode, 0)
        buckets[holders[k % len(holders)]].append(s)
        dealt[s.mode] = k + 1
    return [ClientShard(c, tuple(_strip(s) for s in b)) for c, b in enumerate(buckets)]


def _strip(s) -> UnlabeledSegment:
    return s if isinstance(s, UnlabeledSegment) else s.unlabeled()


# ---------------------------------------------------------------------------
# synthetic multi-mode generator


@dataclass(frozen=True)
class SyntheticSpec:
    modes: int = 4
    channels: int = 3
    seg_len: int = 16
    n_per_mode: int = 100
    anomaly_fraction: float = 0.0
    noise_sigma: float = 0.05
    phase_jitter: float = 0.0  # window start offset drawn from U[0, phase_jitter) of the window


def _mode_wave(k: int, modes: int, channels: int, seg_len: int, shift: float) -> np.ndarray:
    t = np.arange(seg_len) / seg_len + shift
    out = np.empty((channels, seg_len))
    for c in range(channels):
        freq = 1 + (k + c) % max(modes, 2)
        phase = 2 * np.pi * (k / modes) + c * np.pi / (2 * channels)
        out[c] = np.sin(2 * np.pi * freq * t + phase)
    return out


def normal_templates(modes: int, channels: int, seg_len: int) -> np.ndarray:
    """Seed-independent mode templates so separate draws share their modes."""
    return np.stack([_mode_wave(k, modes, channels, seg_len, 0.0) for k in range(modes)])


def _anomaly_template(channels: int, seg_len: int, rng: np.random.Generator,
                      normal_freqs: int) -> np.ndarray:
    # reserved family: square waves and amplified sines above the normal frequency band
    t = np.arange(seg_len) / seg_len
    out = np.empty((channels, seg_len))
    kind = rng.integers(2)
    for c in range(channels):
        freq = normal_freqs + 1 + rng.integers(0, 3)
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.sin(2 * np.pi * freq * t + phase)
        out[c] = np.sign(wave) if kind == 0 else wave * rng.uniform(1.5, 2.5)
    return out


def synth_multimode(spec: SyntheticSpec, seed: int) -> tuple[list[Segment], np.ndarray]:
    """Mode-tagged labelled segments: smooth per-mode templates plus noise.

    Returns ``(segments, mode_tags)`` where anomalies carry tag -1; ``anomaly_fraction``
    is the share of anomalies among all returned segments.
    """
    if spec.modes < 1:
        raise DataError("need at least one mode")
    if not 0 <= spec.anomaly_fraction < 0.5:
        raise DataError("anomaly_fraction must lie in [0, 0.5)")
    rng = np.random.default_rng(seed)
    shape = (spec.channels, spec.seg_len)
    segs: list[Segment] = []
    for k in range(spec.modes):
        for i in range(spec.n_per_mode):
            shift = rng.uniform(0.0, spec.phase_jitter) if spec.phase_jitter else 0.0
            wave = _mode_wave(k, spec.modes, spec.channels, spec.seg_len, shift)
            noise = spec.noise_sigma * rng.standard_normal(shape)
            segs.append(Segment(wave + noise, NORMAL, (f"mode{k}", i), k))
    n_normal = len(segs)
    n_anom = int(round(spec.anomaly_fraction * n_normal / (1.0 - spec.anomaly_fraction)))
    for i in range(n_anom):
        base = _anomaly_template(spec.channels, spec.seg_len, rng, max(spec.modes, 2))
        noise = spec.noise_sigma * rng.standard_normal(shape)
        segs.append(Segment(base + noise, ANOMALY, ("anomaly", i), ANOMALY_MODE))
    order = rng.permutation(len(segs))
    segs = [segs[i] for i in order]
    return segs, np.array([s.mode for s in segs], dtype=int)
