"""Event recordings, spatio-temporal binning, file formats, and a synthetic task."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, ParseError, ValidationError


@dataclass
class EventRecording:
    """Sorted (time, neuron) events of one sample."""

    times: np.ndarray  # float64 seconds
    neurons: np.ndarray  # uint32 channel indices
    duration: float
    label: int
    n_neurons: int

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64).reshape(-1)
        self.neurons = np.asarray(self.neurons, dtype=np.int64).reshape(-1)
        if self.times.shape != self.neurons.shape:
            raise ValidationError("times and neurons must have equal length")
        if self.times.size:
            if self.times.min() < 0 or self.times.max() > self.duration:
                raise ValidationError(f"event times must lie in [0, {self.duration}]")
            if self.neurons.min() < 0 or self.neurons.max() >= self.n_neurons:
                raise ValidationError(f"neuron index out of range [0, {self.n_neurons})")
            if np.any(np.diff(self.times) < 0):
                order = np.argsort(self.times, kind="stable")
                self.times, self.neurons = self.times[order], self.neurons[order]

    @property
    def n_events(self) -> int:
        return int(self.times.size)

    def to_record(self) -> dict:
        return {
            "label": int(self.label),
            "duration": float(self.duration),
            "n_neurons": int(self.n_neurons),
            "events": [[float(t), int(n)] for t, n in zip(self.times, self.neurons)],
        }

    @classmethod
    def from_record(cls, rec: dict) -> "EventRecording":
        ev = rec.get("events", [])
        arr = np.asarray(ev, dtype=np.float64).reshape(-1, 2) if len(ev) else np.zeros((0, 2))
        if np.any(arr[:, 1] != np.floor(arr[:, 1])):
            raise ValidationError("neuron indices must be integers")
        return cls(arr[:, 0], arr[:, 1].astype(np.int64), float(rec["duration"]),
                   int(rec["label"]), int(rec["n_neurons"]))


@dataclass
class DenseSample:
    tensor: np.ndarray  # (T, N) float32
    label: int

    @property
    def t_steps(self) -> int:
        return int(self.tensor.shape[0])


@dataclass
class CurriculumSchedule:
    """Time-step counts ordered from the easiest curriculum to the hardest."""

    t_steps: list[int]
    allow_single: bool = field(default=False, repr=False)

    def __post_init__(self):
        self.t_steps = [int(t) for t in self.t_steps]
        if len(self.t_steps) < (1 if self.allow_single else 2):
            raise ConfigurationError("a curriculum needs at least two time-step levels")
        if any(t < 1 for t in self.t_steps):
            raise ConfigurationError("time steps must be positive")
        if any(b >= a for a, b in zip(self.t_steps, self.t_steps[1:])):
            raise ConfigurationError(f"curriculum must be strictly decreasing, got {self.t_steps}")

    @classmethod
    def parse(cls, text: str, allow_single: bool = False) -> "CurriculumSchedule":
        try:
            steps = [int(s) for s in text.split(",") if s.strip()]
        except ValueError as exc:
            raise ConfigurationError(f"cannot parse schedule {text!r}") from exc
        return cls(steps, allow_single=allow_single)

    def __iter__(self):
        return iter(self.t_steps)

    def __len__(self):
        return len(self.t_steps)


# -- binning -----------------------------------------------------------------

def spatial_bin(rec: EventRecording, factor: int) -> EventRecording:
    """Merge every ``factor`` adjacent channels; a final partial bin is kept."""
    if factor < 1:
        raise ConfigurationError(f"spatial bin factor must be >= 1, got {factor}")
    return EventRecording(rec.times.copy(), rec.neurons // factor, rec.duration, rec.label,
                          math.ceil(rec.n_neurons / factor))


def temporal_bin(rec: EventRecording, t_steps: int, max_duration: float | None = None) -> DenseSample:
    """Count events per (Δt bin, channel) with Δt = max_duration / t_steps.

    Bins past the recording's own duration receive no events (zero right-padding).
    """
    if t_steps < 1:
        raise ConfigurationError(f"t_steps must be >= 1, got {t_steps}")
    max_duration = rec.duration if max_duration is None else float(max_duration)
    if max_duration < rec.duration:
        raise ConfigurationError(f"max_duration {max_duration} shorter than recording {rec.duration}")
    out = np.zeros((t_steps, rec.n_neurons), dtype=np.float32)
    if rec.n_events:
        idx = np.searchsorted(bin_edges(t_steps, max_duration), rec.times, side="right") - 1
        # an event exactly at max_duration belongs to the last bin
        np.clip(idx, 0, t_steps - 1, out=idx)
        np.add.at(out, (idx, rec.neurons), 1.0)
    return DenseSample(out, rec.label)


def bin_edges(t_steps: int, max_duration: float) -> np.ndarray:
    """Left edges k * Δt, k = 0..T.

    Formed as ``D * (k / T)`` so that resolutions sharing a divisor produce
    bit-identical common edges (k/T is a correctly rounded rational).
    """
    return max_duration * (np.arange(t_steps + 1, dtype=np.float64) / t_steps)


def block_sum(x: np.ndarray, factor: int) -> np.ndarray:
    """Sum consecutive groups of ``factor`` rows (time axis 0)."""
    T = x.shape[0]
    if factor < 1 or T % factor:
        raise ConfigurationError(f"factor {factor} does not divide T={T}")
    return x.reshape(T // factor, factor, *x.shape[1:]).sum(axis=1)


def rebin(sample_or_rec, from_t: int, to_t: int, max_duration: float | None = None) -> DenseSample:
    """Re-express a sample at ``to_t`` steps.

    From a recording this re-runs :func:`temporal_bin` (the canonical path).
    From a dense sample it block-sums, which requires ``to_t`` to divide ``from_t``.
    """
    if isinstance(sample_or_rec, EventRecording):
        return temporal_bin(sample_or_rec, to_t, max_duration)
    sample = sample_or_rec
    if sample.t_steps != from_t:
        raise ConfigurationError(f"sample has T={sample.t_steps}, expected {from_t}")
    if to_t == from_t:
        return DenseSample(sample.tensor.copy(), sample.label)
    if from_t % to_t:
        raise ConfigurationError(
            f"dense rebinning needs to_t dividing from_t ({from_t} -> {to_t}); rebin from events instead")
    return DenseSample(block_sum(sample.tensor, from_t // to_t), sample.label)


@dataclass
class EventDataset:
    recordings: list[EventRecording]
    n_classes: int
    n_neurons: int
    max_duration: float
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.recordings)

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.recordings], dtype=np.int64)

    def dense(self, t_steps: int) -> "DenseDataset":
        if len(self.recordings) == 0:
            return DenseDataset(np.zeros((0, t_steps, self.n_neurons), np.float32),
                                np.zeros(0, np.int64), self.n_classes)
        x = np.stack([temporal_bin(r, t_steps, self.max_duration).tensor for r in self.recordings])
        return DenseDataset(x, self.labels, self.n_classes)

    def subset(self, idx: Sequence[int]) -> "EventDataset":
        return EventDataset([self.recordings[i] for i in idx], self.n_classes, self.n_neurons,
                            self.max_duration, dict(self.meta))


@dataclass
class DenseDataset:
    x: np.ndarray  # (S, T, N) float32
    y: np.ndarray  # (S,) int64
    n_classes: int

    def __len__(self) -> int:
        return int(self.x.shape[0])

    @property
    def t_steps(self) -> int:
        return int(self.x.shape[1])


# -- event JSONL ---------------------------------------------------------------

def save_events(path, dataset: EventDataset) -> None:
    """JSON Lines, one record per sample; metadata goes to ``<path>.meta.json``."""
    path = Path(path)
    with open(path, "w", encoding="utf-8") as f:
        for rec in dataset.recordings:
            f.write(json.dumps(rec.to_record(), separators=(",", ":")) + "\n")
    meta = dict(dataset.meta)
    meta.update(n_classes=dataset.n_classes, n_neurons=dataset.n_neurons,
                max_duration=dataset.max_duration, n_samples=len(dataset))
    meta_path(path).write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")


def meta_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta.json")


def load_events(path, n_classes: int | None = None) -> EventDataset:
    path = Path(path)
    meta = {}
    if meta_path(path).exists():
        meta = json.loads(meta_path(path).read_text())
    if n_classes is None:
        n_classes = meta.get("n_classes")
    recs: list[EventRecording] = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
                rec = EventRecording.from_record(raw)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                if isinstance(exc, ValidationError):
                    raise ValidationError(f"{path}:{lineno}: {exc}") from exc
                raise ParseError(f"{path}:{lineno}: malformed record: {exc}") from exc
            if n_classes is not None and not 0 <= rec.label < n_classes:
                raise ValidationError(f"{path}:{lineno}: label {rec.label} outside [0, {n_classes})")
            recs.append(rec)
    n_neurons = meta.get("n_neurons", max((r.n_neurons for r in recs), default=0))
    max_duration = meta.get("max_duration", max((r.duration for r in recs), default=0.0))
    if n_classes is None:
        n_classes = int(max((r.label for r in recs), default=-1)) + 1
    return EventDataset(recs, int(n_classes), int(n_neurons), float(max_duration), meta)


# -- dense binary ----------------------------------------------------------------

DENSE_MAGIC = b"SDNS"
DENSE_VERSION = 1


def save_dense(path, dataset: DenseDataset) -> None:
    S, T, N = dataset.x.shape
    with open(path, "wb") as f:
        f.write(DENSE_MAGIC)
        f.write(struct.pack("<IIII", DENSE_VERSION, S, T, N))
        for i in range(S):
            f.write(struct.pack("<I", int(dataset.y[i])))
            f.write(np.ascontiguousarray(dataset.x[i], dtype="<f4").tobytes())


def load_dense(path, n_classes: int | None = None) -> DenseDataset:
    raw = Path(path).read_bytes()
    if len(raw) == 0:
        return DenseDataset(np.zeros((0, 0, 0), np.float32), np.zeros(0, np.int64), n_classes or 0)
    if raw[:4] != DENSE_MAGIC:
        raise ParseError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 20:
        raise ParseError(f"{path}: truncated header")
    version, S, T, N = struct.unpack("<IIII", raw[4:20])
    if version != DENSE_VERSION:
        raise ParseError(f"{path}: unsupported version {version}")
    rec = 4 + 4 * T * N
    if len(raw) - 20 != S * rec:
        raise ParseError(f"{path}: payload is {len(raw) - 20} bytes, header declares {S}x{rec}")
    x = np.empty((S, T, N), dtype=np.float32)
    y = np.empty(S, dtype=np.int64)
    for i in range(S):
        off = 20 + i * rec
        (y[i],) = struct.unpack("<I", raw[off:off + 4])
        x[i] = np.frombuffer(raw, dtype="<f4", count=T * N, offset=off + 4).reshape(T, N)
    if n_classes is None:
        n_classes = int(y.max()) + 1 if S else 0
    elif S and y.max() >= n_classes:
        bad = int(np.argmax(y >= n_classes))
        raise ValidationError(f"{path}: sample {bad} label {y[bad]} outside [0, {n_classes})")
    return DenseDataset(x, y, n_classes)


# -- synthetic task --------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    n_classes: int = 4
    n_samples: int = 1000
    n_neurons: int = 140
    duration: float = 1.0
    seed: int = 0
    n_bands: int = 4
    burst_events: float = 30.0
    background_events: float = 40.0
    burst_s: float = 0.05
    slot_s: float = 0.06
    shift_s: float = 0.5
    burst_jitter_s: float = 0.015


def class_templates(spec: SyntheticSpec) -> list[tuple[int, ...]]:
    """Per class, the order in which the channel bands burst.

    Every class fires every band once, so per-channel totals carry no class
    information; only the temporal order of the bursts does.
    """
    rng = np.random.default_rng(10_000 + 31 * spec.n_classes + spec.n_bands)
    perms: list[tuple[int, ...]] = []
    while len(perms) < spec.n_classes:
        p = tuple(int(i) for i in rng.permutation(spec.n_bands))
        if p not in perms:
            perms.append(p)
    return perms


def band_channels(spec: SyntheticSpec, band: int) -> np.ndarray:
    width = spec.n_neurons // spec.n_bands
    return np.arange(band * width, (band + 1) * width)


def gen_synthetic(spec: SyntheticSpec) -> list[EventRecording]:
    """Class-conditional Poisson bursts over channel bands.

    A sample-wide onset shift (uniform over ``shift_s``) moves the whole burst
    sequence, and each burst gets its own Gaussian jitter on top.
    """
    if spec.n_samples == 0:
        return []
    if spec.n_bands > spec.n_neurons:
        raise ConfigurationError("more bands than neurons")
    if math.factorial(spec.n_bands) < spec.n_classes:
        raise ConfigurationError(f"{spec.n_bands} bands cannot encode {spec.n_classes} distinct orders")
    span = (spec.n_bands - 1) * spec.slot_s + spec.burst_s
    if span + spec.shift_s > spec.duration:
        raise ConfigurationError(f"burst sequence ({span + spec.shift_s:.3f}s) exceeds duration")
    rng = np.random.default_rng(spec.seed)
    templates = class_templates(spec)
    labels = np.arange(spec.n_samples) % spec.n_classes
    rng.shuffle(labels)
    margin = (spec.duration - span - spec.shift_s) / 2
    recs = []
    for label in labels:
        times, neurons = [], []
        shift = margin + rng.uniform(0.0, spec.shift_s)
        for k, band in enumerate(templates[label]):
            start = shift + k * spec.slot_s + rng.normal(0.0, spec.burst_jitter_s)
            chans = band_channels(spec, band)
            n = rng.poisson(spec.burst_events)
            times.append(start + rng.uniform(0.0, spec.burst_s, n))
            neurons.append(rng.choice(chans, n))
        nb = rng.poisson(spec.background_events)
        times.append(rng.uniform(0.0, spec.duration, nb))
        neurons.append(rng.integers(0, spec.n_neurons, nb))
        t = np.concatenate(times)
        n = np.concatenate(neurons)
        keep = (t >= 0) & (t <= spec.duration)
        t, n = t[keep], n[keep]
        order = np.argsort(t, kind="stable")
        recs.append(EventRecording(t[order], n[order], spec.duration, int(label), spec.n_neurons))
    return recs


def synthetic_dataset(spec: SyntheticSpec) -> EventDataset:
    meta = {"generator": "band-order", **{k: getattr(spec, k) for k in spec.__dataclass_fields__}}
    return EventDataset(gen_synthetic(spec), spec.n_classes, spec.n_neurons, spec.duration, meta)


def iter_batches(n: int, batch_size: int, rng: np.random.Generator | None = None) -> Iterable[np.ndarray]:
    idx = rng.permutation(n) if rng is not None else np.arange(n)
    for i in range(0, n, batch_size):
        yield idx[i:i + batch_size]
