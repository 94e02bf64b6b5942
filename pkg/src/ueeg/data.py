"""EEG dataset container, windowing, split protocol, normalization and synthetic presets.

Container layout (all integers little-endian)::

    b"EEGC" | version u8 (=1) | 3 reserved zero bytes | manifest length u32
    manifest: canonical JSON (UTF-8, sorted keys, no whitespace)
    records:  N*C*T float32, row-major (N, C, T)
    labels:   N uint32
"""
from __future__ import annotations

import json
import math
import struct
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import (
    BadMagic,
    ContainerShapeMismatch,
    InvalidSpec,
    LabelOutOfRange,
    NonFiniteData,
    SignalTooShort,
    StratificationWarning,
    TooFewSamples,
    VersionUnsupported,
)
from .rng import substream

MAGIC = b"EEGC"
VERSION = 1
_HEADER = struct.Struct("<4sB3sI")
SPLIT_NAMES = ("train", "val", "test")


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


@dataclass
class EEGDataset:
    name: str
    num_classes: int
    records: np.ndarray  # (N, C, T) float32
    labels: np.ndarray  # (N,) uint32
    splits: dict[str, np.ndarray] | None = None

    def __post_init__(self):
        self.records = np.ascontiguousarray(self.records, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.uint32)
        if self.splits is not None:
            self.splits = {k: np.asarray(self.splits[k], dtype=np.int64) for k in SPLIT_NAMES}

    @property
    def channels(self) -> int:
        return self.records.shape[1]

    @property
    def timesteps(self) -> int:
        return self.records.shape[2]

    def __len__(self) -> int:
        return self.records.shape[0]

    def validate(self) -> "EEGDataset":
        if self.records.ndim != 3:
            raise ContainerShapeMismatch(f"records must be (N, C, T), got {self.records.shape}")
        if self.labels.shape != (len(self),):
            raise ContainerShapeMismatch(f"{self.labels.shape[0]} labels for {len(self)} records")
        bad = np.flatnonzero(~np.isfinite(self.records.reshape(-1)))
        if bad.size:
            raise NonFiniteData(f"non-finite value at record element {bad[0]}")
        over = np.flatnonzero(self.labels >= self.num_classes)
        if over.size:
            raise LabelOutOfRange(
                f"label {self.labels[over[0]]} at index {over[0]} is not < {self.num_classes}"
            )
        if self.splits is not None:
            seen = np.zeros(len(self), dtype=bool)
            for k in SPLIT_NAMES:
                idx = self.splits[k]
                if idx.size and (idx.min() < 0 or idx.max() >= len(self)):
                    raise InvalidSpec(f"split {k} has indices outside [0, {len(self)})")
                if seen[idx].any() or np.unique(idx).size != idx.size:
                    raise InvalidSpec("declared splits overlap")
                seen[idx] = True
        return self

    def manifest(self) -> dict:
        m = {
            "name": self.name,
            "num_classes": int(self.num_classes),
            "channels": int(self.channels),
            "timesteps": int(self.timesteps),
            "num_records": len(self),
            "has_declared_splits": self.splits is not None,
        }
        if self.splits is not None:
            m["split_indices"] = {k: [int(i) for i in self.splits[k]] for k in SPLIT_NAMES}
        return m

    def subset(self, idx) -> "EEGDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return EEGDataset(self.name, self.num_classes, self.records[idx], self.labels[idx])


# ---------------------------------------------------------------------------
# container


def to_bytes(ds: EEGDataset) -> bytes:
    ds.validate()
    manifest = canonical_json(ds.manifest())
    return b"".join(
        [
            _HEADER.pack(MAGIC, VERSION, b"\0\0\0", len(manifest)),
            manifest,
            ds.records.astype("<f4", copy=False).tobytes(),
            ds.labels.astype("<u4", copy=False).tobytes(),
        ]
    )


def save_container(ds: EEGDataset, path) -> None:
    Path(path).write_bytes(to_bytes(ds))


def from_bytes(buf: bytes) -> EEGDataset:
    if len(buf) < _HEADER.size:
        raise ContainerShapeMismatch(
            f"header needs {_HEADER.size} bytes, file has {len(buf)} (offset 0)"
        )
    magic, version, _, mlen = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r} at offset 0, expected {MAGIC!r}")
    if version != VERSION:
        raise VersionUnsupported(f"container version {version} at offset 4 is not supported")
    start = _HEADER.size
    if len(buf) < start + mlen:
        raise ContainerShapeMismatch(
            f"manifest needs bytes {start}..{start + mlen}, file has {len(buf)}"
        )
    try:
        m = json.loads(buf[start : start + mlen].decode("utf-8"))
        n, c, t = int(m["num_records"]), int(m["channels"]), int(m["timesteps"])
        k = int(m["num_classes"])
    except (ValueError, KeyError, UnicodeDecodeError) as exc:
        raise InvalidSpec(f"unreadable manifest at offset {start}: {exc}") from None
    rec_off = start + mlen
    lab_off = rec_off + 4 * n * c * t
    expected = lab_off + 4 * n
    if len(buf) != expected:
        raise ContainerShapeMismatch(
            f"expected {expected} bytes for {n} records of ({c}, {t}), got {len(buf)}"
        )
    records = np.frombuffer(buf, dtype="<f4", count=n * c * t, offset=rec_off).reshape(n, c, t)
    labels = np.frombuffer(buf, dtype="<u4", count=n, offset=lab_off)
    bad = np.flatnonzero(~np.isfinite(records.reshape(-1)))
    if bad.size:
        raise NonFiniteData(f"non-finite record value at byte offset {rec_off + 4 * int(bad[0])}")
    over = np.flatnonzero(labels >= k)
    if over.size:
        i = int(over[0])
        raise LabelOutOfRange(
            f"label {labels[i]} at byte offset {lab_off + 4 * i} is not < num_classes={k}"
        )
    splits = None
    if m.get("has_declared_splits"):
        splits = {s: np.asarray(m["split_indices"][s], dtype=np.int64) for s in SPLIT_NAMES}
    return EEGDataset(m["name"], k, records, labels, splits).validate()


def load_container(path) -> EEGDataset:
    return from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# CSV import
#
#   # name: <dataset name>
#   # num_classes: <K>
#   # shape: <C>x<T>
#   v_0,...,v_{C*T-1},label      (one row per record, values row-major over (C, T))


def load_csv(path) -> EEGDataset:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if len(lines) < 3 or not all(l.startswith("#") for l in lines[:3]):
        raise InvalidSpec("CSV import needs a 3-line '#' header (name, num_classes, shape)")
    meta = {}
    for line in lines[:3]:
        key, _, value = line[1:].partition(":")
        meta[key.strip()] = value.strip()
    try:
        k = int(meta["num_classes"])
        c, t = (int(v) for v in meta["shape"].lower().split("x"))
        name = meta["name"]
    except (KeyError, ValueError) as exc:
        raise InvalidSpec(f"bad CSV header: {exc}") from None
    rows = [l for l in lines[3:] if l.strip()]
    data = np.loadtxt(rows, delimiter=",", dtype=np.float64, ndmin=2) if rows else np.zeros((0, c * t + 1))
    if data.shape[1] != c * t + 1:
        raise ContainerShapeMismatch(f"CSV rows need {c * t + 1} columns, got {data.shape[1]}")
    labels = data[:, -1]
    if np.any(labels != np.round(labels)) or np.any(labels < 0):
        raise LabelOutOfRange("CSV labels must be non-negative integers")
    return EEGDataset(name, k, data[:, :-1].reshape(-1, c, t), labels.astype(np.uint32)).validate()


def save_csv(ds: EEGDataset, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# name: {ds.name}\n# num_classes: {ds.num_classes}\n")
        fh.write(f"# shape: {ds.channels}x{ds.timesteps}\n")
        for rec, lab in zip(ds.records, ds.labels):
            fh.write(",".join(repr(float(v)) for v in rec.reshape(-1)) + f",{int(lab)}\n")


# ---------------------------------------------------------------------------
# windowing


def window_starts(length: int, window: int = 32, overlap: int = 8) -> np.ndarray:
    if not 0 <= overlap < window:
        raise InvalidSpec(f"overlap {overlap} must be in [0, {window})")
    if length < window:
        raise SignalTooShort(f"signal of length {length} is shorter than window {window}")
    return np.arange(0, length - window + 1, window - overlap)


def sliding_window(signal: np.ndarray, window: int = 32, overlap: int = 8) -> np.ndarray:
    """Cut a (C, L) signal into (n, C, window) segments; the trailing remainder is dropped."""
    signal = np.asarray(signal)
    if signal.ndim != 2:
        raise ContainerShapeMismatch(f"signal must be (C, L), got {signal.shape}")
    starts = window_starts(signal.shape[1], window, overlap)
    return np.stack([signal[:, s : s + window] for s in starts])


# ---------------------------------------------------------------------------
# splits


@dataclass
class SplitPlan:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    seed: int | None = None
    declared: bool = False

    def as_dict(self) -> dict[str, np.ndarray]:
        return {"train": self.train, "val": self.val, "test": self.test}


def make_split(ds: EEGDataset, seed: int) -> SplitPlan:
    """Declared splits win; otherwise test = 25% of N and val = 25% of the rest (floors)."""
    if ds.splits is not None:
        return SplitPlan(ds.splits["train"], ds.splits["val"], ds.splits["test"], seed, True)
    n = len(ds)
    if n < 4:
        raise TooFewSamples(f"need at least 4 records to split, got {n}")
    n_test = math.floor(0.25 * n)
    n_val = math.floor(0.25 * (n - n_test))
    perm = substream(seed, "split").permutation(n)
    plan = SplitPlan(
        np.sort(perm[n_test + n_val :]),
        np.sort(perm[n_test : n_test + n_val]),
        np.sort(perm[:n_test]),
        seed,
    )
    missing = set(range(ds.num_classes)) - set(np.unique(ds.labels[plan.train]).tolist())
    if missing:
        warnings.warn(f"train split lacks classes {sorted(missing)}", StratificationWarning, stacklevel=2)
    return plan


# ---------------------------------------------------------------------------
# normalization

STD_FLOOR = 1e-8


def channel_stats(records: np.ndarray, idx) -> tuple[np.ndarray, np.ndarray]:
    idx = np.asarray(idx)
    if idx.size == 0:
        raise InvalidSpec("standardization needs a non-empty train split")
    sub = records[idx].astype(np.float64)
    return sub.mean(axis=(0, 2)), np.maximum(sub.std(axis=(0, 2)), STD_FLOOR)


def apply_standardize(records: np.ndarray, mean, std) -> np.ndarray:
    out = (records.astype(np.float64) - np.asarray(mean)[None, :, None]) / np.asarray(std)[None, :, None]
    return out.astype(np.float32)


def standardize(ds: EEGDataset, train_idx) -> EEGDataset:
    """Per-channel z-score with statistics from ``train_idx`` only."""
    mean, std = channel_stats(ds.records, train_idx)
    return replace(ds, records=apply_standardize(ds.records, mean, std))


def minmax_records(records: np.ndarray) -> np.ndarray:
    """Scale every record independently to [0, 1]; constant records become 0."""
    r = records.astype(np.float64)
    lo = r.min(axis=(1, 2), keepdims=True)
    span = r.max(axis=(1, 2), keepdims=True) - lo
    return ((r - lo) / np.maximum(span, STD_FLOOR)).astype(np.float32)


# ---------------------------------------------------------------------------
# synthetic data

DIFFICULTY = {"easy": 2.0, "mid": 6.0, "hard": 10.0}


@dataclass(frozen=True)
class SynthSpec:
    channels: int
    timesteps: int
    num_classes: int
    num_records: int
    seed: int = 0
    difficulty: float | str = "mid"
    name: str = "synthetic"

    @property
    def noise(self) -> float:
        if isinstance(self.difficulty, str):
            try:
                return DIFFICULTY[self.difficulty]
            except KeyError:
                raise InvalidSpec(f"unknown difficulty {self.difficulty!r}") from None
        return float(self.difficulty)


# Channel/timestep geometry of the five benchmark datasets at desk-scale record counts.
PRESETS: dict[str, SynthSpec] = {
    "BMNIST": SynthSpec(4, 408, 11, 440, name="BMNIST"),
    "BMNIST_2": SynthSpec(4, 408, 2, 400, name="BMNIST_2"),
    "SEED": SynthSpec(62, 32, 3, 600, name="SEED"),
    "ERN": SynthSpec(56, 200, 2, 400, name="ERN"),
    "SMR": SynthSpec(22, 500, 4, 400, name="SMR"),
    "ThoughtViz": SynthSpec(14, 32, 10, 1000, name="ThoughtViz"),
    "ThoughtViz-small": SynthSpec(14, 32, 10, 2000, name="ThoughtViz-small"),
}

GEOMETRIES = {k: (v.channels, v.timesteps, v.num_classes) for k, v in PRESETS.items() if k in
              ("BMNIST", "SEED", "ERN", "SMR", "ThoughtViz")}


def preset(name: str, **overrides) -> SynthSpec:
    try:
        spec = PRESETS[name]
    except KeyError:
        raise InvalidSpec(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return replace(spec, **overrides)


def synth_generate(spec: SynthSpec) -> EEGDataset:
    """Class-conditional sums of sinusoids plus Gaussian noise.

    Each class owns three components with its own frequencies and, per channel,
    its own amplitudes and phases. Records add i.i.d. noise with standard
    deviation ``spec.noise`` (0 gives exact class templates). Labels are
    balanced and shuffled.
    """
    c, t, k, n = spec.channels, spec.timesteps, spec.num_classes, spec.num_records
    if min(c, t, k, n) < 1 or k < 2 or spec.noise < 0:
        raise InvalidSpec(f"invalid synthetic spec {spec}")
    trng = substream(spec.seed, "synth-templates")
    n_comp = 3
    fmax = max(2.0, min(t / 4, 12.0))
    freqs = trng.uniform(1.0, fmax, size=(k, n_comp))
    amps = trng.uniform(0.5, 1.5, size=(k, c, n_comp))
    phases = trng.uniform(0, 2 * np.pi, size=(k, c, n_comp))
    tt = np.arange(t) / t
    arg = 2 * np.pi * freqs[:, None, :, None] * tt + phases[..., None]  # (k, c, comp, t)
    templates = (amps[..., None] * np.sin(arg)).sum(axis=2)

    rrng = substream(spec.seed, "synth-records")
    labels = rrng.permutation(np.arange(n) % k)
    records = templates[labels]
    if spec.noise > 0:
        records = records + spec.noise * rrng.standard_normal(records.shape)
    return EEGDataset(spec.name, k, records.astype(np.float32), labels.astype(np.uint32)).validate()


def separable_toy(channels: int = 3, timesteps: int = 16, n: int = 8, seed: int = 0) -> EEGDataset:
    """Tiny two-class set used for overfit checks; every split is the full set."""
    spec = SynthSpec(channels, timesteps, 2, n, seed=seed, difficulty=1.0, name="toy")
    ds = synth_generate(spec)
    idx = np.arange(n)
    ds.splits = {"train": idx, "val": idx, "test": idx}
    return ds
