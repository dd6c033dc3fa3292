"""Raw sensor-text ingestion, windowing, normalization, splitting, synthesis.

The raw format is line-oriented: comma-separated fields terminated by a
semicolon, one reading per line. A line survives ingestion only if it ends
with ';' (after trailing whitespace) and splits into exactly the schema's
field count, with every mapped field parseable; everything else is counted
and skipped.

Windows are cut per user over timestamp-sorted readings at a fixed stride
and kept only when all steps agree on the label. Normalization statistics
come from the training partition alone. Splitting happens after windowing,
so overlapping windows from one user can straddle the two partitions; a
by-user split mode avoids that but is not the default.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

DEFAULT_LABELS = ("Downstairs", "Jogging", "Sitting", "Standing", "Upstairs", "Walking")


class ParseError(IOError):
    """The raw stream could not be read at all."""


class EmptyDatasetError(ValueError):
    """No usable records or windows survived."""


class DegenerateDataError(ValueError):
    """An axis has zero variance; z-scores are undefined."""


class StratifyError(ValueError):
    """A class is too small to split."""


class DatasetFormatError(ValueError):
    """Malformed dataset container file."""


@dataclass(frozen=True)
class RawSchema:
    """Field count plus the positions of the six columns we consume."""

    field_count: int = 6
    user_field: int = 0
    activity_field: int = 1
    timestamp_field: int = 2
    x_field: int = 3
    y_field: int = 4
    z_field: int = 5

    @classmethod
    def with_field_count(cls, n):
        if n < 6:
            raise ValueError(f"schema needs at least 6 fields, got {n}")
        return cls(field_count=n)


class RawRecord(NamedTuple):
    user_id: int
    activity: str
    timestamp: int
    ax: float
    ay: float
    az: float


def parse_raw(lines, schema: RawSchema = RawSchema()):
    """Parse an iterable of text lines; returns (records, rejected_count)."""
    records = []
    rejected = 0
    n = schema.field_count
    for line in lines:
        line = line.rstrip()
        if not line.endswith(";"):
            rejected += 1
            continue
        fields = line[:-1].split(",")
        if len(fields) != n:
            rejected += 1
            continue
        try:
            activity = fields[schema.activity_field].strip()
            if not activity:
                raise ValueError("empty activity")
            rec = RawRecord(
                user_id=int(fields[schema.user_field]),
                activity=activity,
                timestamp=int(fields[schema.timestamp_field]),
                ax=float(fields[schema.x_field]),
                ay=float(fields[schema.y_field]),
                az=float(fields[schema.z_field]),
            )
        except ValueError:
            rejected += 1
            continue
        records.append(rec)
    if not records:
        raise EmptyDatasetError(f"no parseable records ({rejected} lines rejected)")
    return records, rejected


def format_record(rec: RawRecord) -> str:
    """Inverse of the 6-field parse; parse(format(r)) round-trips."""
    return f"{rec.user_id},{rec.activity},{rec.timestamp},{rec.ax},{rec.ay},{rec.az};"


class LabelMap:
    """Bijection between label strings and ids, in lexicographic order."""

    def __init__(self, labels):
        self.labels = sorted(set(labels))
        self._ids = {s: i for i, s in enumerate(self.labels)}

    def id(self, label):
        return self._ids[label]

    def label(self, idx):
        return self.labels[idx]

    def __len__(self):
        return len(self.labels)

    def __eq__(self, other):
        return isinstance(other, LabelMap) and self.labels == other.labels


def encode_labels(records) -> LabelMap:
    if not records:
        raise EmptyDatasetError("no records to encode labels from")
    return LabelMap(r.activity for r in records)


def filter_labels(records, whitelist):
    """Keep records whose activity is in the whitelist (no-op when empty)."""
    if not whitelist:
        return list(records)
    keep = set(whitelist)
    return [r for r in records if r.activity in keep]


@dataclass
class WindowedSample:
    x: np.ndarray  # (T, 3) float32
    label: int
    user_id: int
    start_index: int


def make_windows(records, label_map: LabelMap, window_len=200, stride=100,
                 gap_tolerance=0):
    """Cut fixed-length single-label windows per user.

    Offsets run 0, stride, 2*stride, ... within each user's timestamp-sorted
    stream; a window is dropped when any step disagrees on the label (or,
    with gap_tolerance > 0, when consecutive timestamps are further apart
    than the tolerance). Output is sorted by (user_id, start_index).
    """
    by_user = {}
    for r in records:
        by_user.setdefault(r.user_id, []).append(r)
    samples = []
    for user_id in sorted(by_user):
        recs = sorted(by_user[user_id], key=lambda r: r.timestamp)
        n = len(recs)
        if n < window_len:
            continue
        xyz = np.array([(r.ax, r.ay, r.az) for r in recs], dtype=np.float32)
        labels = [r.activity for r in recs]
        ts = [r.timestamp for r in recs]
        for start in range(0, n - window_len + 1, stride):
            end = start + window_len
            first = labels[start]
            if any(labels[i] != first for i in range(start + 1, end)):
                continue
            if gap_tolerance > 0 and any(
                    ts[i + 1] - ts[i] > gap_tolerance for i in range(start, end - 1)):
                continue
            samples.append(WindowedSample(x=xyz[start:end].copy(),
                                          label=label_map.id(first),
                                          user_id=user_id, start_index=start))
    return samples


@dataclass
class NormStats:
    mu: np.ndarray     # (3,) float64
    sigma: np.ndarray  # (3,) float64


def compute_norm_stats(samples) -> NormStats:
    """Per-axis mean and population std pooled over all training time steps."""
    if not samples:
        raise EmptyDatasetError("cannot compute normalization stats on empty set")
    pool = np.concatenate([s.x for s in samples], axis=0).astype(np.float64)
    mu = pool.mean(axis=0)
    sigma = pool.std(axis=0)  # population (1/N)
    for axis in range(sigma.size):
        if sigma[axis] <= 0:
            raise DegenerateDataError(f"axis {axis} has zero variance")
    return NormStats(mu=mu, sigma=sigma)


def apply_normalization(sample: WindowedSample, stats: NormStats) -> WindowedSample:
    x = ((sample.x.astype(np.float64) - stats.mu) / stats.sigma).astype(np.float32)
    return WindowedSample(x=x, label=sample.label, user_id=sample.user_id,
                          start_index=sample.start_index)


@dataclass
class SplitIndices:
    train: np.ndarray
    val: np.ndarray
    seed: int


def _train_count(n, fraction):
    # ceil with a guard against float ceil overshoot (0.8*50 -> 40, not 41)
    return int(math.ceil(fraction * n - 1e-9))


def stratified_split(labels, train_fraction=0.8, seed=0) -> SplitIndices:
    """Per-class seeded shuffle; first ceil(fraction * n_c) of each go to train."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    train, val = [], []
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        if idx.size < 2:
            raise StratifyError(f"class {cls} has {idx.size} sample(s); need >= 2")
        idx = rng.permutation(idx)
        k = _train_count(idx.size, train_fraction)
        train.append(idx[:k])
        val.append(idx[k:])
    train = np.sort(np.concatenate(train))
    val = np.sort(np.concatenate(val)) if any(v.size for v in val) else np.empty(0, dtype=np.int64)
    return SplitIndices(train=train.astype(np.int64), val=val.astype(np.int64),
                        seed=seed)


def split_by_user(samples, train_fraction=0.8, seed=0) -> SplitIndices:
    """Whole users go to one side; approximates the fraction by window count."""
    users = np.array([s.user_id for s in samples])
    uniq = np.unique(users)
    if uniq.size < 2:
        raise StratifyError("by-user split needs at least 2 users")
    order = np.random.default_rng(seed).permutation(uniq)
    target = train_fraction * len(samples)
    train_users, got = set(), 0
    for u in order:
        if got >= target and len(train_users) < uniq.size:
            break
        train_users.add(int(u))
        got += int((users == u).sum())
    mask = np.isin(users, sorted(train_users))
    return SplitIndices(train=np.flatnonzero(mask).astype(np.int64),
                        val=np.flatnonzero(~mask).astype(np.int64), seed=seed)


# --- synthetic data ----------------------------------------------------------

@dataclass(frozen=True)
class ClassSpec:
    """One synthetic class: per-axis offset and oscillation amplitude, plus
    a noise level. Offsets separate the class means, amplitudes separate the
    per-axis variances, so classes stay distinguishable under any permutation
    of the time steps."""

    offset: tuple
    amplitude: tuple
    noise: float
    cycles: float = 3.0


def default_class_specs(num_classes):
    """A deterministic, well-separated palette of class definitions."""
    specs = []
    for k in range(num_classes):
        angle = 2.0 * np.pi * k / num_classes
        offset = (4.0 * np.cos(angle), 4.0 * np.sin(angle), 2.0 * ((k % 3) - 1))
        amplitude = tuple(0.6 + 0.2 * ((k + a) % 3) for a in range(3))
        specs.append(ClassSpec(offset=offset, amplitude=amplitude,
                               noise=0.1 + 0.05 * (k % 2), cycles=2.0 + k))
    return specs


def synthesize_windows(specs, per_class, window_len, seed):
    """Seeded synthetic windowed samples; returns (samples, label_map).

    Values are hard-bounded to +-16 regardless of the noise draw.
    """
    if len(specs) < 2:
        raise ValueError("need at least 2 classes")
    rng = np.random.default_rng(seed)
    names = [f"class{k:02d}" for k in range(len(specs))]
    label_map = LabelMap(names)
    t = np.arange(window_len, dtype=np.float64)
    samples = []
    for k, spec in enumerate(specs):
        for i in range(per_class):
            phase = rng.uniform(0, 2 * np.pi, size=3)
            x = np.empty((window_len, 3), dtype=np.float64)
            for a in range(3):
                x[:, a] = (spec.offset[a]
                           + spec.amplitude[a]
                           * np.sin(2 * np.pi * spec.cycles * t / window_len + phase[a])
                           + rng.normal(0.0, spec.noise, size=window_len))
            x = np.clip(x, -16.0, 16.0)
            samples.append(WindowedSample(x=x.astype(np.float32),
                                          label=label_map.id(names[k]),
                                          user_id=k, start_index=i * window_len))
    return samples, label_map


# --- assembled dataset --------------------------------------------------------

@dataclass
class WindowDataset:
    """Normalized windows as arrays, with the split and fitted stats attached."""

    x: np.ndarray        # (N, T, C) float32, normalized
    y: np.ndarray        # (N,) int64
    users: np.ndarray    # (N,) int64
    starts: np.ndarray   # (N,) int64
    label_map: LabelMap
    stats: NormStats
    split: SplitIndices

    @property
    def num_classes(self):
        return len(self.label_map)

    @property
    def window_len(self):
        return self.x.shape[1]

    @property
    def channels(self):
        return self.x.shape[2]

    def train_arrays(self):
        return self.x[self.split.train], self.y[self.split.train]

    def val_arrays(self):
        return self.x[self.split.val], self.y[self.split.val]


def build_dataset(samples, label_map, train_fraction=0.8, seed=0,
                  by_user=False) -> WindowDataset:
    """Split, fit normalization on the training part, normalize everything."""
    if not samples:
        raise EmptyDatasetError("no windows to build a dataset from")
    labels = [s.label for s in samples]
    if by_user:
        split = split_by_user(samples, train_fraction, seed)
    else:
        split = stratified_split(labels, train_fraction, seed)
    stats = compute_norm_stats([samples[i] for i in split.train])
    x = np.stack([s.x for s in samples]).astype(np.float64)
    x = ((x - stats.mu) / stats.sigma).astype(np.float32)
    return WindowDataset(
        x=x,
        y=np.array(labels, dtype=np.int64),
        users=np.array([s.user_id for s in samples], dtype=np.int64),
        starts=np.array([s.start_index for s in samples], dtype=np.int64),
        label_map=label_map, stats=stats, split=split)


# --- container file -----------------------------------------------------------
#
# Layout: magic "SETD", u32 version, u64 header length, JSON header, then one
# fixed-size record per sample: <q label, <q user, <q start, T*C little-endian
# float32 values. Round-trips bit-exactly.

_DATA_MAGIC = b"SETD"
_DATA_VERSION = 1


def save_dataset(path, ds: WindowDataset, schema_fields=6):
    n, t, c = ds.x.shape
    header = json.dumps({
        "window_len": t, "channels": c, "num_classes": ds.num_classes,
        "count": n, "labels": ds.label_map.labels,
        "norm_mu": list(ds.stats.mu), "norm_sigma": list(ds.stats.sigma),
        "schema_fields": schema_fields, "seed": ds.split.seed,
        "train_indices": ds.split.train.tolist(),
        "val_indices": ds.split.val.tolist(),
    }, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_DATA_MAGIC)
        fh.write(struct.pack("<IQ", _DATA_VERSION, len(header)))
        fh.write(header)
        for i in range(n):
            fh.write(struct.pack("<qqq", int(ds.y[i]), int(ds.users[i]),
                                 int(ds.starts[i])))
            fh.write(ds.x[i].astype("<f4", copy=False).tobytes())


def load_dataset(path) -> WindowDataset:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _DATA_MAGIC:
            raise DatasetFormatError(f"{path}: not a dataset container (magic {magic!r})")
        version, hlen = struct.unpack("<IQ", fh.read(12))
        if version != _DATA_VERSION:
            raise DatasetFormatError(f"{path}: unsupported container version {version}")
        h = json.loads(fh.read(hlen))
        n, t, c = h["count"], h["window_len"], h["channels"]
        rec_bytes = 24 + t * c * 4
        y = np.empty(n, dtype=np.int64)
        users = np.empty(n, dtype=np.int64)
        starts = np.empty(n, dtype=np.int64)
        x = np.empty((n, t, c), dtype=np.float32)
        for i in range(n):
            rec = fh.read(rec_bytes)
            if len(rec) != rec_bytes:
                raise DatasetFormatError(f"{path}: truncated at record {i}")
            y[i], users[i], starts[i] = struct.unpack("<qqq", rec[:24])
            x[i] = np.frombuffer(rec[24:], dtype="<f4").reshape(t, c)
    label_map = LabelMap(h["labels"])
    if label_map.labels != h["labels"]:
        raise DatasetFormatError(f"{path}: label list is not in lexicographic order")
    if len(label_map) != h["num_classes"]:
        raise DatasetFormatError(f"{path}: class count mismatch")
    stats = NormStats(mu=np.array(h["norm_mu"]), sigma=np.array(h["norm_sigma"]))
    split = SplitIndices(train=np.array(h["train_indices"], dtype=np.int64),
                         val=np.array(h["val_indices"], dtype=np.int64),
                         seed=h["seed"])
    return WindowDataset(x=x, y=y, users=users, starts=starts,
                         label_map=label_map, stats=stats, split=split)
