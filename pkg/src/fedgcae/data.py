"""Sensor streams, windowing, image mapping, synthetic users and partitions."""
from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

ACTIVITIES = ("STD", "WAL", "STU", "STN", "JUM", "JOG", "CSI", "CSO", "SCH", "FALL")
NUM_CLASSES = len(ACTIVITIES)
CSV_COLUMNS = ("user_id", "t", "ax", "ay", "az", "gx", "gy", "gz", "label")
SAMPLE_RATE = 200
WINDOW = 200
IMAGE_SHAPE = (20, 20, 3)


class PoolShortfallError(ValueError):
    """The window pool cannot supply what a partition scheme asks for."""

    def __init__(self, shortfalls: list[tuple[int, str, int, int]]):
        self.shortfalls = shortfalls
        lines = [f"user {u} class {c}: need {need}, have {have}" for u, c, need, have in shortfalls]
        super().__init__("insufficient window pool:\n  " + "\n  ".join(lines))


@dataclass
class SensorStream:
    """Raw 6-axis recording of one user with labelled segments.

    ``records`` is ``(L, 6)``: ax, ay, az, gx, gy, gz.  ``segments`` holds
    ``(start, end, class_index)`` with ``end`` exclusive.
    """

    user_id: int
    records: np.ndarray
    segments: list[tuple[int, int, int]]
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.records = np.asarray(self.records, dtype=np.float64).reshape(-1, 6)
        for start, end, label in self.segments:
            if not (0 <= start <= end <= len(self.records)):
                raise ValueError(f"user {self.user_id}: segment [{start}, {end}) outside stream")
            if not 0 <= label < NUM_CLASSES:
                raise ValueError(f"user {self.user_id}: label {label} not in 0..{NUM_CLASSES - 1}")

    def labels(self) -> np.ndarray:
        out = np.full(len(self.records), -1, dtype=np.int64)
        for start, end, label in self.segments:
            out[start:end] = label
        return out

    def __eq__(self, other):
        if not isinstance(other, SensorStream):
            return NotImplemented
        return (self.user_id == other.user_id and self.sample_rate == other.sample_rate
                and list(map(tuple, self.segments)) == list(map(tuple, other.segments))
                and np.array_equal(self.records, other.records))


# ---------------------------------------------------------------------------
# windows


def window_params(sample_rate: int = SAMPLE_RATE, window_seconds: float = 1.0,
                  overlap: float = 0.8) -> tuple[int, int]:
    """(window length, stride) in records."""
    if not 0.0 <= overlap < 1.0:
        raise ValueError(f"overlap must lie in [0, 1), got {overlap}")
    length = sample_rate * window_seconds
    if abs(length - round(length)) > 1e-9:
        raise ValueError("sample_rate * window_seconds must be a whole number of records")
    length = int(round(length))
    stride = max(1, int(round(length * (1.0 - overlap))))
    return length, stride


def window_offsets(segment_length: int, length: int = WINDOW, stride: int = 40) -> np.ndarray:
    """Start offsets of the windows that fit inside one segment."""
    if segment_length < length:
        return np.zeros(0, dtype=np.int64)
    return np.arange(0, segment_length - length + 1, stride, dtype=np.int64)


def segment_windows(stream: SensorStream, window_seconds: float = 1.0, overlap: float = 0.8):
    """Cut every labelled segment into fixed windows; tails are dropped.

    Returns ``(windows, labels, starts)`` with ``windows`` of shape
    ``(n, length, 6)`` and ``starts`` the absolute record offsets.
    """
    length, stride = window_params(stream.sample_rate, window_seconds, overlap)
    starts, labels = [], []
    for seg_start, seg_end, label in stream.segments:
        offs = window_offsets(seg_end - seg_start, length, stride) + seg_start
        starts.append(offs)
        labels.append(np.full(len(offs), label, dtype=np.int64))
    starts = np.concatenate(starts) if starts else np.zeros(0, dtype=np.int64)
    labels = np.concatenate(labels) if labels else np.zeros(0, dtype=np.int64)
    windows = _take_windows(stream.records, starts, length)
    return windows, labels, starts


def _take_windows(records: np.ndarray, starts: np.ndarray, length: int) -> np.ndarray:
    if len(starts) == 0:
        return np.zeros((0, length, 6))
    idx = np.asarray(starts)[:, None] + np.arange(length)[None, :]
    return records[idx]


# ---------------------------------------------------------------------------
# image mapping


@dataclass(frozen=True)
class NormStats:
    """Per image-channel minimum and maximum (channel j pools axis j of both
    the accelerometer and the gyroscope)."""

    low: tuple[float, float, float]
    high: tuple[float, float, float]

    @classmethod
    def from_records(cls, records) -> "NormStats":
        r = np.asarray(records, dtype=np.float64).reshape(-1, 6)
        both = np.concatenate([r[:, :3], r[:, 3:]])
        return cls(tuple(map(float, both.min(axis=0))), tuple(map(float, both.max(axis=0))))

    def merge(self, other: "NormStats") -> "NormStats":
        return NormStats(tuple(map(min, self.low, other.low)), tuple(map(max, self.high, other.high)))

    def to_dict(self) -> dict:
        return {"low": list(self.low), "high": list(self.high)}

    @classmethod
    def from_dict(cls, d) -> "NormStats":
        return cls(tuple(d["low"]), tuple(d["high"]))


def windows_to_images(windows, stats: NormStats) -> np.ndarray:
    """Map ``(n, 200, 6)`` windows to ``(n, 20, 20, 3)`` images in [0, 1].

    Accelerations fill grid positions 0..199 and angular velocities
    200..399, row-major; channel = sensor axis.
    """
    w = np.asarray(windows, dtype=np.float64)
    if w.ndim != 3 or w.shape[1:] != (WINDOW, 6):
        raise ValueError(f"expected windows of shape (n, {WINDOW}, 6), got {w.shape}")
    low = np.asarray(stats.low, dtype=np.float64)
    high = np.asarray(stats.high, dtype=np.float64)
    if not (np.all(np.isfinite(low)) and np.all(np.isfinite(high))):
        raise ValueError("normalisation statistics must be finite")
    seq = np.concatenate([w[:, :, :3], w[:, :, 3:]], axis=1)  # (n, 400, 3)
    span = high - low
    flat = span <= 0
    safe = np.where(flat, 1.0, span)
    img = np.clip((seq - low) / safe, 0.0, 1.0)
    if np.any(flat):
        warnings.warn(f"degenerate normalisation range on channel(s) {np.flatnonzero(flat).tolist()}; set to 0.5",
                      RuntimeWarning, stacklevel=2)
        img[:, :, flat] = 0.5
    return img.reshape(len(w), *IMAGE_SHAPE)


def window_to_image(window, stats: NormStats) -> np.ndarray:
    return windows_to_images(np.asarray(window)[None], stats)[0]


# ---------------------------------------------------------------------------
# datasets


@dataclass
class ClientDataset:
    """Samples held by one edge client (a user, or a home of users)."""

    client_id: int
    X: np.ndarray
    y: np.ndarray
    user_ids: np.ndarray
    window_ids: np.ndarray
    members: tuple[int, ...] = ()

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.user_ids = np.asarray(self.user_ids, dtype=np.int64)
        self.window_ids = np.asarray(self.window_ids, dtype=np.int64)
        if not (len(self.X) == len(self.y) == len(self.user_ids) == len(self.window_ids)):
            raise ValueError("X, y, user_ids and window_ids must have equal length")
        if not self.members:
            self.members = tuple(sorted(set(self.user_ids.tolist())))

    def __len__(self) -> int:
        return len(self.y)

    @property
    def class_histogram(self) -> np.ndarray:
        return np.bincount(self.y, minlength=NUM_CLASSES)

    def subset(self, mask) -> "ClientDataset":
        return ClientDataset(self.client_id, self.X[mask], self.y[mask], self.user_ids[mask],
                             self.window_ids[mask], self.members)

    @classmethod
    def merge(cls, client_id: int, parts: list["ClientDataset"]) -> "ClientDataset":
        return cls(client_id,
                   np.concatenate([p.X for p in parts]),
                   np.concatenate([p.y for p in parts]),
                   np.concatenate([p.user_ids for p in parts]),
                   np.concatenate([p.window_ids for p in parts]),
                   tuple(sorted(m for p in parts for m in p.members)))


def window_id(user_id: int, start: int) -> int:
    return int(user_id) * 1_000_000_000 + int(start)


# ---------------------------------------------------------------------------
# synthetic streams

# per class: accelerometer offset (m/s^2), list of (freq Hz, acc amp xyz, gyro amp xyz),
# and an optional periodic impulse (period s, acc peak xyz, gyro peak xyz)
_TEMPLATES = {
    "STD": ((0.0, 9.8, 0.4), [(0.3, (0.15, 0.1, 0.15), (0.03, 0.03, 0.02))], None),
    "WAL": ((0.8, 9.6, 1.6), [(1.8, (1.4, 2.6, 1.0), (0.7, 0.35, 0.55)),
                              (3.6, (0.4, 1.0, 0.4), (0.2, 0.1, 0.15))], None),
    "STU": ((0.6, 9.2, 3.0), [(1.4, (1.1, 2.0, 1.7), (0.5, 0.6, 0.9))], None),
    "STN": ((0.9, 9.9, -0.8), [(2.0, (1.7, 3.6, 0.9), (0.9, 0.25, 0.45))], None),
    "JUM": ((0.0, 9.8, 0.0), [(2.3, (0.9, 8.0, 1.3), (0.45, 0.2, 0.3)),
                              (4.6, (0.3, 3.0, 0.4), (0.1, 0.1, 0.1))], None),
    "JOG": ((1.6, 9.6, 2.4), [(2.8, (2.8, 5.5, 2.2), (1.4, 0.9, 1.1))], None),
    "CSI": ((3.2, 8.2, 3.4), [(0.6, (1.8, 1.4, 2.2), (1.3, 0.9, 1.8))],
            (1.0, (2.5, 3.0, 1.0), (0.8, 1.2, 0.5))),
    "CSO": ((-3.0, 8.4, 3.0), [(0.7, (1.9, 1.6, 2.0), (1.6, 0.7, 1.4))],
            (1.0, (-2.0, 3.5, 1.5), (-1.0, 1.0, 0.6))),
    "SCH": ((0.4, 7.2, 6.2), [(0.5, (1.4, 2.4, 1.5), (1.1, 0.3, 0.3))], None),
    "FALL": ((6.0, 3.4, 6.6), [(0.8, (1.0, 1.0, 1.0), (0.6, 0.6, 0.6))],
             (1.0, (14.0, 12.0, 8.0), (3.5, 2.5, 3.0))),
}


@dataclass
class SynthSpec:
    """Knobs of the synthetic activity generator.

    Class templates are fixed; users differ by amplitude, tempo and phase
    scaling, a sensor-orientation rotation, and a per-(user, class) posture
    offset, which makes user data non-IID.
    """

    num_users: int = 30
    train_windows: int = 240
    test_windows: int = 16
    sample_rate: int = SAMPLE_RATE
    acc_noise: float = 0.5
    gyro_noise: float = 0.12
    amplitude_jitter: float = 0.2
    tempo_jitter: float = 0.08
    max_rotation_deg: float = 10.0
    posture_jitter: float = 0.5
    seed: int = 0

    def segment_length(self, window: int = WINDOW, stride: int = 40) -> int:
        # test windows, the windows overlapping them, and the training windows
        guard = math.ceil(window / stride) - 1
        n = self.train_windows + guard + self.test_windows
        return window + (n - 1) * stride


def _rotation(rng, max_deg: float) -> np.ndarray:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = np.deg2rad(rng.uniform(-max_deg, max_deg))
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)


def template_signal(code: str, t: np.ndarray, amp: float = 1.0, tempo: float = 1.0,
                    phase: float = 0.0) -> np.ndarray:
    """Noise-free ``(len(t), 6)`` signal of one activity for a nominal user."""
    offset, waves, impulse = _TEMPLATES[code]
    out = np.zeros((len(t), 6))
    out[:, :3] = offset
    for freq, acc, gyr in waves:
        s = np.sin(2 * np.pi * freq * tempo * t + phase)
        out[:, :3] += amp * np.outer(s, acc)
        out[:, 3:] += amp * np.outer(s, gyr)
    if impulse is not None:
        period, acc, gyr = impulse
        # narrow Gaussian bursts once per period
        ph = ((t * tempo + phase / (2 * np.pi)) % period) - period / 2
        burst = np.exp(-0.5 * (ph / 0.04) ** 2)
        out[:, :3] += amp * np.outer(burst, acc)
        out[:, 3:] += amp * np.outer(burst, gyr)
    return out


def synthesize_streams(spec: SynthSpec | None = None, seed: int | None = None, users=None):
    """Yield one :class:`SensorStream` per user; deterministic in the seed."""
    spec = spec or SynthSpec()
    seed = spec.seed if seed is None else seed
    length, stride = window_params(spec.sample_rate)
    seg_len = spec.segment_length(length, stride)
    users = range(spec.num_users) if users is None else users
    for user in users:
        rng = np.random.default_rng([seed, 7, user])
        amp = 1.0 + rng.uniform(-spec.amplitude_jitter, spec.amplitude_jitter)
        tempo = 1.0 + rng.uniform(-spec.tempo_jitter, spec.tempo_jitter)
        rot = _rotation(rng, spec.max_rotation_deg)
        posture = rng.normal(0.0, spec.posture_jitter, size=(NUM_CLASSES, 3))
        order = rng.permutation(NUM_CLASSES)
        t = np.arange(seg_len) / spec.sample_rate
        chunks, segments = [], []
        pos = 0
        for label in order:
            sig = template_signal(ACTIVITIES[label], t, amp, tempo, rng.uniform(0, 2 * np.pi))
            sig[:, :3] += posture[label]
            sig[:, :3] = sig[:, :3] @ rot.T
            sig[:, 3:] = sig[:, 3:] @ rot.T
            sig[:, :3] += rng.normal(0.0, spec.acc_noise, size=(seg_len, 3))
            sig[:, 3:] += rng.normal(0.0, spec.gyro_noise, size=(seg_len, 3))
            chunks.append(sig)
            segments.append((pos, pos + seg_len, int(label)))
            pos += seg_len
        yield SensorStream(user, np.concatenate(chunks), segments, spec.sample_rate)


def template_separation(spec: SynthSpec | None = None) -> float:
    """Smallest distance between two classes' nominal signatures, in units of
    the accelerometer noise std.  A signature is the per-channel mean and
    standard deviation of the noise-free template over ten seconds."""
    spec = spec or SynthSpec()
    t = np.arange(10 * spec.sample_rate) / spec.sample_rate
    sigs = []
    for code in ACTIVITIES:
        s = template_signal(code, t)
        sigs.append(np.concatenate([s.mean(axis=0), s.std(axis=0)]))
    sigs = np.array(sigs)
    d = np.linalg.norm(sigs[:, None] - sigs[None], axis=-1)
    d[np.diag_indices(len(d))] = np.inf
    return float(d.min() / spec.acc_noise)


# ---------------------------------------------------------------------------
# CSV


def write_csv(stream: SensorStream, path) -> Path:
    """One row per tick; floats written with ``repr`` so they round-trip."""
    labels = stream.labels()
    idx = np.flatnonzero(labels >= 0)
    codes = np.asarray(ACTIVITIES)[labels[idx]].tolist()
    row = "%d,%r,%r,%r,%r,%r,%r,%r,%s\n"
    uid = stream.user_id
    body = "".join(row % (uid, t, *vals, code) for t, vals, code in
                   zip((idx / stream.sample_rate).tolist(), stream.records[idx].tolist(), codes))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(",".join(CSV_COLUMNS) + "\n")
        fh.write(body)
    return path


def load_csv(path, sample_rate: int = SAMPLE_RATE) -> SensorStream:
    """Parse the 9-column sensor CSV.  Consecutive rows with the same label
    form one segment; a gap in ``t`` larger than one tick also starts a new
    segment."""
    path = Path(path)
    rows = []
    user = None
    codes = {c: i for i, c in enumerate(ACTIVITIES)}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != CSV_COLUMNS:
            raise ValueError(f"{path}: header must be {','.join(CSV_COLUMNS)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(CSV_COLUMNS):
                raise ValueError(f"{path}:{lineno}: expected {len(CSV_COLUMNS)} fields, got {len(row)}")
            try:
                uid = int(row[0])
                vals = [float(v) for v in row[1:8]]
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            label = row[8].strip()
            if label not in codes:
                raise ValueError(f"{path}:{lineno}: unknown label {label!r}; valid codes: {', '.join(ACTIVITIES)}")
            if user is None:
                user = uid
            elif uid != user:
                raise ValueError(f"{path}:{lineno}: file mixes user ids {user} and {uid}")
            rows.append((vals[0], vals[1:], codes[label]))
    if not rows:
        return SensorStream(-1 if user is None else user, np.zeros((0, 6)), [], sample_rate)
    t = np.array([r[0] for r in rows])
    records = np.array([r[1] for r in rows])
    labels = np.array([r[2] for r in rows])
    tick = 1.0 / sample_rate
    breaks = np.flatnonzero((labels[1:] != labels[:-1]) | (np.diff(t) > 1.5 * tick)) + 1
    bounds = np.concatenate([[0], breaks, [len(rows)]])
    segments = [(int(a), int(b), int(labels[a])) for a, b in zip(bounds[:-1], bounds[1:])]
    return SensorStream(user, records, segments, sample_rate)


# ---------------------------------------------------------------------------
# pool and partitions


@dataclass
class PartitionSpec:
    scheme: str = "imbalanced"
    num_users: int = 30
    per_user: int = 480
    num_homes: int = 10
    home_min: int = 1
    home_max: int = 5
    test_per_class: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.scheme not in ("balanced", "imbalanced", "home"):
            raise ValueError(f"unknown partition scheme {self.scheme!r}")
        if self.per_user < NUM_CLASSES:
            raise ValueError("per_user must allow at least one sample per class")


class WindowPool:
    """Candidate windows per (user, class), split into a held-out test tail
    and the training windows that do not overlap it."""

    def __init__(self, streams, test_per_class: int = 16, window_seconds: float = 1.0, overlap: float = 0.8):
        self.streams = {s.user_id: s for s in streams}
        self.test_per_class = test_per_class
        self.train, self.test = {}, {}
        for uid, stream in self.streams.items():
            length, stride = window_params(stream.sample_rate, window_seconds, overlap)
            self.length = length
            _, labels, starts = segment_windows(stream, window_seconds, overlap)
            for c in range(NUM_CLASSES):
                st = np.sort(starts[labels == c])
                test = st[len(st) - test_per_class:] if len(st) >= test_per_class else st
                if len(test):
                    train = st[st + length <= test[0]]
                else:
                    train = st[:0]
                self.train[uid, c] = train
                self.test[uid, c] = test

    @property
    def users(self) -> list[int]:
        return sorted(self.streams)

    def available(self, user: int, label: int) -> int:
        return len(self.train[user, label])

    def norm_stats(self) -> NormStats:
        """Min/max over every record covered by a training candidate window."""
        stats = None
        for (uid, _), starts in sorted(self.train.items()):
            if not len(starts):
                continue
            rec = self.streams[uid].records[starts.min():starts.max() + self.length]
            s = NormStats.from_records(rec)
            stats = s if stats is None else stats.merge(s)
        if stats is None:
            raise ValueError("pool has no training windows")
        return stats

    def images(self, user: int, starts, stats: NormStats) -> np.ndarray:
        raw = _take_windows(self.streams[user].records, np.asarray(starts), self.length)
        return windows_to_images(raw, stats)


def random_composition(rng, total: int, parts: int) -> np.ndarray:
    """Uniform over compositions of ``total`` into ``parts`` positive parts."""
    cuts = np.sort(rng.choice(np.arange(1, total), size=parts - 1, replace=False))
    return np.diff(np.concatenate([[0], cuts, [total]]))


def bounded_composition(rng, total: int, parts: int, low: int, high: int,
                        max_tries: int = 100_000) -> np.ndarray:
    """Rejection sampling: uniform over compositions with every part in [low, high]."""
    if not parts * low <= total <= parts * high:
        raise ValueError(f"cannot split {total} into {parts} parts within [{low}, {high}]")
    for _ in range(max_tries):
        comp = random_composition(rng, total - parts * (low - 1), parts) + (low - 1)
        if comp.max() <= high:
            return comp
    raise RuntimeError("composition rejection sampling did not terminate")


@dataclass
class Partition:
    clients: list[ClientDataset]
    test_sets: list[ClientDataset]
    stats: NormStats
    spec: PartitionSpec
    homes: dict[int, list[int]] = field(default_factory=dict)

    def manifest(self) -> dict:
        return {
            "spec": asdict(self.spec),
            "norm_stats": self.stats.to_dict(),
            "clients": [{"client_id": c.client_id, "members": list(c.members), "n": len(c),
                         "histogram": c.class_histogram.tolist()} for c in self.clients],
            "homes": {str(k): v for k, v in self.homes.items()},
            "test_sets": [{"user_id": t.client_id, "n": len(t), "histogram": t.class_histogram.tolist()}
                          for t in self.test_sets],
        }

    def write_manifest(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.manifest(), indent=2) + "\n")
        return path

    def pooled_train(self) -> ClientDataset:
        return ClientDataset.merge(-1, self.clients)

    def pooled_test(self) -> ClientDataset:
        return ClientDataset.merge(-1, self.test_sets)


def _class_counts(spec: PartitionSpec, pool: WindowPool, rng, user: int) -> np.ndarray:
    if spec.scheme == "balanced":
        if spec.per_user % NUM_CLASSES:
            raise ValueError("balanced partition needs per_user divisible by the class count")
        return np.full(NUM_CLASSES, spec.per_user // NUM_CLASSES)
    avail = np.array([pool.available(user, c) for c in range(NUM_CLASSES)])
    if avail.sum() < spec.per_user or np.any(avail < 1):
        return None
    for _ in range(10_000):
        comp = random_composition(rng, spec.per_user, NUM_CLASSES)
        if np.all(comp <= avail):
            return comp
    return None


def partition(pool: WindowPool, spec: PartitionSpec | None = None) -> Partition:
    """Build client training sets and per-user balanced test sets."""
    spec = spec or PartitionSpec()
    users = pool.users[:spec.num_users]
    if len(users) < spec.num_users:
        raise ValueError(f"pool has {len(users)} users, partition needs {spec.num_users}")
    rng = np.random.default_rng([spec.seed, 11])
    stats = pool.norm_stats()
    shortfalls = []
    plans = {}
    for user in users:
        counts = _class_counts(spec, pool, rng, user)
        for c in range(NUM_CLASSES):
            have_test = len(pool.test[user, c])
            if have_test < spec.test_per_class:
                shortfalls.append((user, f"{ACTIVITIES[c]} (test)", spec.test_per_class, have_test))
            if counts is None:
                continue
            if counts[c] > pool.available(user, c):
                shortfalls.append((user, ACTIVITIES[c], int(counts[c]), pool.available(user, c)))
        if counts is None:
            avail = [pool.available(user, c) for c in range(NUM_CLASSES)]
            shortfalls.append((user, "all classes", spec.per_user, int(sum(avail))))
        plans[user] = counts
    if shortfalls:
        raise PoolShortfallError(shortfalls)

    per_user, tests = {}, []
    for user in users:
        xs, ys, ids = [], [], []
        for c in range(NUM_CLASSES):
            cand = pool.train[user, c]
            pick = np.sort(rng.choice(cand, size=int(plans[user][c]), replace=False))
            xs.append(pool.images(user, pick, stats))
            ys.append(np.full(len(pick), c))
            ids.append([window_id(user, s) for s in pick])
        n = sum(len(y) for y in ys)
        per_user[user] = ClientDataset(user, np.concatenate(xs), np.concatenate(ys), np.full(n, user),
                                       np.concatenate(ids), (user,))
        t_starts = [pool.test[user, c][-spec.test_per_class:] for c in range(NUM_CLASSES)]
        tx = np.concatenate([pool.images(user, s, stats) for s in t_starts])
        ty = np.repeat(np.arange(NUM_CLASSES), spec.test_per_class)
        tid = np.array([window_id(user, s) for st in t_starts for s in st])
        tests.append(ClientDataset(user, tx, ty, np.full(len(ty), user), tid, (user,)))

    homes = {}
    if spec.scheme == "home":
        sizes = bounded_composition(rng, len(users), spec.num_homes, spec.home_min, spec.home_max)
        order = rng.permutation(users)
        pos = 0
        clients = []
        for h, size in enumerate(sizes):
            members = sorted(int(u) for u in order[pos:pos + size])
            pos += size
            homes[h] = members
            clients.append(ClientDataset.merge(h, [per_user[u] for u in members]))
    else:
        clients = [per_user[u] for u in users]
        homes = {u: [u] for u in users}
    return Partition(clients, tests, stats, spec, homes)


def synthetic_partition(spec: PartitionSpec | None = None, synth: SynthSpec | None = None) -> Partition:
    """Synthesize users and partition them in one call."""
    spec = spec or PartitionSpec()
    synth = synth or SynthSpec(num_users=spec.num_users)
    pool = WindowPool(synthesize_streams(synth), spec.test_per_class)
    return partition(pool, spec)
