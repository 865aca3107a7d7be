"""Dataset files, phase splits, z-score normalization and a drifting synthetic generator."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

MINUTES_PER_WEEK = 10080


class DataError(ValueError):
    """Malformed or missing dataset files."""


class MissingFileError(DataError, FileNotFoundError):
    pass


@dataclass
class DatasetMeta:
    n_locations: int
    n_features: int
    interval_minutes: int
    n_steps: int
    feature_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.interval_minutes < 1 or MINUTES_PER_WEEK % self.interval_minutes:
            raise DataError(f"interval_minutes={self.interval_minutes} must divide {MINUTES_PER_WEEK}")
        if not self.feature_names:
            self.feature_names = [f"f{j}" for j in range(self.n_features)]
        if len(self.feature_names) != self.n_features:
            raise DataError("feature_names length does not match n_features")

    @property
    def intervals_per_week(self) -> int:
        return MINUTES_PER_WEEK // self.interval_minutes

    @property
    def intervals_per_day(self) -> int:
        return 1440 // self.interval_minutes


@dataclass
class SeriesFrame:
    values: np.ndarray  # [T, N, d]
    meta: DatasetMeta

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        m = self.meta
        if self.values.shape != (m.n_steps, m.n_locations, m.n_features):
            raise DataError(f"values shape {self.values.shape} inconsistent with metadata")
        if not np.isfinite(self.values).all():
            raise DataError("series contains non-finite values")


# ----------------------------------------------------------------------------
# files


def _header(n: int, d: int) -> list[str]:
    return [f"loc{i}_f{j}" for i in range(n) for j in range(d)]


def save_dataset(frame: SeriesFrame, adj, directory) -> Path:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    m = frame.meta
    (out / "meta.txt").write_text(
        f"n_locations={m.n_locations}\n"
        f"n_features={m.n_features}\n"
        f"interval_minutes={m.interval_minutes}\n"
        f"n_steps={m.n_steps}\n"
        f"feature_names={','.join(m.feature_names)}\n",
        encoding="utf-8",
    )
    flat = frame.values.reshape(m.n_steps, -1)
    with open(out / "series.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(_header(m.n_locations, m.n_features))
        for row in flat:
            w.writerow([f"{v:.17g}" for v in row])
    with open(out / "adjacency.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        for row in np.asarray(adj, dtype=np.float64):
            w.writerow([f"{v:.17g}" for v in row])
    return out


def read_key_values(path) -> dict[str, str]:
    """Parse ``key=value`` lines; ``#`` starts a comment."""
    kv = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"{path}:{lineno}: expected key=value, got {line!r}")
        k, _, v = line.partition("=")
        kv[k.strip()] = v.strip()
    return kv


def _read_matrix(path: Path, has_header: bool) -> tuple[list[str] | None, np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    header = None
    if has_header:
        if not rows:
            raise DataError(f"{path}: empty file")
        header, rows = rows[0], rows[1:]
    width = len(header) if header is not None else (len(rows[0]) if rows else 0)
    out = np.empty((len(rows), width))
    for r, row in enumerate(rows):
        lineno = r + (2 if has_header else 1)
        if len(row) != width:
            raise DataError(f"{path}: row {lineno} has {len(row)} columns, expected {width}")
        for c, cell in enumerate(row):
            try:
                out[r, c] = float(cell)
            except ValueError:
                raise DataError(f"{path}: non-numeric cell {cell!r} at row {lineno}, column {c + 1}") from None
    return header, out


def load_dataset(directory) -> tuple[SeriesFrame, np.ndarray]:
    """Read ``meta.txt``, ``series.csv`` and ``adjacency.csv``; returns the frame and symmetrized adjacency."""
    d = Path(directory)
    for name in ("meta.txt", "series.csv", "adjacency.csv"):
        if not (d / name).is_file():
            raise MissingFileError(f"missing dataset file: {d / name}")
    kv = read_key_values(d / "meta.txt")
    try:
        meta = DatasetMeta(
            n_locations=int(kv["n_locations"]),
            n_features=int(kv["n_features"]),
            interval_minutes=int(kv["interval_minutes"]),
            n_steps=int(kv["n_steps"]),
            feature_names=[s for s in kv.get("feature_names", "").split(",") if s],
        )
    except KeyError as e:
        raise DataError(f"{d / 'meta.txt'}: missing key {e.args[0]}") from None
    header, flat = _read_matrix(d / "series.csv", has_header=True)
    expected = _header(meta.n_locations, meta.n_features)
    if header != expected:
        bad = next((i for i, (a, b) in enumerate(zip(header, expected)) if a != b), min(len(header), len(expected)))
        raise DataError(f"series.csv: header mismatch at column {bad + 1}; expected {len(expected)} columns loc<i>_f<j>")
    if flat.shape[0] != meta.n_steps:
        raise DataError(f"series.csv: {flat.shape[0]} data rows, meta says n_steps={meta.n_steps}")
    _, adj = _read_matrix(d / "adjacency.csv", has_header=False)
    if adj.shape != (meta.n_locations, meta.n_locations):
        raise DataError(f"adjacency.csv: shape {adj.shape}, expected {(meta.n_locations,) * 2}")
    frame = SeriesFrame(flat.reshape(meta.n_steps, meta.n_locations, meta.n_features), meta)
    return frame, (adj + adj.T) / 2.0


# ----------------------------------------------------------------------------
# splits and normalization


@dataclass(frozen=True)
class PhaseSplit:
    warmup_train: range
    warmup_val: range
    online: range

    @property
    def online_start(self) -> int:
        return self.online.start


def split_phases(n_steps: int) -> PhaseSplit:
    """Warm-up : online = 2 : 6; inside warm-up, train : val = 4 : 1."""
    if n_steps < 8:
        raise DataError(f"need at least 8 steps to split, got {n_steps}")
    warm = n_steps * 2 // 8
    train = warm * 4 // 5
    return PhaseSplit(range(0, train), range(train, warm), range(warm, n_steps))


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray  # [d]
    std: np.ndarray  # [d]

    @classmethod
    def fit(cls, values: np.ndarray) -> "NormStats":
        """Per-feature statistics over every time step and location of ``values`` ``[T, N, d]``."""
        v = np.asarray(values, dtype=np.float64)
        mu = v.mean(axis=(0, 1))
        sd = v.std(axis=(0, 1))
        if (sd <= 0).any():
            logger.warning("constant feature(s) %s: using std=1", np.flatnonzero(sd <= 0).tolist())
            sd = np.where(sd > 0, sd, 1.0)
        return cls(mu, sd)

    def normalize(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def denormalize(self, z) -> np.ndarray:
        return np.asarray(z, dtype=np.float64) * self.std + self.mean


def fit_stats(frame: SeriesFrame, split: PhaseSplit) -> NormStats:
    """Statistics from the warm-up training slice only."""
    r = split.warmup_train
    return NormStats.fit(frame.values[r.start : r.stop])


def windows(values: np.ndarray, lookback: int, horizon: int, span: range):
    """Every (x, y) pair lying entirely inside ``span``; yields MemoryEntry objects."""
    from .memory import MemoryEntry

    for s in range(span.start, span.stop - lookback - horizon + 1):
        yield MemoryEntry(
            x=values[s : s + lookback],
            y=values[s + lookback : s + lookback + horizon],
            origin_time=s + lookback - 1,
        )


# ----------------------------------------------------------------------------
# synthetic generator


@dataclass(frozen=True)
class SyntheticSpec:
    n_locations: int = 10
    days: int = 112
    interval_minutes: int = 60
    drift_rate: float = 0.05
    drift_heterogeneity: float = 1.0
    noise_std: float = 0.1
    graph_degree: float = 3.0
    seed: int = 7
    amplitude_low: float = 1.0
    amplitude_high: float = 4.0

    def __post_init__(self):
        if self.drift_rate < 0:
            raise ValueError("drift_rate must be >= 0")
        if not 0.0 <= self.drift_heterogeneity <= 1.0:
            raise ValueError("drift_heterogeneity must lie in [0, 1]")
        if 1440 % self.interval_minutes:
            raise ValueError("interval_minutes must divide a day")


@dataclass
class SyntheticDataset:
    frame: SeriesFrame
    adjacency: np.ndarray
    drift: np.ndarray  # per-location weekly drift rate
    base: np.ndarray  # [T, N] noiseless weekly-periodic base signal


def random_geometric_graph(n: int, degree: float, rng: np.random.Generator) -> np.ndarray:
    """Symmetric Gaussian-kernel weights between points closer than a radius sized for ``degree`` expected neighbours."""
    pos = rng.uniform(size=(n, 2))
    if n < 2 or degree <= 0:
        return np.zeros((n, n))
    radius = math.sqrt(degree / ((n - 1) * math.pi))
    dist = np.linalg.norm(pos[:, None, :] - pos[None, :, :], axis=-1)
    adj = np.where(dist < radius, np.exp(-((dist / radius) ** 2)), 0.0)
    np.fill_diagonal(adj, 0.0)
    return adj


def generate_synthetic(spec: SyntheticSpec) -> SyntheticDataset:
    rng = np.random.default_rng(spec.seed)
    n = spec.n_locations
    per_day = 1440 // spec.interval_minutes
    per_week = 7 * per_day
    T = spec.days * per_day
    t = np.arange(T, dtype=np.float64)[:, None]

    adj = random_geometric_graph(n, spec.graph_degree, rng)
    amp = rng.uniform(spec.amplitude_low, spec.amplitude_high, size=n)
    phase = rng.uniform(0.0, 2.0 * math.pi, size=n)
    rho = spec.drift_rate * (1.0 + spec.drift_heterogeneity * rng.uniform(-1.0, 1.0, size=n))

    base = amp * (1.0 + 0.5 * np.sin(2 * math.pi * t / per_day) + 0.3 * np.sin(2 * math.pi * t / per_week + phase))
    level = 1.0 + rho * (t / per_week)
    binary = adj > 0
    deg = binary.sum(axis=1)
    neighbour_mean = np.where(deg > 0, (base @ binary.T) / np.maximum(deg, 1), 0.0)
    noise = rng.normal(0.0, spec.noise_std, size=(T, n))
    values = np.maximum(0.0, base * level + 0.2 * neighbour_mean + noise)

    meta = DatasetMeta(n_locations=n, n_features=1, interval_minutes=spec.interval_minutes,
                       n_steps=T, feature_names=["value"])
    return SyntheticDataset(SeriesFrame(values[:, :, None], meta), adj, rho, base)
