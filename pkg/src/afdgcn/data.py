"""Dataset ingestion, normalization, windowing, chronological splits, and the
synthetic road-network generator used for desk-scale verification.

Two on-disk layouts are supported:
  * csv: header ``node_0,...,node_{N-1}``, one row per 5-minute step,
    single channel;
  * flat-binary: magic ``STDS``, three little-endian u32 (L, N, C), then
    L*N*C little-endian float64 values in row-major order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"STDS"


class DataError(ValueError):
    """Malformed or inconsistent dataset input."""


@dataclass
class RawSeries:
    """An L x N x C block of sensor readings."""

    values: np.ndarray
    channel_names: list[str] = field(default_factory=lambda: ["flow"])

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise DataError(f"series must be (L, N, C), got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise DataError("series contains non-finite values")
        if len(self.channel_names) != self.values.shape[2]:
            self.channel_names = [f"c{i}" for i in range(self.values.shape[2])]

    @property
    def n_steps(self) -> int:
        return self.values.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.values.shape[1]

    @property
    def n_channels(self) -> int:
        return self.values.shape[2]


def save_dataset(path, series: RawSeries, layout: str) -> None:
    if layout == "csv":
        if series.n_channels != 1:
            raise DataError("csv layout stores a single channel")
        header = ",".join(f"node_{i}" for i in range(series.n_nodes))
        with open(path, "w", newline="\n") as fh:
            fh.write(header + "\n")
            for row in series.values[:, :, 0]:
                fh.write(",".join(f"{v:.17g}" for v in row) + "\n")
    elif layout == "flat-binary":
        l, n, c = series.values.shape
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<III", l, n, c))
            fh.write(series.values.astype("<f8").tobytes())
    else:
        raise DataError(f"unknown dataset layout: {layout}")


def load_dataset(path, layout: str | None = None) -> RawSeries:
    """Load either layout; when layout is None it is sniffed from the magic."""
    if layout is None:
        with open(path, "rb") as fh:
            layout = "flat-binary" if fh.read(4) == MAGIC else "csv"
    if layout == "csv":
        with open(path) as fh:
            header = fh.readline().strip()
            names = header.split(",")
            n = len(names)
            if names != [f"node_{i}" for i in range(n)]:
                raise DataError(f"csv header must be node_0,...,node_{{N-1}}, got {header[:60]!r}")
            rows = []
            for lineno, line in enumerate(fh, start=2):
                line = line.strip()
                if not line:
                    continue
                parts = line.split(",")
                if len(parts) != n:
                    raise DataError(f"{path}:{lineno}: expected {n} columns, got {len(parts)}")
                rows.append([float(p) for p in parts])
        if not rows:
            raise DataError(f"{path}: no data rows")
        values = np.asarray(rows)[:, :, None]
    elif layout == "flat-binary":
        with open(path, "rb") as fh:
            blob = fh.read()
        if blob[:4] != MAGIC:
            raise DataError(f"{path}: bad magic bytes, not a flat-binary dataset")
        if len(blob) < 16:
            raise DataError(f"{path}: truncated header")
        l, n, c = struct.unpack("<III", blob[4:16])
        expected = 16 + l * n * c * 8
        if len(blob) != expected:
            raise DataError(f"{path}: expected {expected} bytes for {l}x{n}x{c}, got {len(blob)}")
        values = np.frombuffer(blob, dtype="<f8", offset=16).reshape(l, n, c).astype(np.float64)
    else:
        raise DataError(f"unknown dataset layout: {layout}")
    if not np.all(np.isfinite(values)):
        raise DataError(f"{path}: non-finite entries")
    return RawSeries(values)


@dataclass
class NormStats:
    """Per-channel mean and standard deviation (population)."""

    mean: np.ndarray
    std: np.ndarray


def zscore(mode: str, values: np.ndarray, stats: NormStats | None = None):
    """fit -> NormStats from the given values; apply/invert -> transformed array.

    A degenerate std (< 1e-8) is replaced by 1 so constant channels map to 0.
    """
    values = np.asarray(values, dtype=np.float64)
    if mode == "fit":
        flat = values.reshape(-1, values.shape[-1])
        mean = flat.mean(axis=0)
        std = flat.std(axis=0)
        std = np.where(std < 1e-8, 1.0, std)
        return NormStats(mean=mean, std=std)
    if stats is None:
        raise DataError(f"zscore {mode} needs fitted stats")
    if mode == "apply":
        return (values - stats.mean) / stats.std
    if mode == "invert":
        return values * stats.std + stats.mean
    raise DataError(f"unknown zscore mode: {mode}")


def split_dataset(series: RawSeries, ratios: tuple[float, float, float] = (6.0, 2.0, 2.0),
                  min_length: int | None = None) -> tuple[RawSeries, RawSeries, RawSeries]:
    """Chronological train/val/test split; floor-rounded lengths, remainder
    to the test segment."""
    r = np.asarray(ratios, dtype=np.float64)
    if np.any(r <= 0):
        raise DataError("split ratios must be positive")
    r = r / r.sum()
    l = series.n_steps
    n_train = int(np.floor(l * r[0]))
    n_val = int(np.floor(l * r[1]))
    n_test = l - n_train - n_val
    if min_length is not None and min(n_train, n_val, n_test) < min_length:
        raise DataError(
            f"split lengths ({n_train}, {n_val}, {n_test}) below minimum {min_length}")
    v = series.values
    names = series.channel_names
    return (RawSeries(v[:n_train], names),
            RawSeries(v[n_train:n_train + n_val], names),
            RawSeries(v[n_train + n_val:], names))


@dataclass
class WindowedDataset:
    """Stride-1 sliding windows: normalized inputs (M, P, N, C) and targets
    (M, Q, N, C_out); targets invert to original units through ``stats``."""

    inputs: np.ndarray
    targets: np.ndarray
    stats: NormStats
    split: str

    @property
    def n_windows(self) -> int:
        return self.inputs.shape[0]

    def targets_original(self) -> np.ndarray:
        return self.targets * self.stats.std[0] + self.stats.mean[0]

    def inputs_original(self) -> np.ndarray:
        return zscore("invert", self.inputs, self.stats)


def make_windows(series: RawSeries, history: int, horizon: int, stats: NormStats,
                 split: str = "train", target_channel: int = 0) -> WindowedDataset:
    """Cut stride-1 windows; window m predicts the horizon starting exactly
    one step after its input ends."""
    l = series.n_steps
    if l < history + horizon:
        raise DataError(f"series of length {l} too short for P={history}, Q={horizon}")
    m = l - history - horizon + 1
    norm = zscore("apply", series.values, stats)
    idx_in = np.arange(m)[:, None] + np.arange(history)[None, :]
    idx_out = np.arange(m)[:, None] + history + np.arange(horizon)[None, :]
    inputs = norm[idx_in]                                  # (M, P, N, C)
    targets = norm[idx_out][:, :, :, target_channel:target_channel + 1]
    return WindowedDataset(inputs=inputs, targets=targets, stats=stats, split=split)


def prepare_datasets(series: RawSeries, history: int, horizon: int,
                     ratios: tuple[float, float, float] = (6.0, 2.0, 2.0)):
    """Split chronologically, fit stats on the training segment only, then
    window each split with those shared stats."""
    train_s, val_s, test_s = split_dataset(series, ratios, min_length=history + horizon)
    stats = zscore("fit", train_s.values)
    return {
        "train": make_windows(train_s, history, horizon, stats, "train"),
        "val": make_windows(val_s, history, horizon, stats, "val"),
        "test": make_windows(test_s, history, horizon, stats, "test"),
    }


DAILY_PERIOD = 288  # 5-minute steps per day


def synth_generate(n_nodes: int, n_steps: int, seed: int,
                   cluster_size: int = 5, noise: float = 12.0,
                   diffusion: float = 0.35):
    """Deterministic ring-of-clusters corpus.

    Nodes sit in clusters wired densely inside and sparsely around a ring.
    Each node's signal is a daily profile (sinusoid plus rush-hour bumps,
    phased per cluster) plus a lag-1 diffusion of its neighbors' profiles
    plus seeded Gaussian noise. Returns (series, adjacency, edge list).
    """
    if n_nodes < 2:
        raise DataError("synthetic corpus needs at least 2 nodes")
    rng = np.random.default_rng(seed)

    n_clusters = max(1, n_nodes // cluster_size)
    cluster_of = np.minimum(np.arange(n_nodes) // cluster_size, n_clusters - 1)
    edges: list[tuple[int, int, float]] = []
    for a in range(n_nodes):
        for b in range(a + 1, n_nodes):
            if cluster_of[a] == cluster_of[b]:
                edges.append((a, b, float(rng.uniform(1.0, 2.0))))
    if n_clusters > 1:
        for c in range(n_clusters):
            a = int(np.where(cluster_of == c)[0][-1])
            b = int(np.where(cluster_of == (c + 1) % n_clusters)[0][0])
            if a != b:
                edges.append((min(a, b), max(a, b), float(rng.uniform(2.5, 3.5))))

    adjacency = np.zeros((n_nodes, n_nodes))
    for a, b, cost in edges:
        w = float(np.exp(-(cost * cost) / 4.0))
        adjacency[a, b] = max(adjacency[a, b], w)
        adjacency[b, a] = max(adjacency[b, a], w)

    # daily profile shared within a cluster (base + sinusoid + two rush-hour
    # bumps); nodes differ by a private scale, so the pattern saturates fast
    # while per-node parameters still have real work to do
    t = np.arange(n_steps)
    base_level = rng.uniform(180.0, 240.0, size=n_clusters)
    amp = rng.uniform(70.0, 100.0, size=n_clusters)
    bump_amp = rng.uniform(50.0, 80.0, size=(n_clusters, 2))
    cluster_phase = rng.uniform(0.0, DAILY_PERIOD, size=n_clusters)
    node_scale = rng.uniform(0.8, 1.2, size=n_nodes)
    bump_centers = np.array([102.0, 210.0])  # 8:30 and 17:30
    bump_width = 18.0

    def profile(steps: np.ndarray) -> np.ndarray:
        # (n_nodes, len(steps)) noiseless daily pattern
        ph = (steps[None, :] + cluster_phase[cluster_of][:, None]) % DAILY_PERIOD
        out = (base_level[cluster_of][:, None]
               + amp[cluster_of][:, None] * np.sin(2.0 * np.pi * ph / DAILY_PERIOD))
        for b in range(2):
            d = np.abs(ph - bump_centers[b])
            d = np.minimum(d, DAILY_PERIOD - d)
            out = out + bump_amp[cluster_of, b][:, None] * np.exp(-(d * d) / (2.0 * bump_width ** 2))
        return node_scale[:, None] * out

    base_now = profile(t)
    base_lag = profile(t - 1)
    deg = adjacency.sum(axis=1)
    row_norm = adjacency / np.where(deg > 0, deg, 1.0)[:, None]
    signal = base_now + diffusion * (row_norm @ base_lag)
    signal = signal + noise * rng.standard_normal((n_nodes, n_steps))
    values = signal.T[:, :, None]                          # (L, N, 1)
    return RawSeries(values), adjacency, edges


def save_adjacency_csv(path, edges: list[tuple[int, int, float]]) -> None:
    """Write one undirected edge per `from,to,cost` row."""
    with open(path, "w", newline="\n") as fh:
        fh.write("from,to,cost\n")
        for a, b, cost in edges:
            fh.write(f"{a},{b},{cost:.17g}\n")
