"""Dataset loading, chronological splits and forecasting windows.

Two border conventions are supported. ``ett_months`` reproduces the fixed
12/4/4-month borders used for the ETT family; ``ratio`` takes
``floor(N * train)`` and ``floor(N * test)`` rows and gives the remainder to
validation. Validation and test segments are prefixed with ``seq_len`` rows
of lookback from the preceding segment.
"""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from scipy.signal import lfilter

DATA_DIR_ENV = "STELLA_DATA_DIR"

SPLITS = ("train", "val", "test")


class DataError(ValueError):
    """Raised for malformed input files or impossible split requests."""


@dataclass(frozen=True)
class SeriesTable:
    timestamps: np.ndarray  # datetime64[s], strictly increasing
    values: np.ndarray  # N x C float64
    channel_names: list[str]
    frequency: str = "unknown"
    domain_tag: str = "unknown"

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_channels(self) -> int:
        return self.values.shape[1]

    def head(self, n: int) -> "SeriesTable":
        return SeriesTable(self.timestamps[:n], self.values[:n], list(self.channel_names),
                           self.frequency, self.domain_tag)


@dataclass(frozen=True)
class DatasetInfo:
    name: str
    n_rows: int
    n_channels: int
    step_minutes: int
    frequency: str
    domain_tag: str
    split_mode: str  # "ett_months" or "ratio"
    ratios: tuple[float, float, float] = (0.7, 0.1, 0.2)
    subtract_horizon: bool = False
    seq_len: int = 96
    pred_lens: tuple[int, ...] = (96, 192, 336, 720)
    oversample: int = 1
    start: str = "2016-07-01 00:00:00"
    channel_names: tuple[str, ...] = ()


_ETT_COLS = ("HUFL", "HULL", "MUFL", "MULL", "LUFL", "LULL", "OT")

DATASETS: dict[str, DatasetInfo] = {
    "ETTh1": DatasetInfo("ETTh1", 17420, 7, 60, "1 hour", "Temperature", "ett_months",
                         channel_names=_ETT_COLS),
    "ETTh2": DatasetInfo("ETTh2", 17420, 7, 60, "1 hour", "Temperature", "ett_months",
                         channel_names=_ETT_COLS),
    "ETTm1": DatasetInfo("ETTm1", 69680, 7, 15, "15 min", "Temperature", "ett_months",
                         channel_names=_ETT_COLS),
    "ETTm2": DatasetInfo("ETTm2", 69680, 7, 15, "15 min", "Temperature", "ett_months",
                         channel_names=_ETT_COLS),
    "Weather": DatasetInfo("Weather", 52696, 21, 10, "10 min", "Weather", "ratio",
                           start="2020-01-01 00:10:00"),
    "Exchange": DatasetInfo("Exchange", 7588, 8, 1440, "1 day", "Finance", "ratio",
                            subtract_horizon=True, start="1990-01-01 00:00:00"),
    "Illness": DatasetInfo("Illness", 966, 7, 10080, "7 day", "Health", "ratio",
                           subtract_horizon=True, seq_len=36, pred_lens=(24, 36, 48, 60),
                           oversample=12, start="2002-01-01 00:00:00"),
}

# horizon and seasonal period per M4 frequency group
M4_GROUPS: dict[str, tuple[int, int]] = {
    "Yearly": (6, 1),
    "Quarterly": (8, 4),
    "Monthly": (18, 12),
    "Weekly": (13, 1),
    "Daily": (14, 1),
    "Hourly": (48, 24),
}


def describe_frequency(step: np.timedelta64) -> str:
    minutes = int(step / np.timedelta64(1, "m"))
    if minutes <= 0:
        return "unknown"
    if minutes % 1440 == 0:
        return f"{minutes // 1440} day"
    if minutes % 60 == 0:
        return f"{minutes // 60} hour"
    return f"{minutes} min"


def frequency_minutes(frequency: str) -> int:
    num, unit = frequency.split()
    scale = {"min": 1, "hour": 60, "day": 1440}[unit]
    return int(num) * scale


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------


def load_csv(
    path: str | os.PathLike,
    columns: list[str] | None = None,
    date_column: str = "date",
    frequency: str | None = None,
    domain_tag: str | None = None,
) -> SeriesTable:
    """Read a CSV whose first column is a timestamp and the rest numeric.

    ``columns`` optionally restricts (and orders) the value columns.
    Rows with missing or unparseable values are rejected, reporting the
    1-based line number in the file.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        rows = list(reader)
    if not header or header[0].strip().lower() != date_column:
        raise DataError(f"{path}: first column must be {date_column!r}, got {header[:1]}")
    names = [h.strip() for h in header[1:]]
    if columns is not None:
        missing = [c for c in columns if c not in names]
        if missing:
            raise DataError(f"{path}: columns not found: {missing}")
        col_idx = [names.index(c) + 1 for c in columns]
        names = list(columns)
    else:
        col_idx = list(range(1, len(header)))
    if not rows:
        raise DataError(f"{path}: no data rows")

    width = len(header)
    for i, r in enumerate(rows):
        if len(r) != width:
            raise DataError(f"{path}: line {i + 2}: expected {width} fields, got {len(r)}")
    try:
        ts = np.array([r[0].strip() for r in rows], dtype="datetime64[s]")
    except ValueError:
        for i, r in enumerate(rows):
            try:
                np.datetime64(r[0].strip(), "s")
            except ValueError:
                raise DataError(f"{path}: line {i + 2}: bad timestamp {r[0]!r}") from None
        raise
    try:
        vals = np.array([[r[j] for j in col_idx] for r in rows], dtype=np.float64)
    except ValueError:
        for i, r in enumerate(rows):
            for j in col_idx:
                try:
                    float(r[j])
                except ValueError:
                    raise DataError(
                        f"{path}: line {i + 2}: unparseable or missing value {r[j]!r} "
                        f"in column {header[j]!r}") from None
        raise
    bad = ~np.isfinite(vals)
    if bad.any():
        i = int(np.argwhere(bad.any(axis=1))[0, 0])
        raise DataError(f"{path}: line {i + 2}: missing (non-finite) value")
    steps = np.diff(ts)
    if (steps <= np.timedelta64(0, "s")).any():
        i = int(np.argmax(steps <= np.timedelta64(0, "s")))
        raise DataError(f"{path}: line {i + 3}: timestamps not strictly increasing")

    if frequency is None:
        frequency = describe_frequency(np.median(steps.astype(np.int64)).astype("timedelta64[s]")
                                       if len(steps) else np.timedelta64(0, "s"))
    if domain_tag is None:
        info = DATASETS.get(path.stem)
        domain_tag = info.domain_tag if info else "unknown"
    return SeriesTable(ts, vals, names, frequency, domain_tag)


def write_csv(table: SeriesTable, path: str | os.PathLike) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    stamps = np.datetime_as_string(table.timestamps, unit="s")
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["date", *table.channel_names])
        for t, row in zip(stamps, table.values):
            w.writerow([t.replace("T", " "), *(repr(float(v)) for v in row)])


def resolve_dataset(name_or_path: str, data_dir: str | None = None) -> Path:
    """Map a registry name (e.g. ``ETTh1``) or a path to an existing CSV file."""
    p = Path(name_or_path)
    if p.suffix == ".csv" or p.exists():
        if not p.exists():
            raise FileNotFoundError(f"dataset file not found: {p}")
        return p
    base = Path(data_dir or os.environ.get(DATA_DIR_ENV, "data"))
    candidate = base / f"{name_or_path}.csv"
    if not candidate.exists():
        raise FileNotFoundError(f"dataset {name_or_path!r} not found at {candidate}")
    return candidate


def load_dataset(name_or_path: str, data_dir: str | None = None) -> SeriesTable:
    return load_csv(resolve_dataset(name_or_path, data_dir))


# ---------------------------------------------------------------------------
# M4-style univariate files
# ---------------------------------------------------------------------------


def load_m4(path: str | os.PathLike, header: bool = True) -> dict[str, np.ndarray]:
    """Read ``id, v1, v2, ...`` rows; trailing empty cells are dropped."""
    out: dict[str, np.ndarray] = {}
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        if header:
            next(reader, None)
        for lineno, row in enumerate(reader, start=2 if header else 1):
            if not row:
                continue
            sid = row[0].strip().strip('"')
            cells = [c for c in row[1:] if c.strip() != ""]
            try:
                out[sid] = np.array([float(c) for c in cells], dtype=np.float64)
            except ValueError:
                raise DataError(f"{path}: line {lineno}: unparseable value") from None
    return out


def write_m4(series: dict[str, np.ndarray], path: str | os.PathLike) -> None:
    width = max(len(v) for v in series.values())
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", *(f"V{i + 2}" for i in range(width))])
        for sid, v in series.items():
            w.writerow([sid, *(repr(float(x)) for x in v)])


# ---------------------------------------------------------------------------
# Splits and windows
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitBundle:
    """Index ranges ``[start, stop)`` per split, lookback already included."""

    train: tuple[int, int]
    val: tuple[int, int]
    test: tuple[int, int]
    lookback: int
    mode: str
    n_rows: int

    def segment(self, split: str) -> tuple[int, int]:
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        return getattr(self, split)

    def length(self, split: str) -> int:
        a, b = self.segment(split)
        return b - a

    def truncate_train(self, fraction: float) -> "SplitBundle":
        """Keep only the leading ``fraction`` of the training segment."""
        if not 0.0 < fraction <= 1.0:
            raise ValueError("fraction must be in (0, 1]")
        a, b = self.train
        keep = int(math.floor((b - a) * fraction))
        return SplitBundle((a, a + keep), self.val, self.test, self.lookback, self.mode,
                           self.n_rows)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "n_rows": self.n_rows,
            "lookback": self.lookback,
            **{s: {"start": self.segment(s)[0], "stop": self.segment(s)[1],
                   "length": self.length(s)} for s in SPLITS},
        }


def _points_per_month(frequency: str) -> int:
    minutes = frequency_minutes(frequency)
    if (30 * 24 * 60) % minutes:
        raise DataError(f"ett_months split needs a sub-daily frequency, got {frequency!r}")
    return 30 * 24 * 60 // minutes


def chronological_split(
    table: SeriesTable | None = None,
    mode: str = "ratio",
    ratios: tuple[float, float, float] = (0.7, 0.1, 0.2),
    seq_len: int = 96,
    pred_len: int = 0,
    n_rows: int | None = None,
    frequency: str | None = None,
) -> SplitBundle:
    """Split rows into train/val/test with a ``seq_len`` lookback prefix on val/test.

    ``mode="ett_months"`` uses 12/4/4 months of points; ``mode="ratio"``
    uses ``floor(N*train)`` and ``floor(N*test)`` with validation as the rest.
    """
    n = n_rows if n_rows is not None else table.n_rows
    S = seq_len
    if mode == "ett_months":
        ppm = _points_per_month(frequency or table.frequency)
        n_train, n_val, n_test = 12 * ppm, 4 * ppm, 4 * ppm
        if n_train + n_val + n_test > n:
            raise DataError(f"ett_months split needs {n_train + n_val + n_test} rows, have {n}")
        b1 = n_train
        b2 = n_train + n_val
        b3 = b2 + n_test
    elif mode == "ratio":
        if abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
            raise ValueError(f"ratios must be non-negative and sum to 1, got {ratios}")
        n_train = int(math.floor(n * ratios[0]))
        n_test = int(math.floor(n * ratios[2]))
        b1 = n_train
        b2 = n - n_test
        b3 = n
    else:
        raise ValueError(f"unknown split mode {mode!r}")
    bundle = SplitBundle((0, b1), (max(b1 - S, 0), b2), (max(b2 - S, 0), b3), S, mode, n)
    for split in SPLITS:
        if bundle.length(split) < S + pred_len:
            raise DataError(
                f"{split} segment has {bundle.length(split)} rows, need at least "
                f"S + H = {S + pred_len}")
    return bundle


def split_for(info: DatasetInfo, table: SeriesTable | None = None, seq_len: int | None = None,
              pred_len: int = 0) -> SplitBundle:
    S = info.seq_len if seq_len is None else seq_len
    return chronological_split(
        table, info.split_mode, info.ratios, S, pred_len,
        n_rows=None if table is not None else info.n_rows,
        frequency=None if table is not None else info.frequency)


def window_count(length: int, seq_len: int, subtract_horizon: bool = False,
                 pred_len: int = 0) -> int:
    """Number of windows in a segment of ``length`` rows (lookback included).

    ``L - S + 1`` with ``subtract_horizon`` off, ``L - S - H + 1`` with it on.
    """
    count = length - seq_len + 1 - (pred_len if subtract_horizon else 0)
    if count <= 0:
        raise DataError(f"segment of length {length} admits no windows (S={seq_len}, H={pred_len})")
    return count


def split_window_counts(bundle: SplitBundle, seq_len: int, subtract_horizon: bool,
                        pred_len: int = 0) -> tuple[int, int, int]:
    return tuple(window_count(bundle.length(s), seq_len, subtract_horizon, pred_len)
                 for s in SPLITS)


@dataclass
class TimeWindowBatch:
    x: np.ndarray  # B x S x C
    y: np.ndarray  # B x H x C
    origin_indices: np.ndarray  # start row of each x window


def window_starts(bundle: SplitBundle, split: str, seq_len: int, pred_len: int) -> np.ndarray:
    """Start rows of every admissible window (X and Y both inside the segment)."""
    a, b = bundle.segment(split)
    n = b - a - seq_len - pred_len + 1
    if n <= 0:
        raise DataError(f"{split} segment too short for S={seq_len}, H={pred_len}")
    return np.arange(a, a + n)


def oversample(starts: np.ndarray, factor: int,
               rng: np.random.Generator | None = None) -> np.ndarray:
    """Repeat the window set ``factor`` times, reshuffling each repetition when ``rng`` is given."""
    if factor < 1:
        raise ValueError(f"oversample factor must be >= 1, got {factor}")
    reps = [rng.permutation(starts) if rng is not None else starts for _ in range(factor)]
    return np.concatenate(reps)


def iterate_windows(
    values: np.ndarray,
    bundle: SplitBundle,
    split: str,
    seq_len: int,
    pred_len: int,
    batch_size: int,
    rng: np.random.Generator | None = None,
    oversample_factor: int = 1,
    starts: np.ndarray | None = None,
) -> Iterator[TimeWindowBatch]:
    """Yield batches covering each admissible window once per repetition.

    Passing ``rng`` shuffles the order; the window set is unchanged.
    """
    if starts is None:
        starts = window_starts(bundle, split, seq_len, pred_len)
    if rng is not None:
        order = oversample(starts, oversample_factor, rng)
    else:
        order = oversample(starts, oversample_factor)
    offs_x = np.arange(seq_len)
    offs_y = np.arange(seq_len, seq_len + pred_len)
    for i in range(0, len(order), batch_size):
        idx = order[i:i + batch_size]
        yield TimeWindowBatch(values[idx[:, None] + offs_x], values[idx[:, None] + offs_y], idx)


@dataclass
class StandardScaler:
    mean: np.ndarray = field(default_factory=lambda: np.zeros(0))
    std: np.ndarray = field(default_factory=lambda: np.ones(0))

    @classmethod
    def fit(cls, values: np.ndarray) -> "StandardScaler":
        std = values.std(axis=0)
        return cls(values.mean(axis=0), np.where(std > 0, std, 1.0))

    def transform(self, values: np.ndarray) -> np.ndarray:
        return (values - self.mean) / self.std

    def inverse(self, values: np.ndarray) -> np.ndarray:
        return values * self.std + self.mean


def standardize(table: SeriesTable, bundle: SplitBundle) -> tuple[np.ndarray, StandardScaler]:
    """Standardize all rows with statistics from the training segment only."""
    a, b = bundle.train
    scaler = StandardScaler.fit(table.values[a:b])
    return scaler.transform(table.values), scaler


def split_manifest(table: SeriesTable, info: DatasetInfo | None, seq_len: int,
                   pred_len: int, name: str = "") -> dict:
    """JSON-ready audit record of splits and window counts under both conventions."""
    mode = info.split_mode if info else "ratio"
    ratios = info.ratios if info else (0.7, 0.1, 0.2)
    bundle = chronological_split(table, mode, ratios, seq_len)
    counts_off = split_window_counts(bundle, seq_len, False)
    try:
        counts_on = split_window_counts(bundle, seq_len, True, pred_len)
    except DataError:
        counts_on = None
    return {
        "dataset": name,
        "n_rows": table.n_rows,
        "n_channels": table.n_channels,
        "frequency": table.frequency,
        "domain": table.domain_tag,
        "seq_len": seq_len,
        "pred_len": pred_len,
        "split": bundle.to_dict(),
        "window_counts": {
            "horizon_off": dict(zip(SPLITS, counts_off)),
            "horizon_on": dict(zip(SPLITS, counts_on)) if counts_on else None,
            "default_convention": "horizon_on" if (info and info.subtract_horizon) else "horizon_off",
        },
    }


def dump_json(obj, path: str | os.PathLike | None = None) -> str:
    text = json.dumps(obj, indent=2, sort_keys=False)
    if path is not None:
        Path(path).write_text(text + "\n")
    return text


# ---------------------------------------------------------------------------
# Synthetic stand-ins
# ---------------------------------------------------------------------------


def synthetic_values(n_rows: int, n_channels: int, step_minutes: int, seed: int = 0) -> np.ndarray:
    """Seasonal multichannel series with slow drift and AR(1) noise.

    Channels share a daily and a weekly cycle with channel-specific phase and
    amplitude, so cross-channel structure exists for the mixers to find.
    """
    rng = np.random.default_rng(seed)
    t = np.arange(n_rows, dtype=np.float64)
    day = max(1440 / step_minutes, 2.0)
    week = 7 * day
    out = np.empty((n_rows, n_channels))
    base_drift = np.cumsum(rng.normal(0, 1, n_rows)) / math.sqrt(day * 30)
    width = min(int(day), n_rows)  # "same" mode returns the longer operand's length
    drift = np.convolve(base_drift, np.ones(width) / width, mode="same")
    for c in range(n_channels):
        amp_d, amp_w = rng.uniform(0.5, 2.0), rng.uniform(0.2, 1.0)
        ph_d, ph_w = rng.uniform(0, 2 * np.pi, 2)
        noise = lfilter([1.0], [1.0, -0.7], rng.normal(0, 0.3, n_rows))
        level = rng.uniform(-5, 15)
        out[:, c] = (level + amp_d * np.sin(2 * np.pi * t / day + ph_d)
                     + amp_w * np.sin(2 * np.pi * t / week + ph_w)
                     + rng.uniform(0.5, 1.5) * drift + noise)
    return out


def synthetic_table(name: str, seed: int = 0, n_rows: int | None = None) -> SeriesTable:
    """A table with the registry entry's length, width, timestamps and metadata."""
    info = DATASETS[name]
    n = info.n_rows if n_rows is None else n_rows
    step = np.timedelta64(info.step_minutes, "m")
    ts = (np.datetime64(info.start.replace(" ", "T"), "s") + np.arange(n) * step).astype(
        "datetime64[s]")
    names = list(info.channel_names) or [f"v{i}" for i in range(info.n_channels - 1)] + ["OT"]
    vals = synthetic_values(n, info.n_channels, info.step_minutes, seed)
    return SeriesTable(ts, vals, names, info.frequency, info.domain_tag)


def synthetic_m4(group: str, n_series: int = 20, seed: int = 0,
                 history: int | None = None) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Positive seasonal univariate series split into (train, test) dicts."""
    horizon, s = M4_GROUPS[group]
    rng = np.random.default_rng(seed)
    hist = history or max(4 * horizon, 3 * s + 6)
    train, test = {}, {}
    for i in range(n_series):
        t = np.arange(hist + horizon)
        season = 1 + 0.2 * np.sin(2 * np.pi * t / s + rng.uniform(0, 6.28)) if s > 1 else 1.0
        y = (100 + rng.uniform(-1, 1) * t + rng.normal(0, 2, t.size).cumsum()) * season
        y = np.maximum(y, 1.0)
        sid = f"{group[0]}{i + 1}"
        train[sid], test[sid] = y[:hist], y[hist:]
    return train, test
