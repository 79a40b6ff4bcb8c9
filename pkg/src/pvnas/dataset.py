"""PV data ingestion: CSV loading, day-level cleaning, imputation, hourly
downsampling, chronological splitting and sliding-window construction."""
from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field, replace
from datetime import datetime
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

HOUR = np.timedelta64(1, "h")
NIGHT_HOURS = frozenset({21, 22, 23, 0, 1, 2})


class DataError(ValueError):
    pass


class MalformedRow(DataError):
    pass


class DuplicateTimestamp(DataError):
    pass


class EmptyFile(DataError):
    pass


class SchemaMismatch(DataError):
    pass


class EmptyResult(DataError):
    pass


class UnimputableGap(DataError):
    pass


class TooSmall(DataError):
    pass


class MissingFuture(DataError):
    pass


class TaskKind(str, enum.Enum):
    TASK1 = "task1"
    TASK2 = "task2"


@dataclass(frozen=True)
class TimeSeriesFrame:
    timestamps: np.ndarray          # datetime64[s], strictly increasing
    values: np.ndarray              # (N, D) float64, NaN where missing
    feature_names: tuple[str, ...]
    target_index: int = 0
    missing_mask: np.ndarray | None = None

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype="datetime64[s]")
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 2:
            raise DataError(f"values must be 2-D, got shape {vals.shape}")
        if len(ts) != len(vals):
            raise DataError(f"{len(ts)} timestamps but {len(vals)} value rows")
        if vals.shape[1] != len(self.feature_names):
            raise DataError(f"{vals.shape[1]} columns but {len(self.feature_names)} feature names")
        if not 0 <= self.target_index < vals.shape[1]:
            raise DataError(f"target_index {self.target_index} out of range")
        if len(ts) > 1 and not np.all(ts[1:] > ts[:-1]):
            raise DataError("timestamps must be strictly increasing")
        mask = np.isnan(vals) if self.missing_mask is None else np.asarray(self.missing_mask, bool)
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        object.__setattr__(self, "missing_mask", mask)

    def __len__(self) -> int:
        return len(self.timestamps)

    @property
    def n_features(self) -> int:
        return self.values.shape[1]

    @property
    def target(self) -> np.ndarray:
        return self.values[:, self.target_index]

    def rows(self, index) -> "TimeSeriesFrame":
        return replace(self, timestamps=self.timestamps[index], values=self.values[index],
                       missing_mask=self.missing_mask[index])

    def days(self) -> np.ndarray:
        return self.timestamps.astype("datetime64[D]")

    def hours(self) -> np.ndarray:
        return (self.timestamps.astype("datetime64[h]") - self.days()).astype(int)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["timestamp", *self.feature_names])
            for ts, row, miss in zip(self.timestamps, self.values, self.missing_mask):
                cells = ["" if m else repr(float(v)) for v, m in zip(row, miss)]
                w.writerow([str(ts), *cells])


@dataclass(frozen=True)
class SplitSpec:
    train_ratio: float = 0.6
    val_ratio: float = 0.2
    test_ratio: float = 0.2

    def __post_init__(self):
        ratios = (self.train_ratio, self.val_ratio, self.test_ratio)
        if not all(0.0 < r < 1.0 for r in ratios):
            raise ValueError(f"split ratios must lie in (0, 1), got {ratios}")
        if abs(sum(ratios) - 1.0) > 1e-9:
            raise ValueError(f"split ratios must sum to 1, got {sum(ratios)}")


@dataclass(frozen=True)
class WindowSample:
    input: np.ndarray               # (T_in, D)
    target: np.ndarray              # (T_p,)
    t_anchor: np.datetime64         # timestamp of the last historical step
    task_kind: TaskKind = TaskKind.TASK1
    target_index: int = 0
    future: np.ndarray | None = field(default=None, repr=False)  # (T_p, D) true future rows


# --- loading ---------------------------------------------------------------------

def _parse_float(cell: str) -> float:
    cell = cell.strip()
    if not cell:
        return math.nan
    try:
        v = float(cell)
    except ValueError:
        return math.nan
    return v if math.isfinite(v) else math.nan


def load_csv(path: str | Path, schema: Sequence[str] | None = None,
             target: str | int = 0) -> TimeSeriesFrame:
    """Read ``timestamp,<feature...>`` CSV; empty or non-numeric cells become missing."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"data file not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise EmptyFile(f"{path}: file is empty")
        header = [h.strip() for h in header]
        if not header or header[0].lower() != "timestamp":
            raise SchemaMismatch(f"{path}: first column must be 'timestamp', got {header[:1]}")
        names = header[1:]
        if schema is not None and list(schema) != names:
            raise SchemaMismatch(f"{path}: header {names} does not match expected {list(schema)}")
        stamps, rows = [], []
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise MalformedRow(f"{path}:{line}: expected {len(header)} fields, got {len(row)}")
            try:
                stamps.append(np.datetime64(datetime.fromisoformat(row[0].strip()), "s"))
            except ValueError:
                raise MalformedRow(f"{path}:{line}: unparseable timestamp {row[0]!r}") from None
            rows.append([_parse_float(c) for c in row[1:]])
    if not rows:
        raise EmptyFile(f"{path}: no data rows")
    ts = np.array(stamps, dtype="datetime64[s]")
    vals = np.array(rows, dtype=np.float64)
    order = np.argsort(ts, kind="stable")
    ts, vals = ts[order], vals[order]
    dup = np.nonzero(ts[1:] == ts[:-1])[0]
    if len(dup):
        raise DuplicateTimestamp(f"{path}: duplicated timestamp {ts[dup[0]]}")
    tidx = names.index(target) if isinstance(target, str) else int(target)
    return TimeSeriesFrame(ts, vals, tuple(names), tidx)


# --- cleaning --------------------------------------------------------------------------

def _day_groups(frame: TimeSeriesFrame) -> list[np.ndarray]:
    days = frame.days()
    if len(days) == 0:
        return []
    cuts = np.nonzero(days[1:] != days[:-1])[0] + 1
    return np.split(np.arange(len(days)), cuts)


def _outlier_mask(v: np.ndarray, mad_factor: float = 5.0) -> np.ndarray:
    ok = ~np.isnan(v)
    out = np.zeros(len(v), dtype=bool)
    if not ok.any():
        return out
    med = np.median(v[ok])
    mad = np.median(np.abs(v[ok] - med))
    out[ok] = (np.abs(v[ok] - med) > mad_factor * mad) | (v[ok] < 0)
    return out


def _longest_identical_outlier_run(v: np.ndarray) -> int:
    flags = _outlier_mask(v)
    best = run = 0
    prev = None
    for x, is_out in zip(v, flags):
        if is_out and prev is not None and x == prev:
            run += 1
        else:
            run = 1 if is_out else 0
        prev = x if is_out else None
        best = max(best, run)
    return best


def clean_days(frame: TimeSeriesFrame, zero_ratio_limit: float = 0.8,
               outlier_run_limit: int = 10) -> TimeSeriesFrame:
    """Drop days whose target is mostly missing/zero or that contain a long run of one outlier."""
    keep = []
    for idx in _day_groups(frame):
        y = frame.values[idx, frame.target_index]
        empty = frame.missing_mask[idx, frame.target_index] | (y == 0)
        if empty.sum() / len(idx) > zero_ratio_limit:
            continue
        if _longest_identical_outlier_run(y) >= outlier_run_limit:
            continue
        keep.append(idx)
    if not keep:
        raise EmptyResult("every day was removed by cleaning")
    return frame.rows(np.concatenate(keep))


def _fill_pass(col: np.ndarray, missing: np.ndarray, order: range) -> int:
    filled = 0
    n = len(col)
    for i in order:
        if not missing[i]:
            continue
        neigh = [col[j] for j in (i - 1, i + 1) if 0 <= j < n and not missing[j]]
        if neigh:
            col[i] = sum(neigh) / len(neigh)
            missing[i] = False
            filled += 1
    return filled


def impute(frame: TimeSeriesFrame, max_passes: int = 10) -> TimeSeriesFrame:
    """Zero the target at night hours, then fill gaps from window-3 neighbours, day by day."""
    values = frame.values.copy()
    missing = frame.missing_mask.copy()
    night = np.isin(frame.hours(), list(NIGHT_HOURS))
    values[night, frame.target_index] = 0.0
    missing[night, frame.target_index] = False
    for idx in _day_groups(frame):
        for c in range(values.shape[1]):
            col, miss = values[idx, c], missing[idx, c]
            passes = 0
            while miss.any():
                if passes >= max_passes:
                    raise UnimputableGap(
                        f"{frame.feature_names[c]} on {frame.days()[idx[0]]}: no observed neighbours")
                n = len(col)
                filled = _fill_pass(col, miss, range(n)) + _fill_pass(col, miss, range(n - 1, -1, -1))
                passes += 1
                if filled == 0:
                    raise UnimputableGap(
                        f"{frame.feature_names[c]} on {frame.days()[idx[0]]}: no observed neighbours")
            values[idx, c] = col
            missing[idx, c] = miss
    return replace(frame, values=values, missing_mask=np.zeros_like(missing))


def downsample_hourly(frame: TimeSeriesFrame) -> TimeSeriesFrame:
    """Mean of each clock hour's rows; NaNs are ignored unless the whole hour is missing."""
    hours = frame.timestamps.astype("datetime64[h]")
    if len(hours) == 0:
        return frame
    cuts = np.nonzero(hours[1:] != hours[:-1])[0] + 1
    starts = np.concatenate([[0], cuts])
    obs = np.where(frame.missing_mask, 0.0, frame.values)
    counts = np.add.reduceat((~frame.missing_mask).astype(np.float64), starts, axis=0)
    sums = np.add.reduceat(obs, starts, axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        means = sums / counts
    # single-row hours pass through untouched so hourly input is a fixed point
    single = np.diff(np.concatenate([starts, [len(hours)]])) == 1
    means[single] = frame.values[starts[single]]
    return TimeSeriesFrame(hours[starts].astype("datetime64[s]"), means, frame.feature_names,
                           frame.target_index, counts == 0)


def preprocess(frame: TimeSeriesFrame, zero_ratio_limit: float = 0.8,
               outlier_run_limit: int = 10) -> TimeSeriesFrame:
    return downsample_hourly(impute(clean_days(frame, zero_ratio_limit, outlier_run_limit)))


# --- splitting and windows ----------------------------------------------------------------

def split(frame: TimeSeriesFrame, spec: SplitSpec = SplitSpec(), min_rows: int = 0
          ) -> tuple[TimeSeriesFrame, TimeSeriesFrame, TimeSeriesFrame]:
    n = len(frame)
    n_train = math.floor(n * spec.train_ratio)
    n_val = math.floor(n * spec.val_ratio)
    parts = (frame.rows(slice(0, n_train)), frame.rows(slice(n_train, n_train + n_val)),
             frame.rows(slice(n_train + n_val, n)))
    for name, part in zip(("train", "val", "test"), parts):
        if len(part) < min_rows:
            raise TooSmall(f"{name} split has {len(part)} rows, need at least {min_rows}")
    return parts


def time_features(timestamps: np.ndarray) -> np.ndarray:
    """Hour-of-day, day-of-week, day-of-month and month, each scaled to [-0.5, 0.5]."""
    ts = np.asarray(timestamps, dtype="datetime64[s]")
    days = ts.astype("datetime64[D]")
    hour = (ts.astype("datetime64[h]") - days).astype(int)
    dow = (days.astype(int) + 3) % 7            # 1970-01-01 was a Thursday
    months = days.astype("datetime64[M]")
    dom = (days - months).astype(int)
    month = months.astype(int) % 12
    return np.stack([hour / 23.0, dow / 6.0, dom / 30.0, month / 11.0], axis=-1) - 0.5


def future_noise(rng_seed: int, horizon: int, n_features: int, sigma0: float, gamma: float,
                 feature_std: np.ndarray | None = None) -> np.ndarray:
    """Gaussian noise whose std grows as sigma0 * exp(gamma * h / horizon) for h = 1..horizon."""
    std = np.ones(n_features) if feature_std is None else np.asarray(feature_std, np.float64)
    h = np.arange(1, horizon + 1)[:, None]
    scale = sigma0 * np.exp(gamma * h / horizon) * std[None, :]
    return np.random.default_rng(rng_seed).standard_normal((horizon, n_features)) * scale


def to_task2(sample: WindowSample, sigma0: float = 0.05, gamma: float = 1.0, rng_seed: int = 0,
             feature_std: np.ndarray | None = None) -> WindowSample:
    """Append the noisy future weather rows with the power column zero-padded."""
    if sample.future is None:
        raise MissingFuture(f"window anchored at {sample.t_anchor} has no future rows")
    t_p = len(sample.target)
    if sample.future.shape[0] < t_p:
        raise MissingFuture(f"window anchored at {sample.t_anchor}: {sample.future.shape[0]} future rows < {t_p}")
    fut = sample.future[:t_p] + future_noise(rng_seed, t_p, sample.future.shape[1], sigma0, gamma,
                                             feature_std)
    fut[:, sample.target_index] = 0.0
    return replace(sample, input=np.concatenate([sample.input, fut]), task_kind=TaskKind.TASK2)


class WindowSet(Sequence[WindowSample]):
    """Sliding windows over one frame, stored as start offsets into the frame's arrays."""

    def __init__(self, frame: TimeSeriesFrame, t_s: int, t_p: int, starts: np.ndarray,
                 task_kind: TaskKind = TaskKind.TASK1, sigma0: float = 0.05, gamma: float = 1.0,
                 noise_seed: int = 0, feature_std: np.ndarray | None = None):
        self.frame = frame
        self.t_s, self.t_p = t_s, t_p
        self.starts = np.asarray(starts, dtype=np.int64)
        self.task_kind = TaskKind(task_kind)
        self.sigma0, self.gamma, self.noise_seed = sigma0, gamma, noise_seed
        self.feature_std = feature_std
        self._tf = time_features(frame.timestamps)
        self._noise: np.ndarray | None = None

    @property
    def t_in(self) -> int:
        return self.t_s + (self.t_p if self.task_kind is TaskKind.TASK2 else 0)

    def __len__(self) -> int:
        return len(self.starts)

    def _seed(self, start: int) -> int:
        return int(np.random.SeedSequence([self.noise_seed, int(start)]).generate_state(1)[0])

    def __getitem__(self, i) -> WindowSample:
        if isinstance(i, slice):
            raise TypeError("use batch() for multi-window access")
        s = int(self.starts[i])
        v = self.frame.values
        sample = WindowSample(
            input=v[s:s + self.t_s].copy(), target=v[s + self.t_s:s + self.t_s + self.t_p,
                                                      self.frame.target_index].copy(),
            t_anchor=self.frame.timestamps[s + self.t_s - 1], target_index=self.frame.target_index,
            future=v[s + self.t_s:s + self.t_s + self.t_p].copy())
        if self.task_kind is TaskKind.TASK2:
            sample = to_task2(sample, self.sigma0, self.gamma, self._seed(s), self.feature_std)
        return sample

    def with_task(self, kind: TaskKind, sigma0: float = 0.05, gamma: float = 1.0,
                  noise_seed: int = 0, feature_std: np.ndarray | None = None) -> "WindowSet":
        return WindowSet(self.frame, self.t_s, self.t_p, self.starts, kind, sigma0, gamma,
                         noise_seed, feature_std)

    def _future_noise_all(self) -> np.ndarray:
        if self._noise is None:
            d = self.frame.n_features
            self._noise = np.stack([
                future_noise(self._seed(s), self.t_p, d, self.sigma0, self.gamma, self.feature_std)
                for s in self.starts]) if len(self.starts) else np.zeros((0, self.t_p, d))
        return self._noise

    def batch(self, index) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Stacked (inputs (B, T_in, D), time features (B, T_in, 4), targets (B, T_p))."""
        index = np.asarray(index, dtype=np.int64)
        starts = self.starts[index]
        span = self.t_s + self.t_p
        rows = starts[:, None] + np.arange(span)[None, :]
        block = self.frame.values[rows]
        y = block[:, self.t_s:, self.frame.target_index]
        if self.task_kind is TaskKind.TASK2:
            x = block.copy()
            x[:, self.t_s:] += self._future_noise_all()[index]
            x[:, self.t_s:, self.frame.target_index] = 0.0
            tf = self._tf[rows]
        else:
            x = block[:, :self.t_s]
            tf = self._tf[rows[:, :self.t_s]]
        return x, tf, y

    def __iter__(self) -> Iterator[WindowSample]:
        for i in range(len(self)):
            yield self[i]


def make_windows(frame: TimeSeriesFrame, t_s: int, t_p: int, step: int = 1,
                 granularity: np.timedelta64 = HOUR) -> WindowSet:
    """Windows of t_s + t_p consecutive rows with no timestamp gap, advancing by ``step``."""
    if t_s < 1 or t_p < 1 or step < 1:
        raise ValueError("t_s, t_p and step must be >= 1")
    span = t_s + t_p
    n = len(frame)
    if n < span:
        return WindowSet(frame, t_s, t_p, np.zeros(0, dtype=np.int64))
    gap = np.diff(frame.timestamps) != granularity
    # number of gaps before each row: a window is valid iff its first and last rows agree
    seg = np.concatenate([[0], np.cumsum(gap)])
    first = np.arange(n - span + 1)
    valid = first[seg[first] == seg[first + span - 1]]
    starts, last = [], None
    for s in valid:
        if last is None or s - last >= step or seg[s] != seg[last]:
            starts.append(s)
            last = s
    return WindowSet(frame, t_s, t_p, np.array(starts, dtype=np.int64))


# --- scaling -----------------------------------------------------------------------------

@dataclass(frozen=True)
class Scaler:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, frame: TimeSeriesFrame) -> "Scaler":
        mean = np.nanmean(frame.values, axis=0)
        std = np.nanstd(frame.values, axis=0)
        return cls(mean, np.where(std > 1e-12, std, 1.0))

    def transform(self, frame: TimeSeriesFrame) -> TimeSeriesFrame:
        return replace(frame, values=(frame.values - self.mean) / self.std)

    def inverse_target(self, y: np.ndarray, target_index: int) -> np.ndarray:
        return y * self.std[target_index] + self.mean[target_index]
