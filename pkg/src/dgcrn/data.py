"""Dataset plumbing: speed series, Z-score stats, windows, splits,
forward-fill imputation, and the synthetic congestion generator.

NaN is the canonical missing sentinel everywhere inside the package; files
that mark missing readings as 0.0 are converted at load time. Z-score
statistics are always fit on the training split only, over observed entries.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from datetime import datetime, timezone

import numpy as np

from .errors import ConfigError, DegenerateInputError, DimensionError

DAY_SECONDS = 86400
WEEK_SECONDS = 7 * DAY_SECONDS


@dataclass
class SpeedSeries:
    """T x N speed readings on a uniform clock grid."""

    values: np.ndarray
    dt_seconds: int = 300
    start_epoch: int = 0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise DimensionError("values must be T x N with T,N >= 1; got %r" % (v.shape,))
        if self.dt_seconds <= 0:
            raise ConfigError("dt_seconds must be positive; got %r" % (self.dt_seconds,))
        self.values = v
        self.dt_seconds = int(self.dt_seconds)
        self.start_epoch = int(self.start_epoch)

    @property
    def n_steps(self) -> int:
        return self.values.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.values.shape[1]

    def timestamps(self) -> np.ndarray:
        return self.start_epoch + np.arange(self.n_steps, dtype=np.int64) * self.dt_seconds

    def time_of_day(self) -> np.ndarray:
        """Scalar channel in [0,1): seconds since midnight over a day."""
        return (self.timestamps() % DAY_SECONDS) / float(DAY_SECONDS)

    def slice_steps(self, start: int, stop: int) -> "SpeedSeries":
        if not 0 <= start < stop <= self.n_steps:
            raise DimensionError(
                "slice [%d, %d) out of range for %d steps" % (start, stop, self.n_steps)
            )
        return SpeedSeries(
            self.values[start:stop].copy(),
            self.dt_seconds,
            self.start_epoch + start * self.dt_seconds,
        )


def mask_zero_sentinel(values: np.ndarray) -> np.ndarray:
    """Convert the 0.0-as-missing convention to NaN."""
    v = np.asarray(values, dtype=np.float64).copy()
    v[v == 0.0] = np.nan
    return v


# -- normalization ---------------------------------------------------------------


@dataclass
class NormStats:
    mean: float
    std: float

    @classmethod
    def fit(cls, values) -> "NormStats":
        v = np.asarray(values, dtype=np.float64)
        obs = v[np.isfinite(v)]
        if obs.size == 0:
            raise DegenerateInputError("cannot fit normalization: no observed entries")
        std = float(obs.std())
        if std == 0.0:
            raise DegenerateInputError("cannot fit normalization: zero variance")
        return cls(mean=float(obs.mean()), std=std)


def normalize(x, stats: NormStats, direction: str = "forward") -> np.ndarray:
    """Z-score transform; NaN sentinels pass through untouched."""
    if stats.std <= 0.0:
        raise DegenerateInputError("normalization std must be positive; got %r" % (stats.std,))
    x = np.asarray(x, dtype=np.float64)
    if direction == "forward":
        return (x - stats.mean) / stats.std
    if direction == "inverse":
        return x * stats.std + stats.mean
    raise ConfigError("direction must be 'forward' or 'inverse'; got %r" % (direction,))


# -- splitting ----------------------------------------------------------------------


def split(series: SpeedSeries, kind: str, train, val, test):
    """Chronological train/val/test segments.

    kind='ratio': fractions summing to 1, floor arithmetic, remainder to
    test. kind='days': whole-day counts that must tile the series exactly.
    """
    t_total = series.n_steps
    if kind == "ratio":
        fracs = (float(train), float(val), float(test))
        if any(f < 0 for f in fracs) or abs(sum(fracs) - 1.0) > 1e-9:
            raise ConfigError("split ratios must be nonnegative and sum to 1; got %r" % (fracs,))
        n_train = int(t_total * fracs[0])
        n_val = int(t_total * fracs[1])
        n_test = t_total - n_train - n_val
    elif kind == "days":
        if DAY_SECONDS % series.dt_seconds != 0:
            raise ConfigError(
                "day split needs dt_seconds dividing a day; got %d" % series.dt_seconds
            )
        spd = DAY_SECONDS // series.dt_seconds
        days = (int(train), int(val), int(test))
        if any(d < 0 for d in days):
            raise ConfigError("day counts must be nonnegative; got %r" % (days,))
        want = sum(days) * spd
        if want != t_total:
            raise ConfigError(
                "day split %r covers %d steps but the series has %d (%.2f days)"
                % (days, want, t_total, t_total / spd)
            )
        n_train, n_val, n_test = (d * spd for d in days)
    else:
        raise ConfigError("split kind must be 'ratio' or 'days'; got %r" % (kind,))
    if min(n_train, n_val, n_test) < 1:
        raise ConfigError(
            "split produces an empty segment (train=%d val=%d test=%d)"
            % (n_train, n_val, n_test)
        )
    a = series.slice_steps(0, n_train)
    b = series.slice_steps(n_train, n_train + n_val)
    c = series.slice_steps(n_train + n_val, t_total)
    return a, b, c


# -- windowing ---------------------------------------------------------------------


@dataclass
class SampleSet:
    """Model-ready windows for one contiguous segment."""

    x: np.ndarray          # S x P x N x 2, speed channel normalized
    y: np.ndarray          # S x Q x N raw units, missing -> 0.0
    tod: np.ndarray        # S x Q target time-of-day in [0,1)
    mask: np.ndarray       # S x Q x N, 1.0 observed / 0.0 missing
    target_ts: np.ndarray  # S x Q epoch seconds

    def __len__(self) -> int:
        return self.x.shape[0]


def _sliding(arr: np.ndarray, window: int) -> np.ndarray:
    # (T, ...) -> (T-window+1, window, ...)
    view = np.lib.stride_tricks.sliding_window_view(arr, window, axis=0)
    return np.moveaxis(view, -1, 1)


def make_windows(series: SpeedSeries, input_len: int, output_len: int,
                 stats: NormStats | None = None,
                 filled: np.ndarray | None = None) -> SampleSet:
    """Stride-1 windows: P input steps then Q label steps.

    filled supplies the imputed values for the input channel (defaults to
    the raw values); labels and masks always come from the raw series so
    imputed entries never count as observed.
    """
    if input_len < 1 or output_len < 1:
        raise ConfigError("input_len and output_len must be >= 1")
    t_total, n = series.values.shape
    count = t_total - input_len - output_len + 1
    if count <= 0:
        warnings.warn(
            "segment of %d steps is shorter than P+Q=%d; no windows"
            % (t_total, input_len + output_len),
            stacklevel=2,
        )
        return SampleSet(
            x=np.zeros((0, input_len, n, 2)),
            y=np.zeros((0, output_len, n)),
            tod=np.zeros((0, output_len)),
            mask=np.zeros((0, output_len, n)),
            target_ts=np.zeros((0, output_len), dtype=np.int64),
        )
    raw = series.values
    src = raw if filled is None else np.asarray(filled, dtype=np.float64)
    if src.shape != raw.shape:
        raise DimensionError(
            "filled values shape %r does not match series %r" % (src.shape, raw.shape)
        )
    speed_in = src if stats is None else normalize(src, stats)
    tod_all = series.time_of_day()
    ts_all = series.timestamps()

    x_speed = _sliding(speed_in, input_len)[:count]              # S x P x N
    x_tod = _sliding(tod_all, input_len)[:count]                 # S x P
    x = np.stack(
        [x_speed, np.broadcast_to(x_tod[:, :, None], x_speed.shape)], axis=-1
    ).astype(np.float64)

    y_raw = _sliding(raw, output_len)[input_len:input_len + count]
    mask = np.isfinite(y_raw).astype(np.float64)
    y = np.nan_to_num(y_raw, nan=0.0)
    tod = _sliding(tod_all, output_len)[input_len:input_len + count].copy()
    target_ts = _sliding(ts_all, output_len)[input_len:input_len + count].copy()
    return SampleSet(x=x, y=y, tod=tod, mask=mask, target_ts=target_ts)


# -- imputation --------------------------------------------------------------------


def impute_last(series: SpeedSeries, lead_fill: np.ndarray | None = None) -> SpeedSeries:
    """Forward-fill missing entries per node.

    Leading gaps take lead_fill (the node's training-period mean) when
    given, otherwise the node's own observed mean within this series.
    """
    v = series.values
    t_total, n = v.shape
    valid = np.isfinite(v)
    if lead_fill is None:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            lead = np.nanmean(v, axis=0)
    else:
        lead = np.asarray(lead_fill, dtype=np.float64)
        if lead.shape != (n,):
            raise DimensionError(
                "lead_fill must have shape (%d,); got %r" % (n, lead.shape)
            )
    dead = np.flatnonzero(~np.isfinite(lead))
    if dead.size:
        raise DegenerateInputError(
            "node %d has no observed values to impute from" % int(dead[0])
        )
    idx = np.where(valid, np.arange(t_total)[:, None], -1)
    idx = np.maximum.accumulate(idx, axis=0)
    gathered = v[np.maximum(idx, 0), np.arange(n)[None, :]]
    out = np.where(idx >= 0, gathered, lead[None, :])
    return SpeedSeries(out, series.dt_seconds, series.start_epoch)


# -- dataset orchestration ------------------------------------------------------------


@dataclass
class WindowedDataset:
    train: SampleSet
    val: SampleSet
    test: SampleSet
    stats: NormStats
    input_len: int
    output_len: int
    n_nodes: int


def build_dataset(series: SpeedSeries, input_len: int, output_len: int,
                  split_kind: str, split_train, split_val, split_test,
                  stats: NormStats | None = None) -> WindowedDataset:
    """Split, fit stats on train, impute, and window each segment."""
    seg_train, seg_val, seg_test = split(series, split_kind, split_train, split_val, split_test)
    if stats is None:
        stats = NormStats.fit(seg_train.values)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        train_means = np.nanmean(seg_train.values, axis=0)
    sets = []
    for seg in (seg_train, seg_val, seg_test):
        filled = impute_last(seg, lead_fill=train_means).values
        sets.append(make_windows(seg, input_len, output_len, stats, filled))
    for name, s in zip(("train", "val", "test"), sets):
        if len(s) == 0:
            raise ConfigError("%s split yields no windows; segment too short" % name)
    return WindowedDataset(
        train=sets[0], val=sets[1], test=sets[2], stats=stats,
        input_len=input_len, output_len=output_len, n_nodes=series.n_nodes,
    )


# -- synthetic data -------------------------------------------------------------------


def synth_distances(n_nodes: int, seed: int, box: float = 10.0) -> np.ndarray:
    """Euclidean distances between uniform random points in a box."""
    if n_nodes < 2:
        raise ConfigError("need at least 2 nodes; got %d" % n_nodes)
    rng = np.random.default_rng(seed)
    pos = rng.uniform(0.0, box, (n_nodes, 2))
    d = np.linalg.norm(pos[:, None, :] - pos[None, :, :], axis=-1)
    np.fill_diagonal(d, 0.0)
    return d


def synth_generate(n_nodes: int, n_days: int, graph, seed: int,
                   congestion_rate: float = 0.002, noise_std: float = 1.0,
                   dt_seconds: int = 300, start_epoch: int = 0) -> SpeedSeries:
    """Free-flow 60 with a per-node daily sinusoid dip, plus congestion
    events that pull speed toward 15 and spread to out-neighbors with a
    one-step lag and damping 0.6. Deterministic per seed.
    """
    if n_days < 1:
        raise ConfigError("n_days must be >= 1; got %d" % n_days)
    if graph.n_nodes != n_nodes:
        raise DimensionError(
            "graph has %d nodes, requested %d" % (graph.n_nodes, n_nodes)
        )
    if not 0.0 <= congestion_rate < 1.0:
        raise ConfigError("congestion_rate must lie in [0,1); got %r" % (congestion_rate,))
    rng = np.random.default_rng(seed)
    spd = DAY_SECONDS // dt_seconds
    t_total = n_days * spd
    n = n_nodes

    tod = ((start_epoch + np.arange(t_total) * dt_seconds) % DAY_SECONDS) / DAY_SECONDS
    amp = rng.uniform(6.0, 12.0, n)
    phase = rng.uniform(0.0, 2.0 * np.pi, n)
    base = 60.0 - amp[None, :] * (0.5 + 0.5 * np.sin(2.0 * np.pi * tod[:, None] + phase[None, :]))

    # congestion sources: event start cells with random plateau durations
    starts = rng.random((t_total, n)) < congestion_rate
    durations = rng.integers(6, 25, size=(t_total, n))
    c_src = np.zeros((t_total, n))
    for t, v in np.argwhere(starts):
        c_src[t:t + durations[t, v], v] = 1.0

    # spread along directed edges with one-step lag and damping 0.6
    neighbor = (graph.adjacency > 0.0) & ~np.eye(n, dtype=bool)
    c = np.zeros((t_total, n))
    c[0] = c_src[0]
    for t in range(1, t_total):
        inbound = np.where(neighbor, c[t - 1][:, None], 0.0).max(axis=0)
        c[t] = np.maximum(c_src[t], 0.6 * inbound)

    speed = base - c * (base - 15.0)
    speed = speed + noise_std * rng.standard_normal((t_total, n))
    return SpeedSeries(speed, dt_seconds, start_epoch)


# -- text file interface ----------------------------------------------------------------


def _iso(ts: int) -> str:
    return datetime.fromtimestamp(int(ts), tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%S")


def _from_iso(text: str) -> int:
    d = datetime.fromisoformat(text)
    if d.tzinfo is None:
        d = d.replace(tzinfo=timezone.utc)
    return int(d.timestamp())


def write_speed_csv(series: SpeedSeries, path):
    """`timestamp,<node...>` rows; missing entries are left empty."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["timestamp"] + [str(i) for i in range(series.n_nodes)])
        ts = series.timestamps()
        for t in range(series.n_steps):
            row = [_iso(ts[t])]
            for v in series.values[t]:
                row.append("" if not np.isfinite(v) else repr(float(v)))
            writer.writerow(row)


def load_speed_csv(path, zero_as_missing: bool = False) -> SpeedSeries:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "timestamp" or len(header) < 2:
            raise ConfigError("%s: expected header 'timestamp,<node columns>'" % path)
        n = len(header) - 1
        stamps = []
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != n + 1:
                raise ConfigError(
                    "%s:%d: expected %d fields, got %d" % (path, lineno, n + 1, len(row))
                )
            try:
                stamps.append(_from_iso(row[0]))
            except ValueError:
                raise ConfigError("%s:%d: bad timestamp %r" % (path, lineno, row[0])) from None
            vals = [float(f) if f.strip() != "" else np.nan for f in row[1:]]
            rows.append(vals)
    if not rows:
        raise DegenerateInputError("%s: no data rows" % path)
    values = np.asarray(rows, dtype=np.float64)
    if zero_as_missing:
        values = mask_zero_sentinel(values)
    stamps = np.asarray(stamps, dtype=np.int64)
    if len(stamps) > 1:
        deltas = np.diff(stamps)
        if np.any(deltas != deltas[0]) or deltas[0] <= 0:
            raise ConfigError("%s: timestamps must increase by a constant step" % path)
        dt = int(deltas[0])
    else:
        dt = 300
    return SpeedSeries(values, dt, int(stamps[0]))
