"""Ingestion, preprocessing, rolling windows, and a synthetic catchment.

The preprocessing order is: log1p on the flow channel, standardize every
channel to mean 0 / std 1 (population std, computed on the training region
and reused elsewhere), slice into 24-step rolling windows, then drop windows
whose precipitation shows no variation.  Every transform has an exact
inverse so generated values can be reported in physical units.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from datetime import datetime, timedelta

import numpy as np

from .errors import (
    ConfigError,
    DataFormatError,
    DegenerateChannelError,
    DomainError,
    ParseError,
    ShapeError,
)

STEP_SECONDS = 300  # fixed 5-minute sampling interval
CSV_HEADER = ("timestamp", "precipitation_mm", "temperature_c", "flow")
GAN_CHANNELS = ("precipitation_mm", "flow")
WINDOW_LEN = 24

PROV_REAL = 0
PROV_SYNTHETIC = 1
PROV_OVERSAMPLED = 2
PROV_NAMES = {PROV_REAL: "real", PROV_SYNTHETIC: "synthetic", PROV_OVERSAMPLED: "oversampled"}


@dataclass
class SeriesDataset:
    """Fixed-interval multichannel series: rain, temperature, tank inflow."""

    timestamps: np.ndarray  # datetime64[s], strictly increasing, 5-min spacing
    precipitation: np.ndarray
    temperature: np.ndarray
    flow: np.ndarray

    def __post_init__(self):
        n = len(self.timestamps)
        for name in ("precipitation", "temperature", "flow"):
            if len(getattr(self, name)) != n:
                raise ShapeError(f"series: channel {name} length differs from timestamps")
        if np.any(self.precipitation < 0):
            raise DomainError("series: negative precipitation")
        if np.any(self.flow < 0):
            raise DomainError("series: negative flow")

    def __len__(self):
        return len(self.timestamps)

    def channel(self, name):
        return {
            "precipitation_mm": self.precipitation,
            "temperature_c": self.temperature,
            "flow": self.flow,
        }[name]

    def stacked(self, channels):
        return np.stack([self.channel(c) for c in channels], axis=1)


@dataclass
class PreprocStats:
    """Per-channel transform parameters; std is the population value."""

    channels: tuple
    mean: np.ndarray
    std: np.ndarray
    log_flags: tuple

    def transform(self, raw):
        """raw [N, C] in physical units -> standardized (log space where flagged)."""
        out = np.empty_like(raw, dtype=np.float64)
        for i, flag in enumerate(self.log_flags):
            col = raw[..., i]
            if flag:
                col = log_transform(col)
            out[..., i] = (col - self.mean[i]) / self.std[i]
        return out

    def invert(self, pre):
        """Exact inverse of transform."""
        out = np.empty_like(pre, dtype=np.float64)
        for i, flag in enumerate(self.log_flags):
            col = pre[..., i] * self.std[i] + self.mean[i]
            if flag:
                col = np.expm1(col)
            out[..., i] = col
        return out

    def invert_channel(self, values, name):
        i = self.channels.index(name)
        col = values * self.std[i] + self.mean[i]
        return np.expm1(col) if self.log_flags[i] else col


@dataclass
class WindowBatch:
    """Fixed-length frames cut from a series; the unit models consume."""

    data: np.ndarray  # [count, 24, channels]
    channels: tuple
    provenance: np.ndarray  # [count] int8 codes, see PROV_*

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ShapeError(f"windows: need [count, steps, channels], got {self.data.shape}")
        if self.data.shape[1] != WINDOW_LEN:
            raise ShapeError(f"windows: window length must be {WINDOW_LEN}")
        if self.data.shape[2] != len(self.channels):
            raise ShapeError("windows: channel count mismatch")
        if len(self.provenance) != len(self.data):
            raise ShapeError("windows: provenance length mismatch")

    def __len__(self):
        return len(self.data)

    def channel_index(self, name):
        return self.channels.index(name)

    def channel_values(self, name):
        return self.data[:, :, self.channel_index(name)]

    def take(self, indices, provenance=None):
        prov = self.provenance[indices] if provenance is None else np.full(
            len(indices), provenance, dtype=np.int8
        )
        return WindowBatch(self.data[indices], self.channels, prov)

    def provenance_counts(self):
        return {
            PROV_NAMES[code]: int(np.sum(self.provenance == code))
            for code in (PROV_REAL, PROV_SYNTHETIC, PROV_OVERSAMPLED)
        }


def make_batch(data, channels, provenance_code=PROV_REAL):
    prov = np.full(len(data), provenance_code, dtype=np.int8)
    return WindowBatch(np.asarray(data, dtype=np.float64), tuple(channels), prov)


# ---------------------------------------------------------------------------
# CSV ingestion


def load_csv(path):
    """Parse a series file; rejects gaps, bad values, and malformed rows."""
    timestamps = []
    precip = []
    temp = []
    flow = []
    with open(path, newline="", encoding="utf-8-sig") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: empty file") from None
        if tuple(h.strip() for h in header) != CSV_HEADER:
            raise DataFormatError(
                f"{path}: expected header {','.join(CSV_HEADER)}, got {','.join(header)}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise ParseError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            try:
                ts = datetime.fromisoformat(row[0].strip())
            except ValueError:
                raise ParseError(f"{path}:{lineno}: bad timestamp {row[0]!r}") from None
            try:
                p, t, q = (float(row[i]) for i in (1, 2, 3))
            except ValueError:
                raise ParseError(f"{path}:{lineno}: non-numeric value") from None
            if not np.isfinite([p, t, q]).all():
                raise ParseError(f"{path}:{lineno}: non-finite value")
            if p < 0:
                raise ParseError(f"{path}:{lineno}: negative precipitation {p}")
            if q < 0:
                raise ParseError(f"{path}:{lineno}: negative flow {q}")
            if timestamps and (ts - timestamps[-1]) != timedelta(seconds=STEP_SECONDS):
                raise DataFormatError(
                    f"{path}:{lineno}: timestamp {row[0]} breaks the 5-minute spacing"
                )
            timestamps.append(ts)
            precip.append(p)
            temp.append(t)
            flow.append(q)
    if not timestamps:
        raise DataFormatError(f"{path}: no data rows")
    return SeriesDataset(
        timestamps=np.array(timestamps, dtype="datetime64[s]"),
        precipitation=np.array(precip),
        temperature=np.array(temp),
        flow=np.array(flow),
    )


def write_csv(path, dataset):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        stamps = dataset.timestamps.astype("datetime64[s]").astype(object)
        for ts, p, t, q in zip(stamps, dataset.precipitation, dataset.temperature, dataset.flow):
            writer.writerow([ts.isoformat(), repr(float(p)), repr(float(t)), repr(float(q))])


# ---------------------------------------------------------------------------
# transforms


def log_transform(values):
    """log1p, defined at zero; inverse is expm1."""
    values = np.asarray(values, dtype=np.float64)
    if np.any(values < 0):
        raise DomainError("log transform: negative input")
    return np.log1p(values)


def standardize(data, channels, log_flags, stats=None):
    """Per-channel (x - mean) / std; reuses stats when given (test-set path)."""
    data = np.asarray(data, dtype=np.float64)
    if stats is None:
        mean = data.mean(axis=0)
        std = data.std(axis=0)  # population std: the mean-0/std-1 target is exact
        for i, s in enumerate(std):
            if s == 0.0:
                raise DegenerateChannelError(
                    f"standardize: channel {channels[i]!r} has zero variance"
                )
        stats = PreprocStats(tuple(channels), mean, std, tuple(log_flags))
    return (data - stats.mean) / stats.std, stats


def make_windows(data, window_len=WINDOW_LEN, stride=1, channels=GAN_CHANNELS):
    """Rolling windows: count = floor((N - window_len) / stride) + 1."""
    data = np.asarray(data, dtype=np.float64)
    n = len(data)
    if window_len < 1 or stride < 1:
        raise ConfigError("make_windows: window_len and stride must be positive")
    if n < window_len:
        raise ShapeError(f"make_windows: series of length {n} is shorter than {window_len}")
    starts = range(0, n - window_len + 1, stride)
    out = np.stack([data[s : s + window_len] for s in starts])
    return make_batch(out, channels)


def filter_flat_windows(batch, channel="precipitation_mm"):
    """Keep windows whose precipitation varies; order preserved."""
    values = batch.channel_values(channel)
    keep = values.std(axis=1, ddof=1) > 1e-12
    return batch.take(np.flatnonzero(keep))


def flat_window_mask(batch, channel="precipitation_mm"):
    values = batch.channel_values(channel)
    return values.std(axis=1, ddof=1) > 1e-12


def compute_start_token(batch):
    """Per-channel mean over every retained frame and step."""
    if len(batch) == 0:
        raise ShapeError("start token: empty batch")
    return batch.data.mean(axis=(0, 1))


# ---------------------------------------------------------------------------
# synthetic catchment oracle


@dataclass
class SynthConfig:
    """Two-state storm process driving a linear reservoir.

    Rain alternates between dry and wet spells (first-order Markov chain);
    wet steps draw exponential intensities.  Flow follows
    Q_t = alpha * Q_{t-1} + beta * P_t + B_t with a sinusoidal diurnal base
    term B_t >= 0, which leaves the flow distribution skewed toward its
    base values.
    """

    length: int
    alpha: float = 0.9
    beta: float = 6.0
    base_flow: float = 8.0
    base_amplitude: float = 0.15  # fraction of base_flow, < 1 keeps B >= 0
    wet_start_prob: float = 0.006
    wet_stay_prob: float = 0.955
    rain_mean_mm: float = 1.2
    initial_flow: float = None  # default: diurnal-mean equilibrium

    def validate(self):
        if not 0.0 <= self.alpha < 1.0:
            raise ConfigError(f"synth: alpha must be in [0, 1), got {self.alpha}")
        if self.length < 1:
            raise ConfigError("synth: length must be positive")
        for name in ("wet_start_prob", "wet_stay_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"synth: {name} must be a probability, got {v}")
        if not 0.0 <= self.base_amplitude < 1.0:
            raise ConfigError("synth: base_amplitude must be in [0, 1)")


def synth_catchment(config, seed):
    """Deterministic synthetic dataset standing in for the field records.

    Args:
        config: SynthConfig with process parameters.
        seed: RNG seed; the same seed reproduces the dataset bit for bit.

    Returns:
        SeriesDataset of config.length steps at 5-minute spacing.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    n = config.length

    # storm occupancy: dry/wet Markov chain, exponential wet intensities
    uniforms = rng.uniform(size=n)
    intensities = rng.exponential(config.rain_mean_mm, size=n)
    rain = np.zeros(n)
    wet = False
    for t in range(n):
        stay = config.wet_stay_prob if wet else config.wet_start_prob
        wet = uniforms[t] < stay
        if wet:
            rain[t] = intensities[t]

    steps_per_day = 86400 // STEP_SECONDS
    phase = 2.0 * np.pi * (np.arange(n) % steps_per_day) / steps_per_day
    base = (
        config.base_flow
        * (1.0 - config.alpha)
        * (1.0 + config.base_amplitude * np.sin(phase))
    )

    flow = np.zeros(n)
    flow[0] = config.base_flow if config.initial_flow is None else config.initial_flow
    a, b = config.alpha, config.beta
    for t in range(1, n):
        flow[t] = a * flow[t - 1] + b * rain[t] + base[t]

    temperature = 14.0 + 6.0 * np.sin(phase - np.pi / 2) + rng.normal(0.0, 0.4, size=n)

    start = np.datetime64("2017-06-01T00:00:00")
    timestamps = start + np.arange(n) * np.timedelta64(STEP_SECONDS, "s")
    return SeriesDataset(
        timestamps=timestamps.astype("datetime64[s]"),
        precipitation=rain,
        temperature=temperature,
        flow=flow,
    )


def linear_reservoir(rain, alpha, beta, base, q0):
    """Reference recurrence Q_t = alpha Q_{t-1} + beta P_t + B_t, t >= 1."""
    if not 0.0 <= alpha < 1.0:
        raise ConfigError(f"linear reservoir: alpha must be in [0, 1), got {alpha}")
    rain = np.asarray(rain, dtype=np.float64)
    base = np.broadcast_to(np.asarray(base, dtype=np.float64), rain.shape)
    flow = np.zeros_like(rain)
    flow[0] = q0
    for t in range(1, len(rain)):
        flow[t] = alpha * flow[t - 1] + beta * rain[t] + base[t]
    return flow


# ---------------------------------------------------------------------------
# assembled pipeline


@dataclass
class PreparedData:
    windows: WindowBatch  # every rolling window, provenance real
    wet_mask: np.ndarray  # True where the rain channel varies
    stats: PreprocStats


def prepare_series(dataset, channels=GAN_CHANNELS, stride=1, stats=None, stats_steps=None):
    """Run the full preprocessing pipeline over a series.

    ``stats_steps`` limits the standardization statistics to the leading
    training region so held-out windows never leak into them; ``stats``
    short-circuits computation entirely (reuse on new data).
    """
    raw = dataset.stacked(channels)
    log_flags = tuple(c == "flow" for c in channels)
    if stats is None:
        logged = raw.copy()
        for i, flag in enumerate(log_flags):
            if flag:
                logged[:, i] = log_transform(logged[:, i])
        fit_rows = logged if stats_steps is None else logged[:stats_steps]
        _, stats = standardize(fit_rows, channels, log_flags)
    pre = stats.transform(raw)
    windows = make_windows(pre, WINDOW_LEN, stride, channels)
    return PreparedData(windows=windows, wet_mask=flat_window_mask(windows), stats=stats)


def split_train_test(prepared, train_count, test_count):
    """Chronological split: first train_count windows, last test_count."""
    total = len(prepared.windows)
    if train_count + test_count > total:
        raise ConfigError(
            f"split: {train_count} train + {test_count} test exceeds {total} windows"
        )
    idx = np.arange(total)
    train_idx = idx[:train_count] if train_count else idx
    test_idx = idx[total - test_count :] if test_count else idx[:0]
    return (
        prepared.windows.take(train_idx),
        prepared.wet_mask[train_idx],
        prepared.windows.take(test_idx),
    )
