"""Series ingestion, synthetic generators, windowing and splits."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .exceptions import ConfigurationError, ContractError, ParseError

logger = logging.getLogger(__name__)

DEFAULT_SCHEMA = {"id": "series_id", "timestamp": "timestamp", "value": "value"}
SAMPLE_INTERVAL = 300  # seconds; CGM-style 5 minute cadence for synthetic data


@dataclass
class RawSeries:
    series_id: str
    timestamps: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.timestamps.shape != self.values.shape or self.values.ndim != 1:
            raise ContractError("timestamps and values must be 1-d and equally long")
        if np.any(np.diff(self.timestamps) <= 0):
            raise ContractError(f"{self.series_id}: timestamps not strictly increasing")
        if not np.all(np.isfinite(self.values)):
            raise ContractError(f"{self.series_id}: non-finite values")

    def __len__(self):
        return len(self.values)


@dataclass(frozen=True)
class SeriesWindow:
    history: np.ndarray
    target: np.ndarray
    series_id: str
    origin_index: int


@dataclass(frozen=True)
class SplitSpec:
    train_ids: frozenset
    val_ids: frozenset
    test_ids: frozenset
    stride: int = 1

    def __post_init__(self):
        if (self.train_ids & self.val_ids or self.train_ids & self.test_ids
                or self.val_ids & self.test_ids):
            raise ContractError("split id sets must be pairwise disjoint")


@dataclass
class IngestResult:
    """Series read from a CSV file plus row accounting."""

    series: list = field(default_factory=list)
    dropped_rows: int = 0
    duplicate_rows: int = 0
    implausible_rows: int = 0
    skipped_series: int = 0

    def __iter__(self):
        return iter(self.series)

    def __len__(self):
        return len(self.series)

    def __getitem__(self, i):
        return self.series[i]


def _parse_timestamp(text: str) -> float:
    text = text.strip()
    try:
        return float(int(text))
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    dt = datetime.fromisoformat(text.replace("Z", "+00:00"))
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.timestamp()


def ingest_csv(path, schema=None, value_bounds=None) -> IngestResult:
    """Read ``series_id,timestamp,value`` rows into one RawSeries per id.

    ``schema`` maps the keys ``id``, ``timestamp`` and ``value`` to column
    names.  Rows with non-finite values are dropped and counted; so are rows
    outside ``value_bounds`` (``(low, high)``, either side may be None) and
    rows repeating a timestamp already seen for their series.
    """
    cols = dict(DEFAULT_SCHEMA)
    cols.update(schema or {})
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    lo, hi = value_bounds if value_bounds is not None else (None, None)

    result = IngestResult()
    rows: dict[str, list] = {}
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file (header required)", line=1) from None
        header = [h.strip() for h in header]
        try:
            i_id, i_ts, i_val = (header.index(cols[k]) for k in ("id", "timestamp", "value"))
        except ValueError as exc:
            raise ParseError(f"header missing a required column: {exc}", line=1) from None
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", line=line)
            try:
                ts = _parse_timestamp(row[i_ts])
            except ValueError:
                raise ParseError(f"bad timestamp {row[i_ts]!r}", line=line) from None
            try:
                val = float(row[i_val])
            except ValueError:
                raise ParseError(f"bad value {row[i_val]!r}", line=line) from None
            if not math.isfinite(val):
                result.dropped_rows += 1
                continue
            if (lo is not None and val < lo) or (hi is not None and val > hi):
                result.implausible_rows += 1
                continue
            rows.setdefault(row[i_id].strip(), []).append((ts, val))

    for sid in sorted(rows):
        pairs = sorted(rows[sid], key=lambda p: p[0])
        kept = []
        for ts, val in pairs:
            if kept and kept[-1][0] == ts:
                result.duplicate_rows += 1
                continue
            kept.append((ts, val))
        if not kept:
            result.skipped_series += 1
            continue
        ts, vals = zip(*kept)
        result.series.append(RawSeries(sid, np.array(ts), np.array(vals)))
    if result.dropped_rows or result.duplicate_rows or result.implausible_rows:
        logger.warning("ingest %s: dropped %d non-finite, %d duplicate, %d implausible rows",
                       path, result.dropped_rows, result.duplicate_rows,
                       result.implausible_rows)
    return result


def write_csv(series, path, schema=None) -> None:
    cols = dict(DEFAULT_SCHEMA)
    cols.update(schema or {})
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([cols["id"], cols["timestamp"], cols["value"]])
        for s in series:
            for t, v in zip(s.timestamps, s.values):
                w.writerow([s.series_id, int(t) if float(t).is_integer() else repr(float(t)),
                            repr(float(v))])


def nominal_interval(series: RawSeries) -> float:
    if len(series) < 2:
        return float("inf")
    return float(np.median(np.diff(series.timestamps)))


def make_windows(series: RawSeries, T: int, L: int, stride: int = 1, max_gap=None):
    """Cut ``(history, target)`` windows of lengths ``T`` and ``L``.

    Windows containing an inter-sample gap larger than ``max_gap`` seconds
    (default 1.5 times the median sampling interval) are discarded.
    """
    if T < 1 or L < 1 or stride < 1:
        raise ContractError("T, L and stride must all be >= 1")
    n = len(series)
    span = T + L
    if n < span:
        return []
    if max_gap is None:
        max_gap = 1.5 * nominal_interval(series)
    bad = np.diff(series.timestamps) > max_gap
    # bad_before[i] = number of oversized gaps among the first i diffs
    bad_before = np.concatenate([[0], np.cumsum(bad)])
    out = []
    for start in range(0, n - span + 1, stride):
        stop = start + span
        if bad_before[stop - 1] - bad_before[start] > 0:
            continue
        out.append(SeriesWindow(
            history=series.values[start:start + T].copy(),
            target=series.values[start + T:stop].copy(),
            series_id=series.series_id,
            origin_index=start,
        ))
    return out


def windows_to_arrays(windows):
    """Stack windows into ``(X, y)`` arrays of shape ``(n, T)`` and ``(n, L)``."""
    if not windows:
        raise ContractError("no windows to stack")
    X = np.stack([w.history for w in windows])
    y = np.stack([w.target for w in windows])
    return X, y


def split_series(series_ids, val_fraction=0.15, test_fraction=0.15, seed=0, stride=1):
    """Assign whole series to train/val/test.  Never splits within a series."""
    ids = sorted(set(series_ids))
    if not ids:
        raise ContractError("no series to split")
    rng = np.random.default_rng(seed)
    order = [ids[i] for i in rng.permutation(len(ids))]
    n = len(order)
    n_test = int(round(test_fraction * n))
    n_val = int(round(val_fraction * n))
    if n >= 3:
        n_test = max(n_test, 1) if test_fraction > 0 else 0
        n_val = max(n_val, 1) if val_fraction > 0 else 0
    n_test = min(n_test, n - 1)
    n_val = min(n_val, n - 1 - n_test)
    test = frozenset(order[:n_test])
    val = frozenset(order[n_test:n_test + n_val])
    train = frozenset(order[n_test + n_val:])
    return SplitSpec(train, val, test, stride)


# ---------------------------------------------------------------------------
# synthetic generators

def _ar2(rng, n, mean, a1, a2, noise, burn=200):
    x = np.full(n + burn, float(mean))
    eps = rng.standard_normal(n + burn) * noise
    for t in range(2, n + burn):
        x[t] = mean + a1 * (x[t - 1] - mean) + a2 * (x[t - 2] - mean) + eps[t]
    return x[burn:]


def ar2_lag1_autocorrelation(a1: float, a2: float) -> float:
    """Theoretical lag-1 autocorrelation of a stationary AR(2) process."""
    return a1 / (1.0 - a2)


def _regime_switch(rng, n, p_switch=0.01, drop_rate=0.004):
    # quasi-periodic regimes (complex AR roots of modulus 0.98, periods of
    # about 48 and 72 samples) so multi-step structure is forecastable
    regimes = (
        dict(mean=150.0, a1=1.9432, a2=-0.9604, noise=1.2),
        dict(mean=105.0, a1=1.9525, a2=-0.9604, noise=0.7),
    )
    x = np.empty(n)
    hist = [regimes[0]["mean"]] * 2
    state = int(rng.integers(2))
    deficit = np.zeros(n)
    t = 0
    while t < n:
        if rng.random() < drop_rate:
            depth = rng.uniform(50.0, 90.0)
            fall = int(rng.integers(4, 9))
            rise = int(rng.integers(12, 30))
            shape = np.concatenate([np.linspace(0, 1, fall, endpoint=False),
                                    np.linspace(1, 0, rise)])
            seg = deficit[t:t + len(shape)]
            seg += depth * shape[:len(seg)]
            t += len(shape)
        t += 1
    for t in range(n):
        if rng.random() < p_switch:
            state = 1 - state
        r = regimes[state]
        v = (r["mean"] + r["a1"] * (hist[-1] - r["mean"]) + r["a2"] * (hist[-2] - r["mean"])
             + rng.standard_normal() * r["noise"])
        hist = [hist[-1], v]
        x[t] = v
    return np.clip(x - deficit, 40.0, 400.0)


def gen_synthetic(kind: str, n_series: int, length: int, seed: int, *,
                  mean=140.0, a1=1.5, a2=-0.6, noise=5.0, amplitude=30.0,
                  period=288, interval=SAMPLE_INTERVAL):
    """Deterministic synthetic series.

    ``ar2`` is a stationary AR(2) around ``mean``; ``seasonal`` adds a
    sinusoid of ``amplitude`` and ``period`` samples; ``regime-switch``
    alternates between two AR(2) regimes and superimposes occasional sharp
    drops into the low range.
    """
    kinds = ("ar2", "seasonal", "regime-switch")
    if kind not in kinds:
        raise ConfigurationError(f"unknown synthetic kind {kind!r}; expected one of {kinds}")
    if n_series < 1 or length < 1:
        raise ConfigurationError("n_series and length must be >= 1")
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_series):
        if kind == "regime-switch":
            vals = _regime_switch(rng, length)
        else:
            vals = _ar2(rng, length, mean, a1, a2, noise)
            if kind == "seasonal":
                phase = rng.uniform(0, 2 * np.pi)
                vals = vals + amplitude * np.sin(2 * np.pi * np.arange(length) / period + phase)
        ts = np.arange(length, dtype=np.float64) * interval
        out.append(RawSeries(f"{kind}-{i:03d}", ts, vals))
    return out
