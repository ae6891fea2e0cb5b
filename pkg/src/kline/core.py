"""Domain types for K-line (OHLCVA candlestick) series.

A bar carries open/high/low/close prices plus volume and amount (turnover).
Volume and amount each have a presence flag so that imputed zeros remain
distinguishable from genuinely observed zeros.  Timestamps are integer epoch
seconds, UTC, stamped at the bar's opening time.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

__all__ = [
    "Frequency",
    "KLineRecord",
    "KLineSeries",
    "Segment",
    "Violation",
    "validate_series",
    "slice_series",
]

_SECONDS_PER_DAY = 86_400
_SECONDS_PER_WEEK = 7 * _SECONDS_PER_DAY
# 1970-01-01 was a Thursday; day number 4 is the first Monday of the epoch.
_EPOCH_MONDAY_OFFSET = 4

# Channel order used by every matrix-valued view of a series.
CHANNELS = ("open", "high", "low", "close", "volume", "amount")
N_CHANNELS = len(CHANNELS)


class Frequency(enum.Enum):
    """Sampling frequency of a bar series, keyed by its canonical label."""

    MIN_1 = "1min"
    MIN_5 = "5min"
    MIN_10 = "10min"
    MIN_15 = "15min"
    MIN_20 = "20min"
    MIN_30 = "30min"
    MIN_40 = "40min"
    MIN_60 = "60min"
    HOUR_2 = "2h"
    HOUR_4 = "4h"
    DAILY = "daily"
    WEEKLY = "weekly"

    @property
    def bar_seconds(self) -> int:
        return _BAR_SECONDS[self]

    @property
    def is_intraday(self) -> bool:
        return self.bar_seconds < _SECONDS_PER_DAY

    @classmethod
    def from_label(cls, label: str) -> "Frequency":
        try:
            return cls(label.strip().lower())
        except ValueError:
            valid = ", ".join(f.value for f in cls)
            raise ValueError(f"unknown frequency {label!r}; expected one of: {valid}") from None


_BAR_SECONDS = {
    Frequency.MIN_1: 60,
    Frequency.MIN_5: 300,
    Frequency.MIN_10: 600,
    Frequency.MIN_15: 900,
    Frequency.MIN_20: 1200,
    Frequency.MIN_30: 1800,
    Frequency.MIN_40: 2400,
    Frequency.MIN_60: 3600,
    Frequency.HOUR_2: 7200,
    Frequency.HOUR_4: 14400,
    Frequency.DAILY: _SECONDS_PER_DAY,
    Frequency.WEEKLY: _SECONDS_PER_WEEK,
}


@dataclass(frozen=True)
class KLineRecord:
    """One bar.  Prices may be NaN before cleaning; that marks them missing.

    ``volume_present`` / ``amount_present`` are False once a missing value
    has been imputed to zero, so downstream normalization can treat the
    channel as absent rather than as an observed zero.
    """

    timestamp: int
    open: float
    high: float
    low: float
    close: float
    volume: float
    amount: float
    volume_present: bool = True
    amount_present: bool = True

    def has_missing_price(self) -> bool:
        return not (
            math.isfinite(self.open)
            and math.isfinite(self.high)
            and math.isfinite(self.low)
            and math.isfinite(self.close)
        )


@dataclass(frozen=True)
class KLineSeries:
    """An ordered run of bars for one asset at one frequency."""

    asset_id: str
    frequency: Frequency
    records: tuple[KLineRecord, ...]

    def __post_init__(self) -> None:
        if not isinstance(self.records, tuple):
            object.__setattr__(self, "records", tuple(self.records))

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[KLineRecord]:
        return iter(self.records)

    def __getitem__(self, index: int) -> KLineRecord:
        return self.records[index]

    def timestamps(self) -> np.ndarray:
        return np.array([r.timestamp for r in self.records], dtype=np.int64)

    def to_matrix(self) -> np.ndarray:
        """Return the [T x 6] float matrix in OHLCVA channel order."""
        out = np.empty((len(self.records), N_CHANNELS), dtype=np.float64)
        for i, r in enumerate(self.records):
            out[i, 0] = r.open
            out[i, 1] = r.high
            out[i, 2] = r.low
            out[i, 3] = r.close
            out[i, 4] = r.volume
            out[i, 5] = r.amount
        return out

    def presence_mask(self) -> np.ndarray:
        """[T x 2] booleans: columns are volume_present, amount_present."""
        return np.array(
            [(r.volume_present, r.amount_present) for r in self.records], dtype=bool
        )

    def replace_records(self, records: Iterable[KLineRecord]) -> "KLineSeries":
        return KLineSeries(self.asset_id, self.frequency, tuple(records))


@dataclass(frozen=True)
class Segment:
    """Half-open index range [start, end) into a parent series."""

    asset_id: str
    frequency: Frequency
    start: int
    end: int

    def __post_init__(self) -> None:
        if not (0 <= self.start < self.end):
            raise ValueError(f"segment range [{self.start}, {self.end}) is empty or negative")

    def __len__(self) -> int:
        return self.end - self.start


@dataclass(frozen=True)
class Violation:
    """One validation finding: the bar index and the rule it broke."""

    index: int
    rule: str
    detail: str = field(default="", compare=False)


def _aligned(timestamp: int, frequency: Frequency) -> bool:
    if frequency is Frequency.WEEKLY:
        if timestamp % _SECONDS_PER_DAY != 0:
            return False
        day = timestamp // _SECONDS_PER_DAY
        return day % 7 == _EPOCH_MONDAY_OFFSET
    return timestamp % frequency.bar_seconds == 0


def validate_series(series: KLineSeries) -> list[Violation]:
    """Report every invariant breach without mutating the series.

    Rules checked per bar:
      * timestamp_order  - timestamps strictly increase
      * bar_alignment    - timestamp sits on the frequency grid
                           (weekly bars are stamped Monday 00:00 UTC)
      * ohlc_bounds      - low <= min(open, close) <= max(open, close) <= high,
                           only when all four prices are finite
      * negative_volume / negative_amount - observed values must be >= 0

    An empty series is valid.  Missing (NaN) prices are legitimate
    pre-cleaning data and are not violations.
    """
    out: list[Violation] = []
    prev_ts: int | None = None
    for i, r in enumerate(series.records):
        if prev_ts is not None and r.timestamp <= prev_ts:
            out.append(Violation(i, "timestamp_order", f"{r.timestamp} after {prev_ts}"))
        prev_ts = r.timestamp
        if not _aligned(r.timestamp, series.frequency):
            out.append(
                Violation(i, "bar_alignment", f"{r.timestamp} off the {series.frequency.value} grid")
            )
        if not r.has_missing_price():
            lo, hi = min(r.open, r.close), max(r.open, r.close)
            if not (r.low <= lo and hi <= r.high):
                out.append(
                    Violation(
                        i,
                        "ohlc_bounds",
                        f"o={r.open} h={r.high} l={r.low} c={r.close}",
                    )
                )
        if r.volume_present and math.isfinite(r.volume) and r.volume < 0:
            out.append(Violation(i, "negative_volume", f"volume={r.volume}"))
        if r.amount_present and math.isfinite(r.amount) and r.amount < 0:
            out.append(Violation(i, "negative_amount", f"amount={r.amount}"))
    return out


def slice_series(series: KLineSeries, segment: Segment) -> KLineSeries:
    """Materialize the bars a segment points at.

    Raises IndexError when the segment range falls outside the series and
    ValueError when the segment belongs to a different asset or frequency.
    """
    if segment.asset_id != series.asset_id or segment.frequency != series.frequency:
        raise ValueError(
            f"segment for ({segment.asset_id}, {segment.frequency.value}) does not match "
            f"series ({series.asset_id}, {series.frequency.value})"
        )
    if segment.end > len(series):
        raise IndexError(
            f"segment [{segment.start}, {segment.end}) exceeds series length {len(series)}"
        )
    return series.replace_records(series.records[segment.start : segment.end])
