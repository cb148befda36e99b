"""Calendar and trend features for interaction timestamps.

Every timestamp is reduced to a UTC day. A day is described by a 16-dim
calendar block and a 9-dim block of windowed count trends, 25 dims total.
"""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

SECONDS_PER_DAY = 86_400
TREND_GAPS = (90, 30, 7, 1)

STAT_DIM = 16
STRUCT_DIM = 9
FEATURE_DIM = STAT_DIM + STRUCT_DIM

WEEKDAY_SLOTS = 8
SEASON_SLOTS = 5
_WEEKDAY_OFFSET = 3
_SEASON_OFFSET = _WEEKDAY_OFFSET + WEEKDAY_SLOTS

WINTER, SPRING, SUMMER, AUTUMN = 1, 2, 3, 4
SEASON_NAMES = {WINTER: "winter", SPRING: "spring", SUMMER: "summer", AUTUMN: "autumn"}


def day_index(t: int) -> int:
    """UTC day number (days since 1970-01-01) of a unix timestamp."""
    if t < 0:
        raise ValueError(f"timestamp must be non-negative, got {t}")
    return int(t) // SECONDS_PER_DAY


def utc_date(t: int) -> dt.date:
    return dt.date(1970, 1, 1) + dt.timedelta(days=day_index(t))


def season_of_month(month: int) -> int:
    """Meteorological season slot: Dec-Feb winter, Mar-May spring, ..."""
    return (WINTER, SPRING, SUMMER, AUTUMN)[(month % 12) // 3]


@dataclass(frozen=True)
class CalendarContext:
    earliest_year: int
    earliest_day: int

    @classmethod
    def from_timestamps(cls, timestamps: Iterable[int]) -> "CalendarContext":
        earliest = min(int(t) for t in timestamps)
        return cls(earliest_year=utc_date(earliest).year, earliest_day=day_index(earliest))


@dataclass(frozen=True)
class DailyCountSeries:
    origin_day: int
    counts: np.ndarray

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.float64)
        if counts.ndim != 1:
            raise ValueError("counts must be one-dimensional")
        if np.any(counts < 0):
            raise ValueError("counts must be non-negative")
        counts.setflags(write=False)
        object.__setattr__(self, "counts", counts)

    def __len__(self) -> int:
        return len(self.counts)

    @property
    def last_day(self) -> int:
        return self.origin_day + len(self.counts) - 1

    @classmethod
    def from_timestamps(cls, timestamps: Iterable[int]) -> "DailyCountSeries":
        days = np.fromiter((day_index(t) for t in timestamps), dtype=np.int64)
        if days.size == 0:
            raise ValueError("cannot build a count series from an empty log")
        origin = int(days.min())
        counts = np.bincount(days - origin)
        return cls(origin_day=origin, counts=counts)


@dataclass(frozen=True)
class TemporalFeature:
    stat: np.ndarray
    stru: np.ndarray

    def __post_init__(self):
        if self.stat.shape != (STAT_DIM,) or self.stru.shape != (STRUCT_DIM,):
            raise ValueError("temporal feature blocks must be 16 and 9 dims")

    @property
    def combined(self) -> np.ndarray:
        return np.concatenate([self.stat, self.stru])


def stat_features(t: int, ctx: CalendarContext) -> np.ndarray:
    """Calendar block: year offset, day offset, month, weekday and season one-hots."""
    day = day_index(t)
    if day < ctx.earliest_day:
        raise ValueError(f"timestamp {t} precedes the earliest day of the log")
    date = utc_date(t)
    vec = np.zeros(STAT_DIM)
    vec[0] = date.year - ctx.earliest_year
    vec[1] = day - ctx.earliest_day
    vec[2] = date.month
    # slot 0 of both one-hot blocks is reserved and never set
    vec[_WEEKDAY_OFFSET + date.isoweekday()] = 1.0
    vec[_SEASON_OFFSET + season_of_month(date.month)] = 1.0
    return vec


def _window_trend(values: np.ndarray, gap: int) -> np.ndarray:
    """(sum over (j-gap, j] - sum over (j-2gap, j-gap]) / gap for every j.

    Days before the start of ``values`` count as zero.
    """
    csum = np.concatenate([np.zeros(2 * gap + 1), np.cumsum(values)])
    # csum[k + 2gap + 1] = sum(values[:k + 1]); shifted so negative k reads 0
    idx = np.arange(len(values)) + 2 * gap + 1
    current = csum[idx] - csum[idx - gap]
    past = csum[idx - gap] - csum[idx - 2 * gap]
    return (current - past) / gap


def _pad_to_nearest_valid(values: np.ndarray, first_valid: int) -> np.ndarray:
    if first_valid >= len(values):
        return values
    out = values.copy()
    out[:first_valid] = values[first_valid]
    return out


def _check_gap(series: DailyCountSeries, gap: int) -> None:
    if gap < 1:
        raise ValueError(f"gap must be >= 1, got {gap}")
    if len(series) == 0:
        raise ValueError("empty count series")


def first_order_table(series: DailyCountSeries, gap: int) -> np.ndarray:
    """z'_gap for every day of the series, padded per the nearest-history rule."""
    _check_gap(series, gap)
    raw = _window_trend(series.counts, gap)
    return _pad_to_nearest_valid(raw, 2 * gap - 1)


def second_order_table(series: DailyCountSeries, gap: int) -> np.ndarray:
    """z''_gap: the same window difference applied to the padded z' values."""
    first = first_order_table(series, gap)
    raw = _window_trend(first, gap)
    # both windows must lie on days where z' itself had full history
    return _pad_to_nearest_valid(raw, 4 * gap - 2)


def _series_position(series: DailyCountSeries, t: int) -> int:
    pos = day_index(t) - series.origin_day
    return int(min(max(pos, 0), len(series) - 1))


def first_order_trend(series: DailyCountSeries, t: int, gap: int) -> float:
    return float(first_order_table(series, gap)[_series_position(series, t)])


def second_order_trend(series: DailyCountSeries, t: int, gap: int) -> float:
    return float(second_order_table(series, gap)[_series_position(series, t)])


class StructuralTable:
    """Precomputed 9-dim structural block for every day of a series."""

    def __init__(self, series: DailyCountSeries, gaps: Sequence[int] = TREND_GAPS):
        if len(gaps) != 4:
            raise ValueError("exactly four trend gaps are expected")
        self.series = series
        columns = [series.counts]
        for gap in gaps:
            columns.append(first_order_table(series, gap))
            columns.append(second_order_table(series, gap))
        self.table = np.stack(columns, axis=1)

    def lookup(self, t: int) -> np.ndarray:
        return self.table[_series_position(self.series, t)].copy()


def struct_features(series: DailyCountSeries, t: int, gaps: Sequence[int] = TREND_GAPS) -> np.ndarray:
    """[z, z'_90, z''_90, z'_30, z''_30, z'_7, z''_7, z'_1, z''_1] at day(t)."""
    return StructuralTable(series, gaps).lookup(t)


def temporal_feature(t: int, ctx: CalendarContext, series: DailyCountSeries) -> TemporalFeature:
    return TemporalFeature(stat=stat_features(t, ctx), stru=struct_features(series, t))


def feature_matrix(
    timestamps: Sequence[int],
    ctx: CalendarContext,
    series: DailyCountSeries,
    gaps: Sequence[int] = TREND_GAPS,
) -> np.ndarray:
    """Stack the combined 25-dim features of many timestamps (n x 25)."""
    table = StructuralTable(series, gaps)
    out = np.empty((len(timestamps), FEATURE_DIM))
    for row, t in enumerate(timestamps):
        out[row, :STAT_DIM] = stat_features(t, ctx)
        out[row, STAT_DIM:] = table.lookup(t)
    return out
