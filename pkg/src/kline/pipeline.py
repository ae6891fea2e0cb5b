"""Data cleaning and normalization for raw K-line series.

The cleaning pass turns one raw series into a set of contiguous segments
that are safe to train on:

  1. split on bars with any missing (non-finite) price,
  2. impute missing volume/amount to zero, clearing the presence flags,
  3. within each piece, split again before every price jump between
     adjacent bars, then drop bars that sit inside overlong illiquid or
     stagnant runs, and finally
  4. keep only sub-segments that still meet the frequency's minimum length.

Thresholds are frequency-specific; see ``default_cleaning_params``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from .core import Frequency, KLineRecord, KLineSeries, Segment
from .errors import ConfigError

__all__ = [
    "CleaningParams",
    "default_cleaning_params",
    "split_on_missing_prices",
    "impute_volume",
    "partition_by_price_jumps",
    "filter_segments",
    "clean_series",
    "QualityReport",
    "NormalizationStats",
    "fit_normalization",
    "normalize",
    "denormalize",
    "volume_dropout",
    "rebalance_weights",
    "build_training_windows",
]

logger = logging.getLogger(__name__)

# Equal closes are compared after rounding to this many decimal places, so
# float noise below half a tick never fakes or hides stagnation.
_STAGNATION_DECIMALS = 10

ASSET_CLASSES = ("equity", "crypto", "futures", "forex", "index")
DEFAULT_CLASS_MULTIPLIERS: Mapping[str, float] = {
    "equity": 1.0,
    "crypto": 2.0,
    "futures": 2.0,
    "forex": 2.0,
    "index": 2.0,
}


@dataclass(frozen=True)
class CleaningParams:
    """Frequency-specific thresholds for the cleaning pass.

    ``price_jump_threshold`` bounds |open_t / close_{t-1} - 1|; strictly
    larger moves split the series.  A bar is illiquid when its volume is
    <= ``liquidity_epsilon`` and stagnant when its rounded close equals the
    previous bar's.  Runs of illiquid (resp. stagnant) bars strictly longer
    than the corresponding maximum are dropped.  Surviving sub-segments
    shorter than ``min_length`` are dropped whole.
    """

    min_length: int
    price_jump_threshold: float
    max_consecutive_illiquid: int
    max_consecutive_stagnant: int
    liquidity_epsilon: float = 0.0

    def __post_init__(self) -> None:
        if self.min_length < 1:
            raise ConfigError(f"min_length must be >= 1, got {self.min_length}")
        if self.price_jump_threshold <= 0:
            raise ConfigError(
                f"price_jump_threshold must be > 0, got {self.price_jump_threshold}"
            )
        if self.max_consecutive_illiquid < 0:
            raise ConfigError(
                f"max_consecutive_illiquid must be >= 0, got {self.max_consecutive_illiquid}"
            )
        if self.max_consecutive_stagnant < 0:
            raise ConfigError(
                f"max_consecutive_stagnant must be >= 0, got {self.max_consecutive_stagnant}"
            )
        if self.liquidity_epsilon < 0:
            raise ConfigError(f"liquidity_epsilon must be >= 0, got {self.liquidity_epsilon}")


# (min_length, jump threshold, max illiquid run, max stagnant run) per frequency.
_CLEANING_TABLE: dict[Frequency, tuple[int, float, int, int]] = {
    Frequency.MIN_1: (2048, 0.10, 15, 45),
    Frequency.MIN_5: (1024, 0.15, 3, 10),
    Frequency.MIN_10: (512, 0.15, 3, 6),
    Frequency.MIN_15: (512, 0.15, 2, 5),
    Frequency.MIN_20: (512, 0.15, 2, 5),
    Frequency.MIN_30: (512, 0.20, 2, 3),
    Frequency.MIN_40: (256, 0.20, 1, 3),
    Frequency.MIN_60: (256, 0.20, 1, 3),
    Frequency.HOUR_2: (128, 0.25, 1, 3),
    Frequency.HOUR_4: (128, 0.25, 1, 3),
    Frequency.DAILY: (128, 0.30, 1, 3),
    Frequency.WEEKLY: (16, 0.50, 0, 2),
}


def default_cleaning_params(frequency: Frequency, liquidity_epsilon: float = 0.0) -> CleaningParams:
    """Return the calibrated thresholds for one sampling frequency."""
    min_length, jump, illiq, stag = _CLEANING_TABLE[frequency]
    return CleaningParams(min_length, jump, illiq, stag, liquidity_epsilon)


# --------------------------------------------------------------------------
# segmentation


def split_on_missing_prices(series: KLineSeries) -> list[Segment]:
    """Return maximal runs of bars whose four prices are all finite."""
    out: list[Segment] = []
    start: int | None = None
    for i, record in enumerate(series.records):
        if record.has_missing_price():
            if start is not None:
                out.append(Segment(series.asset_id, series.frequency, start, i))
                start = None
        elif start is None:
            start = i
    if start is not None:
        out.append(Segment(series.asset_id, series.frequency, start, len(series)))
    return out


def impute_volume(series: KLineSeries) -> KLineSeries:
    """Replace non-finite volume/amount with 0 and clear the presence flag."""
    records = []
    for r in series.records:
        vol_ok = np.isfinite(r.volume)
        amt_ok = np.isfinite(r.amount)
        if vol_ok and amt_ok:
            records.append(r)
            continue
        records.append(
            replace(
                r,
                volume=r.volume if vol_ok else 0.0,
                amount=r.amount if amt_ok else 0.0,
                volume_present=r.volume_present and vol_ok,
                amount_present=r.amount_present and amt_ok,
            )
        )
    return series.replace_records(records)


def _jump_boundaries(opens: np.ndarray, closes: np.ndarray, threshold: float) -> np.ndarray:
    """Indices t (within the slice) where a split happens before bar t."""
    prev_close = closes[:-1]
    boundaries = []
    for t in range(1, len(opens)):
        pc = prev_close[t - 1]
        if pc == 0.0:
            logger.warning("previous close is zero at offset %d; treating as a price jump", t)
            boundaries.append(t)
        elif abs(opens[t] / pc - 1.0) > threshold:
            boundaries.append(t)
    return np.asarray(boundaries, dtype=np.int64)


def partition_by_price_jumps(series: KLineSeries, params: CleaningParams) -> list[Segment]:
    """Split a fully-priced series before every overlarge open-to-close gap.

    Precondition: no missing prices (run ``split_on_missing_prices`` first).
    A zero previous close cannot produce a ratio, so it is treated as a jump
    and logged as a warning.
    """
    if len(series) == 0:
        return []
    mat = series.to_matrix()
    bounds = _jump_boundaries(mat[:, 0], mat[:, 3], params.price_jump_threshold)
    cuts = [0, *bounds.tolist(), len(series)]
    return [
        Segment(series.asset_id, series.frequency, a, b)
        for a, b in zip(cuts[:-1], cuts[1:])
        if b > a
    ]


def _overlong_run_flags(marks: np.ndarray, max_run: int) -> np.ndarray:
    """Flag every position inside a run of True marks longer than max_run."""
    flags = np.zeros(len(marks), dtype=bool)
    i = 0
    n = len(marks)
    while i < n:
        if not marks[i]:
            i += 1
            continue
        j = i
        while j < n and marks[j]:
            j += 1
        if j - i > max_run:
            flags[i:j] = True
        i = j
    return flags


def _flag_bad_bars(volumes: np.ndarray, closes: np.ndarray, params: CleaningParams) -> np.ndarray:
    illiquid = volumes <= params.liquidity_epsilon
    rounded = np.round(closes, _STAGNATION_DECIMALS)
    stagnant = np.zeros(len(closes), dtype=bool)
    stagnant[1:] = rounded[1:] == rounded[:-1]
    return _overlong_run_flags(illiquid, params.max_consecutive_illiquid) | _overlong_run_flags(
        stagnant, params.max_consecutive_stagnant
    )


def filter_segments(series: KLineSeries, params: CleaningParams) -> list[Segment]:
    """Run the full segmentation on a series with no missing prices.

    Jumps split first; illiquid/stagnant runs are then measured inside each
    piece independently (a run never spans a jump boundary, and the first
    bar after a boundary has no previous close to stagnate against).
    Survivors shorter than ``min_length`` are discarded.
    """
    kept: list[Segment] = []
    mat = series.to_matrix()
    for seg in partition_by_price_jumps(series, params):
        flags = _flag_bad_bars(mat[seg.start : seg.end, 4], mat[seg.start : seg.end, 3], params)
        run_start: int | None = None
        for off in range(len(flags) + 1):
            bad = off == len(flags) or flags[off]
            if bad:
                if run_start is not None and off - run_start >= params.min_length:
                    kept.append(
                        Segment(
                            series.asset_id,
                            series.frequency,
                            seg.start + run_start,
                            seg.start + off,
                        )
                    )
                run_start = None
            elif run_start is None:
                run_start = off
    return kept


@dataclass(frozen=True)
class QualityReport:
    """Per-series accounting of what the cleaning pass kept and why it dropped."""

    asset_id: str
    frequency: Frequency
    bars_total: int
    segments_kept: int
    bars_kept: int
    drop_missing_price: int
    drop_illiquid_run: int
    drop_stagnant_run: int
    drop_min_length: int

    @property
    def bars_dropped(self) -> int:
        return self.bars_total - self.bars_kept


def clean_series(series: KLineSeries, params: CleaningParams | None = None) -> tuple[KLineSeries, list[Segment], QualityReport]:
    """Full cleaning pass: impute, segment, and account for every bar.

    Returns the imputed series, the kept segments (indices into it), and a
    QualityReport attributing each dropped bar to exactly one reason with
    precedence missing price > illiquid run > stagnant run > too short.
    """
    if params is None:
        params = default_cleaning_params(series.frequency)
    imputed = impute_volume(series)
    mat = imputed.to_matrix()

    kept: list[Segment] = []
    missing = np.array([r.has_missing_price() for r in imputed.records], dtype=bool)
    illiquid_flag = np.zeros(len(imputed), dtype=bool)
    stagnant_flag = np.zeros(len(imputed), dtype=bool)
    for piece in split_on_missing_prices(imputed):
        sub = KLineSeries(series.asset_id, series.frequency, imputed.records[piece.start : piece.end])
        for jump_seg in partition_by_price_jumps(sub, params):
            lo = piece.start + jump_seg.start
            hi = piece.start + jump_seg.end
            vols = mat[lo:hi, 4]
            closes = mat[lo:hi, 3]
            illiquid_flag[lo:hi] = _overlong_run_flags(
                vols <= params.liquidity_epsilon, params.max_consecutive_illiquid
            )
            rounded = np.round(closes, _STAGNATION_DECIMALS)
            stag = np.zeros(hi - lo, dtype=bool)
            stag[1:] = rounded[1:] == rounded[:-1]
            stagnant_flag[lo:hi] = _overlong_run_flags(stag, params.max_consecutive_stagnant)
        for kept_seg in filter_segments(sub, params):
            kept.append(
                Segment(
                    series.asset_id,
                    series.frequency,
                    piece.start + kept_seg.start,
                    piece.start + kept_seg.end,
                )
            )

    in_kept = np.zeros(len(imputed), dtype=bool)
    for seg in kept:
        in_kept[seg.start : seg.end] = True
    dropped = ~in_kept
    n_missing = int(np.sum(dropped & missing))
    n_illiquid = int(np.sum(dropped & ~missing & illiquid_flag))
    n_stagnant = int(np.sum(dropped & ~missing & ~illiquid_flag & stagnant_flag))
    n_short = int(np.sum(dropped)) - n_missing - n_illiquid - n_stagnant
    report = QualityReport(
        asset_id=series.asset_id,
        frequency=series.frequency,
        bars_total=len(imputed),
        segments_kept=len(kept),
        bars_kept=int(np.sum(in_kept)),
        drop_missing_price=n_missing,
        drop_illiquid_run=n_illiquid,
        drop_stagnant_run=n_stagnant,
        drop_min_length=n_short,
    )
    return imputed, kept, report


# --------------------------------------------------------------------------
# normalization

CLIP_LO = -5.0
CLIP_HI = 5.0
_STD_FLOOR = 1e-8


@dataclass(frozen=True)
class NormalizationStats:
    """Per-channel affine statistics fitted on one window."""

    mean: np.ndarray  # [6]
    std: np.ndarray  # [6], floored away from zero

    def __post_init__(self) -> None:
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64))
        object.__setattr__(self, "std", np.asarray(self.std, dtype=np.float64))


def _as_matrix(window: KLineSeries | np.ndarray) -> np.ndarray:
    if isinstance(window, KLineSeries):
        return window.to_matrix()
    mat = np.asarray(window, dtype=np.float64)
    if mat.ndim != 2 or mat.shape[1] != 6:
        raise ValueError(f"expected a [T x 6] window, got shape {mat.shape}")
    return mat


def fit_normalization(window: KLineSeries | np.ndarray) -> NormalizationStats:
    """Per-channel mean and population std over a window of length >= 2."""
    mat = _as_matrix(window)
    if mat.shape[0] < 2:
        raise ValueError(f"need at least 2 bars to fit normalization, got {mat.shape[0]}")
    mean = mat.mean(axis=0)
    std = np.maximum(mat.std(axis=0), _STD_FLOOR)
    return NormalizationStats(mean, std)


def normalize(
    window: KLineSeries | np.ndarray,
    stats: NormalizationStats,
    presence: np.ndarray | None = None,
) -> np.ndarray:
    """Z-score then clip to [-5, 5].  Absent volume/amount map to exactly 0.

    ``presence`` is the [T x 2] mask from KLineSeries.presence_mask(); when
    the window is a series it is derived automatically.
    """
    mat = _as_matrix(window)
    if presence is None and isinstance(window, KLineSeries):
        presence = window.presence_mask()
    z = np.clip((mat - stats.mean) / stats.std, CLIP_LO, CLIP_HI)
    if presence is not None:
        presence = np.asarray(presence, dtype=bool)
        z[~presence[:, 0], 4] = 0.0
        z[~presence[:, 1], 5] = 0.0
    return z


def denormalize(z: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    """Invert the affine part of ``normalize`` (clipping is lossy by design)."""
    return np.asarray(z, dtype=np.float64) * stats.std + stats.mean


def volume_dropout(batch: np.ndarray, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Zero the volume and amount channels of a random ``rate`` fraction of samples.

    Operates on a [B x T x 6] batch of normalized windows and returns a copy;
    dropped samples look exactly like windows whose volume was never observed.
    """
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"volume dropout rate must be in [0, 1), got {rate}")
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 3 or batch.shape[2] != 6:
        raise ValueError(f"expected [B x T x 6] batch, got shape {batch.shape}")
    out = batch.copy()
    if rate > 0.0:
        hit = rng.random(batch.shape[0]) < rate
        out[hit, :, 4:6] = 0.0
    return out


def rebalance_weights(
    catalog: Sequence[tuple[str, Segment]],
    multipliers: Mapping[str, float] = DEFAULT_CLASS_MULTIPLIERS,
) -> np.ndarray:
    """Sampling weights over segments, proportional to the class multiplier.

    The default multipliers up-weight non-equity classes so a mostly-equity
    catalog still visits them.  An all-equity catalog comes out uniform.
    """
    if len(catalog) == 0:
        raise ValueError("cannot rebalance an empty catalog")
    weights = np.empty(len(catalog), dtype=np.float64)
    for i, (asset_class, _segment) in enumerate(catalog):
        if asset_class not in ASSET_CLASSES:
            raise ConfigError(
                f"unknown asset class {asset_class!r}; expected one of {ASSET_CLASSES}"
            )
        weights[i] = multipliers.get(asset_class, 1.0)
        if weights[i] <= 0:
            raise ConfigError(f"class multiplier for {asset_class!r} must be > 0")
    return weights / weights.sum()


# --------------------------------------------------------------------------
# training windows


def build_training_windows(
    series: KLineSeries,
    window_len: int,
    stride: int,
    params: CleaningParams | None = None,
) -> tuple[list[np.ndarray], list[np.ndarray], list[NormalizationStats], list[np.ndarray]]:
    """Clean a series and cut per-window z-scored training samples.

    Returns parallel lists: normalized [T x 6] windows, their [T] timestamp
    vectors, the per-window stats, and the [T x 2] presence masks.
    """
    if window_len < 2:
        raise ConfigError(f"window_len must be >= 2, got {window_len}")
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    imputed, segments, _report = clean_series(series, params)
    all_ts = imputed.timestamps()
    presence = imputed.presence_mask()
    mat = imputed.to_matrix()
    windows: list[np.ndarray] = []
    stamps: list[np.ndarray] = []
    stats_list: list[NormalizationStats] = []
    masks: list[np.ndarray] = []
    for seg in segments:
        for lo in range(seg.start, seg.end - window_len + 1, stride):
            raw = mat[lo : lo + window_len]
            mask = presence[lo : lo + window_len]
            stats = fit_normalization(raw)
            windows.append(normalize(raw, stats, mask))
            stamps.append(all_ts[lo : lo + window_len])
            stats_list.append(stats)
            masks.append(mask)
    return windows, stamps, stats_list, masks
