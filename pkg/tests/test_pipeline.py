"""Cleaning, segmentation, and normalization, checked against a slow
independent re-derivation (the oracle) plus hand-worked cases.
"""

import logging
import math

import numpy as np
import pytest

from kline.core import Frequency, KLineRecord, KLineSeries, Segment
from kline.errors import ConfigError
from kline.pipeline import (
    CleaningParams,
    build_training_windows,
    clean_series,
    default_cleaning_params,
    denormalize,
    filter_segments,
    fit_normalization,
    impute_volume,
    normalize,
    partition_by_price_jumps,
    rebalance_weights,
    split_on_missing_prices,
    volume_dropout,
)

DAY = 86_400


def series_from(closes, opens=None, volumes=None, asset="x", freq=Frequency.DAILY):
    """Build a series where high/low bracket open/close loosely."""
    n = len(closes)
    opens = list(opens) if opens is not None else [closes[max(i - 1, 0)] for i in range(n)]
    volumes = list(volumes) if volumes is not None else [100.0] * n
    records = []
    for i in range(n):
        o, c = opens[i], closes[i]
        if math.isfinite(o) and math.isfinite(c):
            hi, lo = max(o, c) + 1.0, min(o, c) - 1.0
        else:
            hi, lo = o, c
        records.append(
            KLineRecord(i * DAY, o, hi, lo, c, volumes[i], volumes[i] * 10.0)
        )
    return KLineSeries(asset, freq, tuple(records))


# --------------------------------------------------------------------------
# the slow oracle: re-derives the whole cleaning decision from the rules


def oracle_clean_ranges(series, params):
    """Independent re-derivation of the kept index ranges."""
    recs = series.records
    vols = [r.volume if math.isfinite(r.volume) else 0.0 for r in recs]

    pieces, cur = [], []
    for i, r in enumerate(recs):
        if r.has_missing_price():
            if cur:
                pieces.append(cur)
            cur = []
        else:
            cur.append(i)
    if cur:
        pieces.append(cur)

    kept = []
    for piece in pieces:
        subs = [[piece[0]]]
        for prev, t in zip(piece[:-1], piece[1:]):
            pc = recs[prev].close
            if pc == 0.0 or abs(recs[t].open / pc - 1.0) > params.price_jump_threshold:
                subs.append([t])
            else:
                subs[-1].append(t)
        for sub in subs:
            m = len(sub)
            bad = [False] * m

            def flag_runs(marks, max_run):
                i = 0
                while i < m:
                    if marks[i]:
                        j = i
                        while j < m and marks[j]:
                            j += 1
                        if j - i > max_run:
                            for t in range(i, j):
                                bad[t] = True
                        i = j
                    else:
                        i += 1

            flag_runs([vols[t] <= params.liquidity_epsilon for t in sub],
                      params.max_consecutive_illiquid)
            stag = [False] + [
                round(recs[sub[t]].close, 10) == round(recs[sub[t - 1]].close, 10)
                for t in range(1, m)
            ]
            flag_runs(stag, params.max_consecutive_stagnant)

            run = []
            for off in range(m + 1):
                if off == m or bad[off]:
                    if len(run) >= params.min_length:
                        kept.append((run[0], run[-1] + 1))
                    run = []
                else:
                    run.append(sub[off])
    return kept


def random_messy_series(rng, params, n, freq=Frequency.DAILY):
    """Random series exercising every cleaning rule at once.

    Stagnation is injected by copying the exact previous close, so decimal
    rounding agrees between implementation and oracle.
    """
    closes = np.empty(n)
    closes[0] = 50.0
    for i in range(1, n):
        r = rng.random()
        if r < 0.18:
            closes[i] = closes[i - 1]  # exact stagnation
        elif r < 0.22:
            closes[i] = closes[i - 1] * (1.0 + 3.0 * params.price_jump_threshold)
        else:
            closes[i] = max(closes[i - 1] + rng.normal(0.0, 0.5), 1.0)
    opens = np.empty(n)
    opens[0] = closes[0]
    for i in range(1, n):
        r = rng.random()
        if r < 0.05:
            opens[i] = closes[i - 1] * (1.0 + 2.5 * params.price_jump_threshold)
        else:
            opens[i] = closes[i - 1] * (1.0 + rng.normal(0.0, 0.2) * params.price_jump_threshold)
    volumes = np.where(rng.random(n) < 0.25, 0.0, np.abs(rng.normal(500.0, 100.0, n)) + 1.0)
    records = []
    for i in range(n):
        o, c = opens[i], closes[i]
        if rng.random() < 0.04:
            o = c = float("nan")
        hi = max(o, c) * 1.01 if math.isfinite(o) else o
        lo = min(o, c) * 0.99 if math.isfinite(o) else c
        vol = volumes[i] if rng.random() > 0.03 else float("nan")
        records.append(KLineRecord(i * freq.bar_seconds, o, hi, lo, c, vol, vol))
    return KLineSeries("rand", freq, tuple(records))


class TestCleaningOracle:
    @pytest.mark.parametrize("seed", range(40))
    def test_matches_oracle_on_random_series(self, seed):
        rng = np.random.Generator(np.random.PCG64(seed))
        params = CleaningParams(
            min_length=int(rng.integers(2, 12)),
            price_jump_threshold=float(rng.uniform(0.05, 0.5)),
            max_consecutive_illiquid=int(rng.integers(0, 4)),
            max_consecutive_stagnant=int(rng.integers(0, 4)),
        )
        series = random_messy_series(rng, params, n=int(rng.integers(30, 220)))
        _, segments, report = clean_series(series, params)
        got = [(s.start, s.end) for s in segments]
        assert got == oracle_clean_ranges(series, params)
        assert report.bars_kept == sum(b - a for a, b in got)
        assert (
            report.drop_missing_price
            + report.drop_illiquid_run
            + report.drop_stagnant_run
            + report.drop_min_length
            == report.bars_dropped
        )


class TestSegmentation:
    def test_split_on_missing_prices(self):
        closes = [1.0, float("nan"), 2.0, 3.0, float("nan")]
        s = series_from(closes, opens=[1.0, float("nan"), 2.0, 3.0, float("nan")])
        assert [(p.start, p.end) for p in split_on_missing_prices(s)] == [(0, 1), (2, 4)]

    def test_split_handles_all_missing(self):
        s = series_from([float("nan"), float("nan")])
        assert split_on_missing_prices(s) == []

    def test_impute_volume_clears_presence(self):
        s = series_from([1.0, 2.0], volumes=[float("nan"), 5.0])
        out = impute_volume(s)
        assert out[0].volume == 0.0 and not out[0].volume_present
        assert out[1].volume == 5.0 and out[1].volume_present

    def test_impute_volume_handles_infinity(self):
        s = series_from([1.0], volumes=[float("inf")])
        assert impute_volume(s)[0].volume == 0.0

    def test_jump_split_is_strict_inequality(self):
        # 12.5 / 10.0 - 1.0 is exactly 0.25 in binary floating point
        params = CleaningParams(1, 0.25, 100, 100)
        exact = series_from([10.0, 10.0], opens=[10.0, 12.5])
        assert len(partition_by_price_jumps(exact, params)) == 1
        over = series_from([10.0, 10.0], opens=[10.0, 12.500001])
        assert [(p.start, p.end) for p in partition_by_price_jumps(over, params)] == [
            (0, 1),
            (1, 2),
        ]

    def test_zero_previous_close_is_jump_with_warning(self, caplog):
        params = CleaningParams(1, 0.10, 100, 100)
        s = series_from([0.0, 10.0], opens=[0.0, 10.0])
        with caplog.at_level(logging.WARNING):
            parts = partition_by_price_jumps(s, params)
        assert len(parts) == 2
        assert any("zero" in rec.message for rec in caplog.records)

    def test_downward_jumps_split_too(self):
        params = CleaningParams(1, 0.10, 100, 100)
        s = series_from([10.0, 8.0], opens=[10.0, 8.0])  # -20% open gap
        assert len(partition_by_price_jumps(s, params)) == 2


class TestFiltering:
    def test_overlong_illiquid_run_dropped(self):
        #        volume:  0 in a run of 3 > max 2
        params = CleaningParams(1, 10.0, 2, 100)
        closes = [float(i + 1) for i in range(10)]
        vols = [100, 0, 0, 0, 100, 100, 0, 0, 100, 100]
        s = series_from(closes, opens=closes, volumes=vols)
        got = [(p.start, p.end) for p in filter_segments(s, params)]
        assert got == [(0, 1), (4, 10)]  # short zero run at 6..7 tolerated

    def test_liquidity_epsilon_widens_illiquid(self):
        closes = [float(i + 1) for i in range(6)]
        vols = [100, 5, 5, 5, 100, 100]
        s = series_from(closes, opens=closes, volumes=vols)
        strict = CleaningParams(1, 10.0, 2, 100, liquidity_epsilon=0.0)
        assert len(filter_segments(s, strict)) == 1
        loose = CleaningParams(1, 10.0, 2, 100, liquidity_epsilon=5.0)
        got = [(p.start, p.end) for p in filter_segments(s, loose)]
        assert got == [(0, 1), (4, 6)]

    def test_stagnation_uses_ten_decimal_rounding(self):
        params = CleaningParams(1, 10.0, 100, 0)  # any stagnant bar is flagged
        base = 10.0
        within = series_from([base, base + 1e-11, 3.0], opens=[base, base, base])
        got = [(p.start, p.end) for p in filter_segments(within, params)]
        assert got == [(0, 1), (2, 3)]  # bar 1 rounds equal -> flagged
        beyond = series_from([base, base + 1e-9, 3.0], opens=[base, base, base])
        assert [(p.start, p.end) for p in filter_segments(beyond, params)] == [(0, 3)]

    def test_stagnant_run_length_counts_marked_bars(self):
        # closes: a a a a b -> marked stagnant bars are 3 (indices 1..3)
        params = CleaningParams(1, 10.0, 100, 3)
        s = series_from([1.0, 1.0, 1.0, 1.0, 2.0], opens=[1.0] * 5)
        assert len(filter_segments(s, params)) == 1  # run of 3 == max, kept
        longer = series_from([1.0, 1.0, 1.0, 1.0, 1.0, 2.0], opens=[1.0] * 6)
        got = [(p.start, p.end) for p in filter_segments(longer, params)]
        assert got == [(0, 1), (5, 6)]

    def test_min_length_filter(self):
        params = CleaningParams(5, 10.0, 0, 100)
        closes = [float(i + 1) for i in range(12)]
        vols = [100] * 6 + [0] + [100] * 5
        s = series_from(closes, opens=closes, volumes=vols)
        got = [(p.start, p.end) for p in filter_segments(s, params)]
        assert got == [(0, 6), (7, 12)]
        params6 = CleaningParams(6, 10.0, 0, 100)
        assert [(p.start, p.end) for p in filter_segments(s, params6)] == [(0, 6)]

    def test_runs_reset_at_jump_boundaries(self):
        # two illiquid bars on each side of a jump: separately within limit
        params = CleaningParams(1, 0.10, 2, 100)
        closes = [10.0, 10.0, 20.0, 20.0]
        opens = [10.0, 10.0, 20.0, 20.0]  # 2x open gap at bar 2
        vols = [0, 0, 0, 0]
        s = series_from(closes, opens=opens, volumes=vols)
        got = [(p.start, p.end) for p in filter_segments(s, params)]
        assert got == [(0, 2), (2, 4)]


class TestDropAccounting:
    def test_reason_precedence(self):
        # one bar both illiquid and stagnant -> attributed to illiquid
        params = CleaningParams(1, 10.0, 0, 0)
        s = series_from([1.0, 1.0, 3.0], opens=[1.0, 1.0, 3.0], volumes=[100, 0, 100])
        _, _, report = clean_series(s, params)
        assert report.drop_illiquid_run == 1
        assert report.drop_stagnant_run == 0

    def test_missing_price_beats_everything(self):
        params = CleaningParams(1, 10.0, 0, 0)
        s = series_from(
            [1.0, float("nan"), 3.0], opens=[1.0, float("nan"), 3.0], volumes=[100, 0, 100]
        )
        _, _, report = clean_series(s, params)
        assert report.drop_missing_price == 1
        assert report.drop_illiquid_run == 0

    def test_min_length_is_the_residual_reason(self):
        params = CleaningParams(4, 10.0, 100, 100)
        s = series_from([1.0, 2.0, 3.0])
        _, segs, report = clean_series(s, params)
        assert segs == []
        assert report.drop_min_length == 3


class TestCleaningDefaults:
    def test_table_is_complete(self):
        for freq in Frequency:
            params = default_cleaning_params(freq)
            assert params.min_length >= 1
            assert params.price_jump_threshold > 0

    def test_liquidity_epsilon_passthrough(self):
        assert default_cleaning_params(Frequency.DAILY, 3.5).liquidity_epsilon == 3.5

    def test_param_validation(self):
        with pytest.raises(ConfigError):
            CleaningParams(0, 0.1, 1, 1)
        with pytest.raises(ConfigError):
            CleaningParams(1, 0.0, 1, 1)
        with pytest.raises(ConfigError):
            CleaningParams(1, 0.1, -1, 1)
        with pytest.raises(ConfigError):
            CleaningParams(1, 0.1, 1, -1)
        with pytest.raises(ConfigError):
            CleaningParams(1, 0.1, 1, 1, liquidity_epsilon=-1.0)


class TestNormalization:
    def test_zscore_roundtrip(self):
        rng = np.random.Generator(np.random.PCG64(0))
        mat = rng.normal(50.0, 3.0, size=(20, 6))
        stats = fit_normalization(mat)
        z = normalize(mat, stats)
        np.testing.assert_allclose(z.mean(axis=0), 0.0, atol=1e-12)
        np.testing.assert_allclose(z.std(axis=0), 1.0, atol=1e-12)
        np.testing.assert_allclose(denormalize(z, stats), mat, atol=1e-9)

    def test_population_std(self):
        mat = np.zeros((4, 6))
        mat[:, 3] = [1.0, 2.0, 3.0, 4.0]
        stats = fit_normalization(mat)
        assert stats.std[3] == pytest.approx(np.std([1, 2, 3, 4]))  # ddof=0

    def test_constant_channel_maps_to_zero(self):
        mat = np.full((5, 6), 7.0)
        stats = fit_normalization(mat)
        z = normalize(mat, stats)
        np.testing.assert_array_equal(z, np.zeros((5, 6)))

    def test_clipping_at_five_sigma(self):
        # a lone outlier among n rows lands at sqrt(n-1) sigmas; n=30 -> 5.385
        mat = np.zeros((30, 6))
        mat[0, 0] = 1000.0
        stats = fit_normalization(mat)
        z = normalize(mat, stats)
        assert z.min() >= -5.0 and z.max() <= 5.0
        assert z[0, 0] == 5.0

    def test_absent_channels_are_exactly_zero(self):
        mat = np.arange(24, dtype=np.float64).reshape(4, 6) + 1.0
        presence = np.ones((4, 2), dtype=bool)
        presence[1, 0] = False
        presence[2, 1] = False
        z = normalize(mat, fit_normalization(mat), presence)
        assert z[1, 4] == 0.0
        assert z[2, 5] == 0.0
        assert z[0, 4] != 0.0

    def test_needs_two_bars(self):
        with pytest.raises(ValueError):
            fit_normalization(np.ones((1, 6)))

    def test_volume_dropout(self):
        rng = np.random.Generator(np.random.PCG64(1))
        batch = np.ones((200, 4, 6))
        out = volume_dropout(batch, 0.3, rng)
        hit = np.all(out[:, :, 4:6] == 0.0, axis=(1, 2))
        assert 0.15 < hit.mean() < 0.45
        np.testing.assert_array_equal(out[~hit], batch[~hit])
        np.testing.assert_array_equal(out[hit][:, :, :4], batch[hit][:, :, :4])
        assert batch[:, :, 4:6].all()  # input untouched

    def test_volume_dropout_rate_validation(self):
        rng = np.random.Generator(np.random.PCG64(0))
        with pytest.raises(ConfigError):
            volume_dropout(np.ones((1, 2, 6)), 1.0, rng)
        np.testing.assert_array_equal(
            volume_dropout(np.ones((1, 2, 6)), 0.0, rng), np.ones((1, 2, 6))
        )


class TestRebalance:
    def test_equity_only_is_uniform(self):
        seg = Segment("a", Frequency.DAILY, 0, 5)
        w = rebalance_weights([("equity", seg)] * 4)
        np.testing.assert_allclose(w, 0.25)

    def test_non_equity_upweighted(self):
        seg = Segment("a", Frequency.DAILY, 0, 5)
        w = rebalance_weights([("equity", seg), ("crypto", seg)])
        assert w[1] == pytest.approx(2.0 * w[0])
        assert w.sum() == pytest.approx(1.0)

    def test_unknown_class_rejected(self):
        seg = Segment("a", Frequency.DAILY, 0, 5)
        with pytest.raises(ConfigError, match="unknown asset class"):
            rebalance_weights([("bond", seg)])


class TestTrainingWindows:
    def test_window_count_and_shape(self):
        closes = [50.0 + 0.1 * i for i in range(40)]
        s = series_from(closes)
        params = CleaningParams(2, 10.0, 100, 100)
        windows, stamps, stats, masks = build_training_windows(s, 16, 8, params)
        assert len(windows) == 4  # starts at 0, 8, 16, 24
        assert windows[0].shape == (16, 6)
        assert stamps[0][0] == 0 and stamps[1][0] == 8 * DAY
        assert len(stats) == len(masks) == 4

    def test_each_window_is_locally_normalized(self):
        closes = [50.0 + float(i) for i in range(30)]
        s = series_from(closes)
        params = CleaningParams(2, 10.0, 100, 100)
        windows, _, stats, _ = build_training_windows(s, 10, 10, params)
        for w in windows:
            np.testing.assert_allclose(w.mean(axis=0), 0.0, atol=1e-12)

    def test_parameter_validation(self):
        s = series_from([1.0, 2.0, 3.0])
        with pytest.raises(ConfigError):
            build_training_windows(s, 1, 1)
        with pytest.raises(ConfigError):
            build_training_windows(s, 4, 0)
