"""Metric oracles (closed-form and numpy-reference), synthetic-data probes,
and the cash-ledger backtest checked against an independently written
reference simulator plus hand-worked scenarios.
"""

import numpy as np
import pytest

from kline.errors import ConfigError, DataError
from kline.evaluation import (
    BacktestResult,
    MetricReport,
    TRADING_DAYS_PER_YEAR,
    _average_ranks,
    backtest_topk,
    discriminative_score,
    forecast_metrics,
    mae,
    pearson_ic,
    predicted_return,
    r_squared,
    rank_ic,
    realized_volatility,
    tstr_score,
    volatility_metrics,
)

RNG = np.random.Generator(np.random.PCG64(90))


class TestPearson:
    def test_matches_numpy(self):
        for _ in range(10):
            x = RNG.standard_normal(40)
            y = RNG.standard_normal(40)
            assert pearson_ic(x, y) == pytest.approx(np.corrcoef(x, y)[0, 1], rel=1e-12)

    def test_perfect_and_inverse(self):
        x = np.arange(10.0)
        assert pearson_ic(x, 3 * x + 2) == pytest.approx(1.0, rel=1e-12)
        assert pearson_ic(x, -x) == pytest.approx(-1.0, rel=1e-12)

    def test_constant_sides_are_nan(self):
        assert np.isnan(pearson_ic(np.ones(5), np.arange(5.0)))
        assert np.isnan(pearson_ic(np.arange(5.0), np.ones(5)))

    def test_short_input_is_nan(self):
        assert np.isnan(pearson_ic(np.array([1.0]), np.array([2.0])))

    def test_length_mismatch(self):
        with pytest.raises(DataError):
            pearson_ic(np.ones(3), np.ones(4))


class TestRanks:
    def test_no_ties(self):
        np.testing.assert_array_equal(_average_ranks(np.array([30.0, 10.0, 20.0])), [3, 1, 2])

    def test_ties_share_average_position(self):
        np.testing.assert_array_equal(
            _average_ranks(np.array([5.0, 7.0, 5.0, 9.0])), [1.5, 3.0, 1.5, 4.0]
        )
        np.testing.assert_array_equal(_average_ranks(np.ones(4)), [2.5, 2.5, 2.5, 2.5])

    def test_spearman_closed_form_without_ties(self):
        # rho = 1 - 6 * sum d^2 / (n (n^2 - 1)) when all values are distinct
        for _ in range(10):
            x = RNG.permutation(20).astype(np.float64)
            y = RNG.permutation(20).astype(np.float64)
            d = _average_ranks(x) - _average_ranks(y)
            want = 1.0 - 6.0 * (d * d).sum() / (20 * (20**2 - 1))
            assert rank_ic(x, y) == pytest.approx(want, rel=1e-12)

    def test_monotone_invariance(self):
        x = RNG.standard_normal(30)
        assert rank_ic(x, np.exp(x)) == pytest.approx(1.0, rel=1e-12)
        assert rank_ic(x, -(x**3)) == pytest.approx(-1.0, rel=1e-12)

    def test_tied_data_matches_pearson_on_ranks(self):
        x = np.array([1.0, 1.0, 2.0, 3.0, 3.0, 3.0])
        y = np.array([2.0, 1.0, 1.0, 5.0, 4.0, 4.0])
        want = pearson_ic(_average_ranks(x), _average_ranks(y))
        assert rank_ic(x, y) == pytest.approx(want, rel=1e-14)


class TestScalarMetrics:
    def test_mae(self):
        assert mae(np.array([1.0, 2.0]), np.array([2.0, 4.0])) == pytest.approx(1.5)
        with pytest.raises(DataError):
            mae(np.ones(3), np.ones((3, 1)))

    def test_r_squared(self):
        y = np.array([1.0, 2.0, 3.0, 4.0])
        assert r_squared(y, y) == pytest.approx(1.0)
        assert r_squared(np.full(4, y.mean()), y) == pytest.approx(0.0, abs=1e-15)
        assert np.isnan(r_squared(y, np.ones(4)))

    def test_realized_volatility_hand_case(self):
        prices = np.array([1.0, np.exp(0.01), np.exp(0.03)])
        assert realized_volatility(prices) == pytest.approx(5e-4, abs=1e-15)

    def test_realized_volatility_flat_path_is_zero(self):
        assert realized_volatility(np.full(6, 42.0)) == 0.0

    def test_realized_volatility_validation(self):
        with pytest.raises(DataError):
            realized_volatility(np.array([1.0]))
        with pytest.raises(DataError):
            realized_volatility(np.array([1.0, -1.0]))
        with pytest.raises(DataError):
            realized_volatility(np.array([1.0, np.nan]))

    def test_predicted_return(self):
        assert predicted_return(100.0, np.array([99.0, 103.0, 105.0])) == pytest.approx(0.05)
        with pytest.raises(DataError):
            predicted_return(0.0, np.array([1.0]))
        with pytest.raises(DataError):
            predicted_return(100.0, np.array([]))


class TestForecastMetrics:
    def test_matches_manual_loop(self):
        pred = RNG.standard_normal((3, 8, 6)) + 10
        actual = RNG.standard_normal((3, 8, 6)) + 10
        rep = forecast_metrics(pred, actual)
        ics, rics, r2s = [], [], []
        for w in range(3):
            for c in range(4):
                ics.append(np.corrcoef(pred[w, :, c], actual[w, :, c])[0, 1])
                rics.append(rank_ic(pred[w, :, c], actual[w, :, c]))
                r2s.append(r_squared(pred[w, :, c], actual[w, :, c]))
        assert rep.ic == pytest.approx(np.mean(ics), rel=1e-10)
        assert rep.rank_ic == pytest.approx(np.mean(rics), rel=1e-10)
        assert rep.r2 == pytest.approx(np.mean(r2s), rel=1e-10)
        assert rep.mae == pytest.approx(np.abs(pred[:, :, :4] - actual[:, :, :4]).mean(), rel=1e-12)
        assert rep.n_windows == 3 and rep.n_excluded == 0

    def test_constant_channels_excluded_not_zeroed(self):
        pred = RNG.standard_normal((2, 6, 6))
        actual = RNG.standard_normal((2, 6, 6))
        pred[0, :, 2] = 7.0  # one constant (window, channel) path
        rep = forecast_metrics(pred, actual)
        assert rep.n_excluded == 1
        # the remaining 7 correlations average without the NaN
        vals = [
            pearson_ic(pred[w, :, c], actual[w, :, c])
            for w in range(2)
            for c in range(4)
            if not (w == 0 and c == 2)
        ]
        assert rep.ic == pytest.approx(np.mean(vals), rel=1e-10)

    def test_single_window_2d_input(self):
        pred = RNG.standard_normal((5, 6))
        actual = RNG.standard_normal((5, 6))
        rep = forecast_metrics(pred, actual)
        assert rep.n_windows == 1

    def test_as_dict_roundtrip(self):
        pred = RNG.standard_normal((2, 5, 6))
        rep = forecast_metrics(pred, pred)
        d = rep.as_dict()
        assert set(d) == {"ic", "rank_ic", "mae", "r2", "n_windows", "n_excluded"}
        assert d["mae"] == 0.0 and d["ic"] == pytest.approx(1.0)

    def test_shape_validation(self):
        with pytest.raises(DataError):
            forecast_metrics(np.zeros((2, 5, 6)), np.zeros((2, 6, 6)))
        with pytest.raises(DataError):
            forecast_metrics(np.zeros((2, 5, 3)), np.zeros((2, 5, 3)))


class TestVolatilityMetrics:
    def test_anchored_paths(self):
        pred = np.abs(RNG.standard_normal((3, 4, 6))) + 50
        actual = np.abs(RNG.standard_normal((3, 4, 6))) + 50
        anchors = np.array([50.0, 51.0, 49.5])
        out = volatility_metrics(pred, actual, anchors)
        rv_p = [realized_volatility(np.r_[anchors[w], pred[w, :, 3]]) for w in range(3)]
        rv_a = [realized_volatility(np.r_[anchors[w], actual[w, :, 3]]) for w in range(3)]
        assert out["ic"] == pytest.approx(pearson_ic(rv_p, rv_a), rel=1e-12)
        assert out["mae"] == pytest.approx(mae(np.array(rv_p), np.array(rv_a)), rel=1e-12)
        assert out["n_windows"] == 3.0

    def test_anchor_count_validated(self):
        with pytest.raises(DataError):
            volatility_metrics(np.ones((2, 3, 6)), np.ones((2, 3, 6)), np.ones(3))


class TestDiscriminativeScore:
    def test_separable_data_is_detected(self):
        rng = np.random.Generator(np.random.PCG64(1))
        real = rng.normal(3.0, 0.1, size=(30, 8, 3))
        synth = rng.normal(-3.0, 0.1, size=(30, 8, 3))
        out = discriminative_score(real, synth, seed=0, epochs=10)
        assert out["accuracy"] >= 0.9
        assert out["score"] == pytest.approx(abs(0.5 - out["accuracy"]))

    def test_identical_distributions_score_low(self):
        rng = np.random.Generator(np.random.PCG64(2))
        pool = rng.standard_normal((60, 8, 3))
        out = discriminative_score(pool[:30], pool[30:], seed=0, epochs=5)
        assert out["score"] <= 0.35

    def test_split_accounting(self):
        rng = np.random.Generator(np.random.PCG64(3))
        real = rng.standard_normal((20, 6, 2))
        synth = rng.standard_normal((25, 6, 2))
        out = discriminative_score(real, synth, seed=0, epochs=1)
        assert out["n_train"] == 32.0  # 16 per class
        assert out["n_test"] == 8.0

    def test_validation(self):
        with pytest.raises(DataError):
            discriminative_score(np.zeros((5, 4, 2)), np.zeros((5, 4, 2)))
        with pytest.raises(DataError):
            discriminative_score(np.zeros((20, 4, 2)), np.zeros((20, 5, 2)))


class TestTSTR:
    def test_smoke_and_keys(self):
        rng = np.random.Generator(np.random.PCG64(4))
        synth = rng.standard_normal((24, 10, 6))
        real = rng.standard_normal((16, 10, 6))
        out = tstr_score(synth, real, horizon=3, seed=0, epochs=2)
        assert set(out) == {"mse", "ic", "n_test"}
        assert np.isfinite(out["mse"]) and out["mse"] >= 0
        assert out["n_test"] == 16.0

    def test_single_step_horizon_uses_cross_window_ic(self):
        rng = np.random.Generator(np.random.PCG64(5))
        synth = rng.standard_normal((20, 6, 6))
        real = rng.standard_normal((15, 6, 6))
        out = tstr_score(synth, real, horizon=1, seed=0, epochs=1)
        assert np.isfinite(out["mse"])

    def test_horizon_validation(self):
        panel = np.zeros((12, 8, 6))
        with pytest.raises(ConfigError):
            tstr_score(panel, panel, horizon=0)
        with pytest.raises(ConfigError):
            tstr_score(panel, panel, horizon=8)

    def test_shape_validation(self):
        with pytest.raises(DataError):
            tstr_score(np.zeros((12, 8, 6)), np.zeros((12, 9, 6)), horizon=2)


# ---------------------------------------------------------------------------
# backtest


def reference_backtest(signals, prices, benchmark, top_k, max_trades, min_hold, rate, cash0):
    """Separately written top-k ledger simulation used as an oracle."""
    n_days, n_assets = prices.shape
    cash = float(cash0)
    held = {}  # asset -> [shares, entry_day]
    values = np.zeros(n_days)
    pnl = np.zeros(n_days)
    costs = np.zeros(n_days)
    buys = sells = 0
    for d in range(n_days):
        if d > 0:
            pnl[d] = sum(sh * (prices[d, a] - prices[d - 1, a]) for a, (sh, _) in held.items())
        fees = 0.0
        ranked = sorted(range(n_assets), key=lambda a: (-signals[d, a], a))
        top = set(ranked[:top_k])
        if d == 0:
            buy_list = list(ranked[:top_k])
        else:
            sellable = sorted(
                (a for a in held if a not in top and d - held[a][1] >= min_hold),
                key=lambda a: (signals[d, a], a),
            )
            for a in sellable[:max_trades]:
                sh, _ = held.pop(a)
                notional = sh * prices[d, a]
                fee = notional * rate
                cash += notional - fee
                fees += fee
                sells += 1
            buy_list = [a for a in ranked[:top_k] if a not in held][:max_trades]
        for a in buy_list[: top_k - len(held)]:
            budget = cash / (top_k - len(held))
            notional = budget / (1.0 + rate)
            fee = notional * rate
            held[a] = [notional / prices[d, a], d]
            cash -= notional + fee
            fees += fee
            buys += 1
        costs[d] = fees
        values[d] = cash + sum(sh * prices[d, a] for a, (sh, _) in held.items())
    return values, pnl, costs, buys, sells


def random_scenario(seed, n_days=14, n_assets=6):
    rng = np.random.Generator(np.random.PCG64(seed))
    prices = 50.0 * np.exp(np.cumsum(rng.normal(0, 0.03, (n_days, n_assets)), axis=0))
    signals = rng.standard_normal((n_days, n_assets))
    benchmark = 100.0 * np.exp(np.cumsum(rng.normal(0, 0.01, n_days)))
    return signals, prices, benchmark


class TestBacktestHandCases:
    def test_day_zero_fill_no_costs(self):
        prices = np.array([[10.0, 20.0], [11.0, 20.0]])
        signals = np.array([[0.9, 0.1], [0.9, 0.1]])
        bench = np.array([100.0, 100.0])
        res = backtest_topk(signals, prices, bench, top_k=1, cost_rate=0.0)
        # all cash into asset 0: 0.1 shares, then +1 price move
        assert res.values[0] == pytest.approx(1.0, abs=1e-15)
        assert res.values[1] == pytest.approx(1.1, rel=1e-15)
        assert res.pnl[1] == pytest.approx(0.1, rel=1e-15)
        assert res.costs.sum() == 0.0
        assert (res.n_buys, res.n_sells) == (1, 0)

    def test_day_zero_fee_arithmetic(self):
        prices = np.array([[10.0], [10.0]])
        signals = np.zeros((2, 1))
        bench = np.ones(2)
        res = backtest_topk(signals, prices, bench, top_k=1, cost_rate=0.01)
        notional = 1.0 / 1.01
        assert res.costs[0] == pytest.approx(notional * 0.01, rel=1e-15)
        assert res.values[0] == pytest.approx(notional, rel=1e-15)  # cash exactly 0
        assert res.values[1] == pytest.approx(notional, rel=1e-15)

    def test_min_hold_blocks_early_exit(self):
        # top_k=1; signal flips to B on day 1 but A is too young to sell
        prices = np.full((4, 2), 10.0)
        signals = np.array([[3.0, 1.0], [1.0, 3.0], [1.0, 3.0], [1.0, 3.0]])
        bench = np.ones(4)
        res = backtest_topk(
            signals, prices, bench, top_k=1, max_trades_per_day=1, min_hold_days=2, cost_rate=0.0
        )
        # sell becomes legal on day 2 (age 2)
        assert (res.n_buys, res.n_sells) == (2, 1)
        assert res.values[-1] == pytest.approx(1.0, rel=1e-15)

    def test_max_trades_zero_freezes_book_after_day_zero(self):
        signals, prices, bench = random_scenario(0)
        res = backtest_topk(signals, prices, bench, top_k=3, max_trades_per_day=0)
        assert res.n_buys == 3 and res.n_sells == 0
        assert (res.costs[1:] == 0.0).all()

    def test_equal_signals_tie_break_by_index(self):
        prices = np.full((2, 5), 10.0)
        signals = np.zeros((2, 5))
        bench = np.ones(2)
        res = backtest_topk(signals, prices, bench, top_k=2, cost_rate=0.0)
        # assets 0 and 1 bought; equal split leaves zero cash
        assert res.n_buys == 2
        assert res.values[0] == pytest.approx(1.0, rel=1e-15)

    def test_identical_to_benchmark_gives_nan_ir(self):
        # starting price 8.0 makes shares an exact power of two, so the
        # strategy path reproduces the benchmark bitwise and excess is 0
        prices = np.array([[8.0], [9.0], [10.0], [11.0]])
        signals = np.ones((4, 1))
        bench = prices[:, 0].copy()
        res = backtest_topk(signals, prices, bench, top_k=1, cost_rate=0.0)
        assert np.isnan(res.information_ratio)
        assert res.annualized_excess_return == 0.0

    def test_aer_formula(self):
        signals, prices, bench = random_scenario(7, n_days=10)
        res = backtest_topk(signals, prices, bench)
        ann = TRADING_DAYS_PER_YEAR / 9
        want = (res.values[-1] / res.values[0]) ** ann - (bench[-1] / bench[0]) ** ann
        assert res.annualized_excess_return == pytest.approx(want, rel=1e-12)

    def test_ir_formula(self):
        signals, prices, bench = random_scenario(8, n_days=10)
        res = backtest_topk(signals, prices, bench)
        strat = res.values[1:] / res.values[:-1] - 1.0
        bret = bench[1:] / bench[:-1] - 1.0
        excess = strat - bret
        want = excess.mean() / excess.std(ddof=1) * np.sqrt(TRADING_DAYS_PER_YEAR)
        assert res.information_ratio == pytest.approx(want, rel=1e-12)
        np.testing.assert_allclose(res.excess_returns, excess, rtol=1e-12)

    def test_top_k_beyond_universe_keeps_cash(self):
        signals, prices, bench = random_scenario(9, n_assets=2)
        res = backtest_topk(signals, prices, bench, top_k=5, cost_rate=0.0)
        # only 2 assets can be held; some cash stays un-deployed
        assert res.n_buys >= 2
        assert np.isfinite(res.final_value)


class TestBacktestOracle:
    @pytest.mark.parametrize("seed", range(30))
    def test_matches_reference_simulator(self, seed):
        signals, prices, bench = random_scenario(seed)
        kwargs = dict(top_k=3, max_trades_per_day=2, min_hold_days=2, cost_rate=0.002)
        res = backtest_topk(signals, prices, bench, initial_cash=2.0, **kwargs)
        values, pnl, costs, buys, sells = reference_backtest(
            signals, prices, bench, kwargs["top_k"], kwargs["max_trades_per_day"],
            kwargs["min_hold_days"], kwargs["cost_rate"], 2.0,
        )
        np.testing.assert_allclose(res.values, values, rtol=1e-9)
        np.testing.assert_allclose(res.pnl, pnl, rtol=1e-9, atol=1e-12)
        np.testing.assert_allclose(res.costs, costs, rtol=1e-9, atol=1e-15)
        assert (res.n_buys, res.n_sells) == (buys, sells)

    @pytest.mark.parametrize("seed", range(15))
    def test_value_changes_decompose_into_pnl_minus_costs(self, seed):
        signals, prices, bench = random_scenario(seed, n_days=20)
        res = backtest_topk(signals, prices, bench, top_k=3, min_hold_days=1)
        dv = np.diff(res.values)
        np.testing.assert_allclose(dv, res.pnl[1:] - res.costs[1:], atol=1e-12)
        # day 0: initial cash minus entry fees
        assert res.values[0] == pytest.approx(1.0 - res.costs[0], rel=1e-12)

    def test_book_never_exceeds_top_k(self):
        signals, prices, bench = random_scenario(3, n_days=25)
        res = backtest_topk(signals, prices, bench, top_k=2, max_trades_per_day=2)
        assert res.n_buys - res.n_sells <= 2


class TestBacktestValidation:
    def test_errors(self):
        good_s, good_p, good_b = random_scenario(0, n_days=5, n_assets=3)
        with pytest.raises(DataError):
            backtest_topk(good_s[:, :2], good_p, good_b)
        with pytest.raises(DataError):
            backtest_topk(good_s[:1], good_p[:1], good_b[:1])
        with pytest.raises(DataError):
            backtest_topk(good_s, good_p, good_b[:-1])
        with pytest.raises(DataError):
            backtest_topk(good_s, -good_p, good_b)
        with pytest.raises(DataError):
            backtest_topk(good_s, good_p, -good_b)
        with pytest.raises(ConfigError):
            backtest_topk(good_s, good_p, good_b, top_k=0)
        with pytest.raises(ConfigError):
            backtest_topk(good_s, good_p, good_b, cost_rate=-0.1)

    def test_result_is_frozen_dataclass(self):
        signals, prices, bench = random_scenario(1, n_days=4)
        res = backtest_topk(signals, prices, bench)
        assert isinstance(res, BacktestResult)
        with pytest.raises(AttributeError):
            res.n_buys = 0
