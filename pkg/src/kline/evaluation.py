"""Quant-finance evaluation: correlation metrics, volatility, synthetic-data
quality probes (discriminative score, train-on-synthetic), and a top-k
long-only backtest with an explicit cash ledger.

Correlations that are undefined (either side constant) return NaN; panel
aggregators skip and count those windows instead of poisoning the mean.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError
from .nn import RecurrentConfig, init_recurrent_params, recurrent_forward
from .optim import AdamWState, adamw_step, zero_grads
from .tensor import Tensor, where

__all__ = [
    "pearson_ic",
    "rank_ic",
    "mae",
    "r_squared",
    "realized_volatility",
    "predicted_return",
    "MetricReport",
    "forecast_metrics",
    "volatility_metrics",
    "discriminative_score",
    "tstr_score",
    "BacktestResult",
    "backtest_topk",
]

PRICE_CHANNELS = (0, 1, 2, 3)  # open, high, low, close
TRADING_DAYS_PER_YEAR = 252


# --------------------------------------------------------------------------
# scalar metrics


def pearson_ic(pred: np.ndarray, actual: np.ndarray) -> float:
    """Pearson correlation; NaN when either side is constant."""
    x = np.asarray(pred, dtype=np.float64).ravel()
    y = np.asarray(actual, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise DataError(f"length mismatch: {x.shape} vs {y.shape}")
    if len(x) < 2:
        return float("nan")
    xc = x - x.mean()
    yc = y - y.mean()
    denom = np.sqrt((xc * xc).sum() * (yc * yc).sum())
    if denom == 0.0:
        return float("nan")
    return float((xc * yc).sum() / denom)


def _average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing the average of their positions."""
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x), dtype=np.float64)
    xs = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def rank_ic(pred: np.ndarray, actual: np.ndarray) -> float:
    """Spearman correlation: Pearson on average ranks."""
    x = np.asarray(pred, dtype=np.float64).ravel()
    y = np.asarray(actual, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise DataError(f"length mismatch: {x.shape} vs {y.shape}")
    if len(x) < 2:
        return float("nan")
    return pearson_ic(_average_ranks(x), _average_ranks(y))


def mae(pred: np.ndarray, actual: np.ndarray) -> float:
    x = np.asarray(pred, dtype=np.float64)
    y = np.asarray(actual, dtype=np.float64)
    if x.shape != y.shape:
        raise DataError(f"shape mismatch: {x.shape} vs {y.shape}")
    return float(np.abs(x - y).mean())


def r_squared(pred: np.ndarray, actual: np.ndarray) -> float:
    """Coefficient of determination; NaN when the actuals are constant."""
    x = np.asarray(pred, dtype=np.float64).ravel()
    y = np.asarray(actual, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise DataError(f"length mismatch: {x.shape} vs {y.shape}")
    ss_tot = float(((y - y.mean()) ** 2).sum())
    if ss_tot == 0.0:
        return float("nan")
    ss_res = float(((y - x) ** 2).sum())
    return 1.0 - ss_res / ss_tot


def realized_volatility(prices: np.ndarray) -> float:
    """Sum of squared log returns over the path."""
    p = np.asarray(prices, dtype=np.float64).ravel()
    if len(p) < 2:
        raise DataError(f"need at least 2 prices, got {len(p)}")
    if np.any(p <= 0.0) or not np.all(np.isfinite(p)):
        raise DataError("realized volatility requires finite positive prices")
    r = np.diff(np.log(p))
    return float((r * r).sum())


def predicted_return(last_close: float, forecast_close_path: np.ndarray) -> float:
    """Signal for ranking: horizon-end close relative to the last context close."""
    if last_close <= 0.0 or not np.isfinite(last_close):
        raise DataError(f"last close must be a finite positive price, got {last_close}")
    path = np.asarray(forecast_close_path, dtype=np.float64).ravel()
    if len(path) == 0:
        raise DataError("empty forecast path")
    return float(path[-1] / last_close - 1.0)


# --------------------------------------------------------------------------
# panel aggregation over forecast windows


@dataclass(frozen=True)
class MetricReport:
    ic: float
    rank_ic: float
    mae: float
    r2: float
    n_windows: int
    n_excluded: int  # (window, channel) pairs whose correlation was undefined

    def as_dict(self) -> dict[str, float]:
        return {
            "ic": self.ic,
            "rank_ic": self.rank_ic,
            "mae": self.mae,
            "r2": self.r2,
            "n_windows": float(self.n_windows),
            "n_excluded": float(self.n_excluded),
        }


def _as_panel(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 2:
        a = a[None]
    if a.ndim != 3 or a.shape[2] < 4:
        raise DataError(f"expected [windows x horizon x channels>=4], got {a.shape}")
    return a


def _nanmean(values: list[float]) -> float:
    vals = [v for v in values if not np.isnan(v)]
    return float(np.mean(vals)) if vals else float("nan")


def forecast_metrics(pred: np.ndarray, actual: np.ndarray) -> MetricReport:
    """Per-window, per-price-channel IC/RankIC/R2 averaged over the panel.

    MAE is taken over every price entry.  Undefined correlations (constant
    path on either side) are excluded and counted, not averaged as zero.
    """
    p = _as_panel(pred)
    a = _as_panel(actual)
    if p.shape != a.shape:
        raise DataError(f"shape mismatch: {p.shape} vs {a.shape}")
    ics: list[float] = []
    rics: list[float] = []
    r2s: list[float] = []
    excluded = 0
    for w in range(p.shape[0]):
        for c in PRICE_CHANNELS:
            ic = pearson_ic(p[w, :, c], a[w, :, c])
            if np.isnan(ic):
                excluded += 1
            ics.append(ic)
            rics.append(rank_ic(p[w, :, c], a[w, :, c]))
            r2s.append(r_squared(p[w, :, c], a[w, :, c]))
    return MetricReport(
        ic=_nanmean(ics),
        rank_ic=_nanmean(rics),
        mae=mae(p[:, :, :4], a[:, :, :4]),
        r2=_nanmean(r2s),
        n_windows=p.shape[0],
        n_excluded=excluded,
    )


def volatility_metrics(
    pred: np.ndarray, actual: np.ndarray, last_close: np.ndarray
) -> dict[str, float]:
    """Compare realized volatility of forecast close paths across windows.

    Each path is prefixed with its window's final context close so the
    first forecast step contributes a return.
    """
    p = _as_panel(pred)
    a = _as_panel(actual)
    anchors = np.asarray(last_close, dtype=np.float64).ravel()
    if p.shape != a.shape or len(anchors) != p.shape[0]:
        raise DataError(
            f"shape mismatch: pred {p.shape}, actual {a.shape}, anchors {anchors.shape}"
        )
    rv_pred = np.array(
        [realized_volatility(np.concatenate([[anchors[w]], p[w, :, 3]])) for w in range(p.shape[0])]
    )
    rv_true = np.array(
        [realized_volatility(np.concatenate([[anchors[w]], a[w, :, 3]])) for w in range(a.shape[0])]
    )
    return {
        "ic": pearson_ic(rv_pred, rv_true),
        "rank_ic": rank_ic(rv_pred, rv_true),
        "mae": mae(rv_pred, rv_true),
        "n_windows": float(p.shape[0]),
    }


# --------------------------------------------------------------------------
# synthetic-data quality: discriminative score and train-synthetic/test-real


def _softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)) built from bounded pieces: relu(x) + log1p(exp(-|x|))."""
    pos = x.data >= 0
    relu = where(pos, x, Tensor(np.zeros_like(x.data)))
    neg_abs = where(pos, -x, x)
    return relu + (neg_abs.exp() + 1.0).log()


def _bce_with_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """mean(softplus(z) - y * z), the numerically safe binary cross-entropy."""
    y = Tensor(np.asarray(labels, dtype=np.float64))
    return (_softplus(logits) - y * logits).mean()


def _minibatches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def discriminative_score(
    real: np.ndarray,
    synthetic: np.ndarray,
    seed: int = 0,
    epochs: int = 20,
    batch_size: int = 64,
    lr: float = 5e-4,
    hidden: int = 32,
) -> dict[str, float]:
    """Train a recurrent classifier to tell real windows from synthetic ones.

    Classes are subsampled to equal size and split 80/20 per class, so both
    sides of the split stay balanced.  Reports raw held-out accuracy and its
    distance from chance; indistinguishable data scores near 0.
    """
    real = np.asarray(real, dtype=np.float64)
    synthetic = np.asarray(synthetic, dtype=np.float64)
    if real.ndim != 3 or synthetic.ndim != 3 or real.shape[1:] != synthetic.shape[1:]:
        raise DataError(
            f"expected [n x T x d] panels with matching window shape, "
            f"got {real.shape} and {synthetic.shape}"
        )
    m = min(len(real), len(synthetic))
    if m < 10:
        raise DataError(f"need at least 10 windows per class, got {m}")
    rng = np.random.Generator(np.random.PCG64(seed))
    real = real[rng.permutation(len(real))[:m]]
    synthetic = synthetic[rng.permutation(len(synthetic))[:m]]
    n_train = max(1, int(m * 0.8))
    x_train = np.concatenate([real[:n_train], synthetic[:n_train]])
    y_train = np.concatenate([np.ones(n_train), np.zeros(n_train)])
    x_test = np.concatenate([real[n_train:], synthetic[n_train:]])
    y_test = np.concatenate([np.ones(m - n_train), np.zeros(m - n_train)])

    cfg = RecurrentConfig(d_in=real.shape[2], d_hidden=hidden, n_layers=1, d_out=1)
    params = init_recurrent_params(cfg, rng)
    state = AdamWState()
    for _epoch in range(epochs):
        for batch in _minibatches(len(x_train), batch_size, rng):
            logits = recurrent_forward(Tensor(x_train[batch]), cfg, params).reshape(-1)
            loss = _bce_with_logits(logits, y_train[batch])
            zero_grads(params)
            loss.backward()
            adamw_step(params, state, lr=lr)
    logits = recurrent_forward(Tensor(x_test), cfg, params).data.reshape(-1)
    accuracy = float(((logits > 0.0) == (y_test > 0.5)).mean())
    return {
        "accuracy": accuracy,
        "score": abs(0.5 - accuracy),
        "n_train": float(2 * n_train),
        "n_test": float(len(y_test)),
    }


def tstr_score(
    synthetic: np.ndarray,
    real: np.ndarray,
    horizon: int,
    seed: int = 0,
    epochs: int = 20,
    batch_size: int = 64,
    lr: float = 1e-3,
    hidden: int = 64,
) -> dict[str, float]:
    """Train-on-synthetic, test-on-real forecasting probe.

    A two-layer recurrent regressor learns to map the first T-horizon bars
    of a window to its final ``horizon`` bars of prices, trained only on
    synthetic windows and scored on real ones (MSE plus per-window IC
    averaged over price channels).
    """
    synthetic = np.asarray(synthetic, dtype=np.float64)
    real = np.asarray(real, dtype=np.float64)
    if synthetic.ndim != 3 or real.ndim != 3 or synthetic.shape[1:] != real.shape[1:]:
        raise DataError(
            f"expected matching [n x T x d] panels, got {synthetic.shape} and {real.shape}"
        )
    t = synthetic.shape[1]
    if not 1 <= horizon < t:
        raise ConfigError(f"horizon must be in [1, {t - 1}], got {horizon}")

    def split(panel: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        ctx = panel[:, : t - horizon, :]
        tgt = panel[:, t - horizon :, :4].reshape(len(panel), horizon * 4)
        return ctx, tgt

    x_train, y_train = split(synthetic)
    x_test, y_test = split(real)
    rng = np.random.Generator(np.random.PCG64(seed))
    cfg = RecurrentConfig(
        d_in=synthetic.shape[2], d_hidden=hidden, n_layers=2, d_out=horizon * 4
    )
    params = init_recurrent_params(cfg, rng)
    state = AdamWState()
    for _epoch in range(epochs):
        for batch in _minibatches(len(x_train), batch_size, rng):
            pred = recurrent_forward(Tensor(x_train[batch]), cfg, params)
            diff = pred - Tensor(y_train[batch])
            loss = (diff * diff).mean()
            zero_grads(params)
            loss.backward()
            adamw_step(params, state, lr=lr)
    pred = recurrent_forward(Tensor(x_test), cfg, params).data
    mse = float(((pred - y_test) ** 2).mean())
    if horizon >= 2:
        pred_panel = pred.reshape(len(x_test), horizon, 4)
        true_panel = y_test.reshape(len(x_test), horizon, 4)
        ics = [
            pearson_ic(pred_panel[w, :, c], true_panel[w, :, c])
            for w in range(len(x_test))
            for c in range(4)
        ]
    else:
        # one-step horizon: correlate across windows per channel instead
        pred_panel = pred.reshape(len(x_test), 4)
        true_panel = y_test.reshape(len(x_test), 4)
        ics = [pearson_ic(pred_panel[:, c], true_panel[:, c]) for c in range(4)]
    return {"mse": mse, "ic": _nanmean(ics), "n_test": float(len(x_test))}


# --------------------------------------------------------------------------
# top-k long-only backtest


@dataclass(frozen=True)
class BacktestResult:
    values: np.ndarray  # [D] end-of-day portfolio value, values[0] after day-0 fills
    pnl: np.ndarray  # [D] daily mark-to-market gain before costs (0 on day 0)
    costs: np.ndarray  # [D] transaction fees paid that day
    excess_returns: np.ndarray  # [D-1] daily strategy return minus benchmark return
    annualized_excess_return: float
    information_ratio: float
    n_buys: int
    n_sells: int

    @property
    def final_value(self) -> float:
        return float(self.values[-1])


def _rank_buy(signals: np.ndarray, candidates: list[int]) -> list[int]:
    return sorted(candidates, key=lambda a: (-signals[a], a))


def _rank_sell(signals: np.ndarray, candidates: list[int]) -> list[int]:
    return sorted(candidates, key=lambda a: (signals[a], a))


def backtest_topk(
    signals: np.ndarray,
    prices: np.ndarray,
    benchmark: np.ndarray,
    top_k: int = 5,
    max_trades_per_day: int = 2,
    min_hold_days: int = 5,
    cost_rate: float = 0.0015,
    initial_cash: float = 1.0,
) -> BacktestResult:
    """Daily-rebalanced long-only top-k simulation with proportional fees.

    Day 0 fills the book up to ``top_k`` positions with equal cash budgets.
    Every later day sells at most ``max_trades_per_day`` held names that
    dropped out of the current top-k and have been held at least
    ``min_hold_days`` (worst signal first), then buys at most that many of
    the best unheld top-k names with the freed cash split equally across
    open slots.  Buys reserve the fee inside the budget, so cash never goes
    negative.  Value changes decompose exactly into price pnl minus fees.
    """
    signals = np.asarray(signals, dtype=np.float64)
    prices = np.asarray(prices, dtype=np.float64)
    benchmark = np.asarray(benchmark, dtype=np.float64).ravel()
    if signals.ndim != 2 or signals.shape != prices.shape:
        raise DataError(
            f"signals and prices must share [days x assets], got {signals.shape} vs {prices.shape}"
        )
    n_days, n_assets = signals.shape
    if n_days < 2:
        raise DataError(f"need at least 2 days to backtest, got {n_days}")
    if len(benchmark) != n_days:
        raise DataError(f"benchmark length {len(benchmark)} != {n_days} days")
    if not (np.all(np.isfinite(signals)) and np.all(np.isfinite(prices)) and np.all(prices > 0)):
        raise DataError("signals must be finite and prices finite positive")
    if np.any(benchmark <= 0) or not np.all(np.isfinite(benchmark)):
        raise DataError("benchmark must be finite positive")
    if top_k < 1 or max_trades_per_day < 0 or min_hold_days < 0 or cost_rate < 0:
        raise ConfigError(
            f"invalid backtest parameters: top_k={top_k}, "
            f"max_trades_per_day={max_trades_per_day}, "
            f"min_hold_days={min_hold_days}, cost_rate={cost_rate}"
        )

    cash = float(initial_cash)
    shares: dict[int, float] = {}
    entry_day: dict[int, int] = {}
    values = np.zeros(n_days)
    pnl = np.zeros(n_days)
    costs = np.zeros(n_days)
    n_buys = n_sells = 0

    def buy(asset: int, budget: float, day: int) -> float:
        nonlocal cash, n_buys
        notional = budget / (1.0 + cost_rate)
        fee = notional * cost_rate
        shares[asset] = notional / prices[day, asset]
        entry_day[asset] = day
        cash -= notional + fee
        n_buys += 1
        return fee

    def sell(asset: int, day: int) -> float:
        nonlocal cash, n_sells
        notional = shares.pop(asset) * prices[day, asset]
        fee = notional * cost_rate
        entry_day.pop(asset)
        cash += notional - fee
        n_sells += 1
        return fee

    for day in range(n_days):
        if day > 0:
            pnl[day] = sum(s * (prices[day, a] - prices[day - 1, a]) for a, s in shares.items())
        ranked_all = _rank_buy(signals[day], list(range(n_assets)))
        target = set(ranked_all[:top_k])
        fees_today = 0.0
        if day == 0:
            to_buy = ranked_all[:top_k]
        else:
            sellable = [a for a in shares if a not in target and day - entry_day[a] >= min_hold_days]
            for a in _rank_sell(signals[day], sellable)[:max_trades_per_day]:
                fees_today += sell(a, day)
            wanted = [a for a in ranked_all[:top_k] if a not in shares]
            to_buy = wanted[:max_trades_per_day]
        slots = top_k - len(shares)
        for a in to_buy[:slots]:
            remaining_slots = top_k - len(shares)
            budget = cash / remaining_slots
            fees_today += buy(a, budget, day)
        costs[day] = fees_today
        values[day] = cash + sum(s * prices[day, a] for a, s in shares.items())

    periods = n_days - 1
    ann = TRADING_DAYS_PER_YEAR / periods
    strat_total = values[-1] / values[0]
    bench_total = benchmark[-1] / benchmark[0]
    aer = float(strat_total**ann - bench_total**ann)
    strat_ret = values[1:] / values[:-1] - 1.0
    bench_ret = benchmark[1:] / benchmark[:-1] - 1.0
    excess = strat_ret - bench_ret
    spread = excess.std(ddof=1) if periods > 1 else 0.0
    ir = float(excess.mean() / spread * np.sqrt(TRADING_DAYS_PER_YEAR)) if spread > 0 else float("nan")
    return BacktestResult(
        values=values,
        pnl=pnl,
        costs=costs,
        excess_returns=excess,
        annualized_excess_return=aer,
        information_ratio=ir,
        n_buys=n_buys,
        n_sells=n_sells,
    )
