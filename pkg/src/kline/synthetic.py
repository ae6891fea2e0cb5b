"""Deterministic synthetic bar data for demos and tests.

All generators are seeded and anchored at 2024-01-01 00:00 UTC (a Monday),
which keeps daily and weekly bar alignment valid.  Prices stay positive and
OHLC bounds hold by construction.
"""

from __future__ import annotations

import numpy as np

from .core import Frequency, KLineRecord, KLineSeries

__all__ = [
    "BASE_TIMESTAMP",
    "make_sine_series",
    "make_ar1_series",
    "make_messy_series",
    "make_backtest_panel",
]

BASE_TIMESTAMP = 1_704_067_200  # 2024-01-01 00:00:00 UTC, a Monday


def _bars_from_closes(
    closes: np.ndarray,
    frequency: Frequency,
    rng: np.random.Generator,
    start: int = BASE_TIMESTAMP,
) -> list[KLineRecord]:
    n = len(closes)
    opens = np.empty(n)
    opens[0] = closes[0] * (1.0 + 0.001 * rng.standard_normal())
    opens[1:] = closes[:-1] * (1.0 + 0.0005 * rng.standard_normal(n - 1))
    wick = np.abs(rng.standard_normal(n)) * 0.002
    highs = np.maximum(opens, closes) * (1.0 + wick)
    lows = np.minimum(opens, closes) * (1.0 - wick)
    volumes = np.exp(rng.normal(10.0, 0.3, n))
    amounts = volumes * closes * (1.0 + 0.001 * rng.standard_normal(n))
    step = frequency.bar_seconds
    return [
        KLineRecord(
            timestamp=start + i * step,
            open=float(opens[i]),
            high=float(highs[i]),
            low=float(lows[i]),
            close=float(closes[i]),
            volume=float(volumes[i]),
            amount=float(amounts[i]),
        )
        for i in range(n)
    ]


def make_sine_series(
    asset_id: str = "sine",
    frequency: Frequency = Frequency.DAILY,
    n: int = 256,
    seed: int = 0,
    period: float = 32.0,
    noise: float = 0.002,
) -> KLineSeries:
    """Price oscillates around 100 on a sine wave; highly learnable."""
    rng = np.random.Generator(np.random.PCG64(seed))
    t = np.arange(n)
    closes = 100.0 * (1.0 + 0.05 * np.sin(2.0 * np.pi * t / period))
    closes = closes * np.exp(noise * rng.standard_normal(n))
    return KLineSeries(asset_id, frequency, tuple(_bars_from_closes(closes, frequency, rng)))


def make_ar1_series(
    asset_id: str = "ar1",
    frequency: Frequency = Frequency.DAILY,
    n: int = 256,
    seed: int = 0,
    phi: float = 0.98,
    sigma: float = 0.01,
    drift: float = 0.0001,
) -> KLineSeries:
    """Log price follows a mean-reverting AR(1) walk with drift."""
    rng = np.random.Generator(np.random.PCG64(seed))
    x = np.zeros(n)
    shocks = rng.standard_normal(n) * sigma
    for i in range(1, n):
        x[i] = phi * x[i - 1] + shocks[i] + drift
    closes = 100.0 * np.exp(x)
    return KLineSeries(asset_id, frequency, tuple(_bars_from_closes(closes, frequency, rng)))


def make_messy_series(
    asset_id: str = "messy",
    frequency: Frequency = Frequency.DAILY,
    n: int = 1200,
    seed: int = 0,
) -> KLineSeries:
    """An AR(1) series with injected defects for exercising the cleaner.

    Contains a missing price, an overlong zero-volume run, an overlong
    stagnant-close run, a large overnight jump, and a few absent
    volume/amount fields.  Defect positions scale with ``n`` and leave
    stretches long enough to survive the default length filter at daily
    frequency when n >= 1200.
    """
    base = make_ar1_series(asset_id, frequency, n, seed=seed + 1)
    records = list(base.records)

    def patch(i: int, **kw) -> None:
        rec = records[i]
        fields = {
            "timestamp": rec.timestamp,
            "open": rec.open,
            "high": rec.high,
            "low": rec.low,
            "close": rec.close,
            "volume": rec.volume,
            "amount": rec.amount,
            "volume_present": rec.volume_present,
            "amount_present": rec.amount_present,
        }
        fields.update(kw)
        records[i] = KLineRecord(**fields)

    patch(n // 6, close=float("nan"))
    for i in range(n // 3, n // 3 + 40):  # overlong illiquid run
        patch(i, volume=0.0, amount=0.0)
    anchor = records[3 * n // 5].close
    for i in range(3 * n // 5, 3 * n // 5 + 40):  # overlong stagnant run
        patch(i, open=anchor, high=anchor, low=anchor, close=anchor)
    for i in range(7 * n // 8, n):  # regime shift: a 60% overnight gap
        rec = records[i]
        patch(
            i,
            open=rec.open * 1.6,
            high=rec.high * 1.6,
            low=rec.low * 1.6,
            close=rec.close * 1.6,
        )
    for i in (n // 24, n // 2, 3 * n // 4, n - n // 16):  # unobserved volume/amount
        patch(i, volume=0.0, amount=0.0, volume_present=False, amount_present=False)
    return KLineSeries(asset_id, frequency, tuple(records))


def make_backtest_panel(
    n_days: int = 120,
    n_assets: int = 8,
    seed: int = 0,
    signal_strength: float = 0.6,
) -> tuple[np.ndarray, list[str], np.ndarray, np.ndarray, np.ndarray]:
    """Synthetic (timestamps, asset ids, signals, prices, benchmark).

    Signals mix the true next-day return with noise, so ranking by signal
    carries real information at the chosen strength.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    rets = rng.normal(0.0003, 0.015, size=(n_days, n_assets))
    prices = 100.0 * np.exp(np.cumsum(rets, axis=0))
    next_ret = np.zeros_like(rets)
    next_ret[:-1] = prices[1:] / prices[:-1] - 1.0
    noise = rng.normal(0.0, 0.015, size=next_ret.shape)
    signals = signal_strength * next_ret + (1.0 - signal_strength) * noise
    benchmark = prices.mean(axis=1)
    timestamps = BASE_TIMESTAMP + 86_400 * np.arange(n_days, dtype=np.int64)
    ids = [f"asset{i:02d}" for i in range(n_assets)]
    return timestamps, ids, signals, prices, benchmark
