"""Stochastic forecasting: temperature/nucleus sampling over token pairs,
incremental decoding with per-layer KV caches, and Monte Carlo ensembling.

The incremental path recomputes nothing: each fed token runs one attention
step per layer against cached keys/values (see kline._kernels).  While the
sequence fits in the model's context window this reproduces the training
forward exactly.  Once the window is full the oldest cache entry is
evicted and attention streams over the most recent window; rotary scores
depend only on position offsets, so no re-rotation is needed.

Every produced token pair consumes exactly two uniform draws from the
supplied rng (one per subtoken), so sampling behavior is auditable.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import _kernels
from .armodel import ARModel, future_timestamps, temporal_features
from .core import Frequency, KLineSeries
from .errors import ConfigError, DataError
from .pipeline import fit_normalization, normalize, denormalize
from .tokenizer import TokenizerModel, encode, decode

__all__ = [
    "SamplingConfig",
    "TASK_SAMPLING_DEFAULTS",
    "apply_temperature",
    "nucleus_filter",
    "IncrementalDecoder",
    "generate",
    "ForecastResult",
    "forecast",
    "ensemble_variance_study",
]


@dataclass(frozen=True)
class SamplingConfig:
    temperature: float = 1.0
    top_p: float = 1.0
    n_samples: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.temperature <= 0.0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if not 0.0 < self.top_p <= 1.0:
            raise ConfigError(f"top_p must be in (0, 1], got {self.top_p}")
        if self.n_samples < 1:
            raise ConfigError(f"n_samples must be >= 1, got {self.n_samples}")


# Task-calibrated defaults: (temperature, top_p, n_samples).
TASK_SAMPLING_DEFAULTS: dict[str, SamplingConfig] = {
    "forecast": SamplingConfig(temperature=0.6, top_p=0.90, n_samples=10),
    "volatility": SamplingConfig(temperature=0.9, top_p=0.90, n_samples=1),
    "generation": SamplingConfig(temperature=1.0, top_p=0.95, n_samples=1),
}


def apply_temperature(logits: np.ndarray, temperature: float) -> np.ndarray:
    """softmax(logits / T) along the last axis, computed stably."""
    if temperature <= 0.0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def nucleus_filter(probs: np.ndarray, top_p: float) -> np.ndarray:
    """Keep the smallest probability-descending prefix with mass >= top_p.

    The entry that crosses the threshold is kept; ties in probability break
    toward the lower index.  The survivors are renormalized.  top_p == 1
    returns the distribution unchanged.
    """
    if not 0.0 < top_p <= 1.0:
        raise ConfigError(f"top_p must be in (0, 1], got {top_p}")
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 1:
        raise ConfigError(f"nucleus_filter expects a probability vector, got shape {probs.shape}")
    if top_p >= 1.0:
        return probs.copy()
    order = np.argsort(-probs, kind="stable")
    cum = np.cumsum(probs[order])
    cut = int(np.searchsorted(cum, top_p, side="left"))
    cut = min(cut, len(probs) - 1)
    keep = order[: cut + 1]
    out = np.zeros_like(probs)
    out[keep] = probs[keep]
    return out / out.sum()


def _draw(probs: np.ndarray, u: float) -> int:
    cum = np.cumsum(probs)
    return int(min(np.searchsorted(cum, u, side="right"), len(probs) - 1))


def _rope_rows(x: np.ndarray, position: int, n_heads: int) -> np.ndarray:
    """Rotate one [d] projection row at an absolute position; returns [H x dh]."""
    d = x.shape[0]
    dh = d // n_heads
    half = dh // 2
    inv_freq = 10_000.0 ** (-np.arange(half, dtype=np.float64) * 2.0 / dh)
    theta = position * inv_freq
    cos, sin = np.cos(theta), np.sin(theta)
    heads = x.reshape(n_heads, dh)
    a, b = heads[:, :half], heads[:, half:]
    return np.concatenate([a * cos - b * sin, a * sin + b * cos], axis=1)


def _silu(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    sig = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return x * sig


class IncrementalDecoder:
    """Token-at-a-time forward pass with per-layer KV caches.

    Up to max_context fed tokens this mirrors the training forward in eval
    mode (tests pin agreement to 1e-10).  Past that, the oldest cache row
    is dropped and each new token attends to the most recent window;
    because cached entries were built while older history was still
    visible, this streaming scheme carries strictly more context than a
    fresh forward on the truncated suffix would.  Rotary scores depend
    only on position offsets, so sliding needs no re-rotation.
    """

    def __init__(self, model: ARModel):
        self.model = model
        cfg = model.cfg
        self._np_params = {k: v.data for k, v in model.params.items()}
        self.capacity = cfg.max_context
        self.n_heads = cfg.n_heads
        self.d_head = cfg.d_model // cfg.n_heads
        self.k_cache = [
            np.zeros((self.capacity, self.n_heads, self.d_head)) for _ in range(cfg.n_layers)
        ]
        self.v_cache = [
            np.zeros((self.capacity, self.n_heads, self.d_head)) for _ in range(cfg.n_layers)
        ]
        self.cached = 0  # valid rows in each cache
        self.position = 0  # absolute position of the next fed token

    def _fuse(self, pair: tuple[int, int], temporal_row: np.ndarray) -> np.ndarray:
        p = self._np_params
        v_sub = self.model.cfg.sub_vocab
        c, f = int(pair[0]), int(pair[1])
        if not (0 <= c < v_sub and 0 <= f < v_sub):
            raise IndexError(f"token pair ({c}, {f}) out of range [0, {v_sub})")
        fused = np.concatenate([p["emb.coarse"][c], p["emb.fine"][f]]) @ p["fuse.w"]
        from .armodel import TEMPORAL_FIELDS, TEMPORAL_SIZES

        for i, name in enumerate(TEMPORAL_FIELDS):
            idx = int(temporal_row[i])
            if not 0 <= idx < TEMPORAL_SIZES[name]:
                raise IndexError(f"temporal index {idx} out of range for {name}")
            fused = fused + p[f"temporal.{name}"][idx]
        return fused

    def feed(self, pair: tuple[int, int], temporal_row: np.ndarray) -> np.ndarray:
        """Feed one token pair; returns the history state h after it."""
        cfg = self.model.cfg
        p = self._np_params
        eps = 1e-12
        x = self._fuse(pair, temporal_row)
        if self.cached == self.capacity:
            for layer in range(cfg.n_layers):
                self.k_cache[layer][:-1] = self.k_cache[layer][1:]
                self.v_cache[layer][:-1] = self.v_cache[layer][1:]
            self.cached -= 1
        slot = self.cached
        for layer in range(cfg.n_layers):
            xn = _kernels.rmsnorm_row(x, p[f"backbone.{layer}.norm1"], eps)
            q = _rope_rows(xn @ p[f"backbone.{layer}.attn.wq"], self.position, self.n_heads)
            k = _rope_rows(xn @ p[f"backbone.{layer}.attn.wk"], self.position, self.n_heads)
            v = (xn @ p[f"backbone.{layer}.attn.wv"]).reshape(self.n_heads, self.d_head)
            self.k_cache[layer][slot] = k
            self.v_cache[layer][slot] = v
            attended = _kernels.attn_step(
                np.ascontiguousarray(q),
                self.k_cache[layer][: slot + 1],
                self.v_cache[layer][: slot + 1],
            )
            x = x + attended.reshape(-1) @ p[f"backbone.{layer}.attn.wo"]
            xn2 = _kernels.rmsnorm_row(x, p[f"backbone.{layer}.norm2"], eps)
            gated = _silu(xn2 @ p[f"backbone.{layer}.ffn.wg"]) * (xn2 @ p[f"backbone.{layer}.ffn.wu"])
            x = x + gated @ p[f"backbone.{layer}.ffn.wd"]
        self.cached = slot + 1
        self.position += 1
        return _kernels.rmsnorm_row(x, p["backbone.norm"], eps)

    def coarse_distribution(self, h: np.ndarray, sampling: SamplingConfig) -> np.ndarray:
        logits = h @ self._np_params["head.coarse"]
        return nucleus_filter(apply_temperature(logits, sampling.temperature), sampling.top_p)

    def fine_distribution(
        self, h: np.ndarray, coarse_choice: int, sampling: SamplingConfig
    ) -> np.ndarray:
        p = self._np_params
        # single-slot cross-attention: the softmax weight is exactly 1, so
        # the attended value reduces to (h @ wv) @ wo; the query enters
        # through the residual.
        h_update = p["emb.coarse"][coarse_choice] + (h @ p["xattn.wv"]) @ p["xattn.wo"]
        logits = h_update @ p["head.fine"]
        return nucleus_filter(apply_temperature(logits, sampling.temperature), sampling.top_p)


def generate(
    model: ARModel,
    context_pairs: np.ndarray,
    context_temporal: np.ndarray,
    future_temporal: np.ndarray,
    horizon: int,
    sampling: SamplingConfig,
    rng: np.random.Generator,
) -> np.ndarray:
    """Sample ``horizon`` new token pairs after the given context.

    Context longer than the model's max_context is truncated to the most
    recent window (never an error); generation slides the window as it
    goes.  Consumes exactly 2 * horizon uniform draws via ``rng.random()``.
    """
    context_pairs = np.asarray(context_pairs)
    context_temporal = np.asarray(context_temporal)
    future_temporal = np.asarray(future_temporal)
    if horizon < 1:
        raise ConfigError(f"horizon must be >= 1, got {horizon}")
    if len(future_temporal) < horizon:
        raise ConfigError(
            f"need {horizon} future temporal rows, got {len(future_temporal)}"
        )
    if context_pairs.ndim != 2 or context_pairs.shape[1] != 2:
        raise ConfigError(f"expected [T x 2] context pairs, got {context_pairs.shape}")
    if len(context_pairs) == 0:
        raise DataError("cannot generate from an empty context")
    cap = model.cfg.max_context
    if len(context_pairs) > cap:
        context_pairs = context_pairs[-cap:]
        context_temporal = context_temporal[-cap:]
    dec = IncrementalDecoder(model)
    h = None
    for pair, row in zip(context_pairs, context_temporal):
        h = dec.feed((int(pair[0]), int(pair[1])), row)
    out = np.empty((horizon, 2), dtype=np.int64)
    for step in range(horizon):
        probs_c = dec.coarse_distribution(h, sampling)
        c = _draw(probs_c, rng.random())
        probs_f = dec.fine_distribution(h, c, sampling)
        f = _draw(probs_f, rng.random())
        out[step] = (c, f)
        if step + 1 < horizon:
            h = dec.feed((c, f), future_temporal[step])
    return out


# --------------------------------------------------------------------------
# forecasting


@dataclass(frozen=True)
class ForecastResult:
    """Monte Carlo forecast: per-rollout paths plus their elementwise mean."""

    asset_id: str
    frequency: Frequency
    timestamps: np.ndarray  # [H]
    samples: np.ndarray  # [N x H x 6], denormalized
    ensemble_mean: np.ndarray  # [H x 6]
    tokens: np.ndarray  # [N x H x 2]
    sampling: SamplingConfig


def _one_rollout(
    ar_model: ARModel,
    tok_model: TokenizerModel,
    context_pairs: np.ndarray,
    context_temporal: np.ndarray,
    future_temporal: np.ndarray,
    horizon: int,
    sampling: SamplingConfig,
    seed: np.random.SeedSequence,
    stats,
) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.Generator(np.random.PCG64(seed))
    tokens = generate(
        ar_model, context_pairs, context_temporal, future_temporal, horizon, sampling, rng
    )
    full = np.concatenate([context_pairs, tokens], axis=0)
    recon = decode(full, tok_model, mode="full")[-horizon:]
    values = denormalize(recon, stats)
    values[:, 4:6] = np.maximum(values[:, 4:6], 0.0)  # volume/amount stay physical
    return values, tokens


def forecast(
    window: KLineSeries,
    tokenizer_model: TokenizerModel,
    ar_model: ARModel,
    horizon: int,
    sampling: SamplingConfig | None = None,
    threads: int = 1,
) -> ForecastResult:
    """Normalize, tokenize, roll out N stochastic paths, decode, average.

    Per-window statistics fitted on the context also denormalize the
    forecast.  Rollout seeds spawn from ``sampling.seed``, so any thread
    count yields the same result as the sequential path.
    """
    if sampling is None:
        sampling = TASK_SAMPLING_DEFAULTS["forecast"]
    if len(window) < 2:
        raise DataError(f"need at least 2 context bars to forecast, got {len(window)}")
    stats = fit_normalization(window)
    z = normalize(window, stats)
    context_pairs = encode(z, tokenizer_model)
    context_temporal = temporal_features(window.timestamps(), window.frequency)
    fut_ts = future_timestamps(int(window.timestamps()[-1]), window.frequency, horizon)
    fut_temporal = temporal_features(fut_ts, window.frequency)
    seeds = np.random.SeedSequence(sampling.seed).spawn(sampling.n_samples)

    def run(seed: np.random.SeedSequence) -> tuple[np.ndarray, np.ndarray]:
        return _one_rollout(
            ar_model,
            tokenizer_model,
            context_pairs,
            context_temporal,
            fut_temporal,
            horizon,
            sampling,
            seed,
            stats,
        )

    if threads > 1 and sampling.n_samples > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, seeds))
    else:
        results = [run(s) for s in seeds]
    samples = np.stack([r[0] for r in results])
    tokens = np.stack([r[1] for r in results])
    return ForecastResult(
        asset_id=window.asset_id,
        frequency=window.frequency,
        timestamps=fut_ts,
        samples=samples,
        ensemble_mean=samples.mean(axis=0),
        tokens=tokens,
        sampling=sampling,
    )


def ensemble_variance_study(
    window: KLineSeries,
    tokenizer_model: TokenizerModel,
    ar_model: ARModel,
    horizon: int,
    n_samples_list: list[int],
    trials: int,
    sampling: SamplingConfig | None = None,
    seed: int = 0,
) -> list[dict[str, float]]:
    """Measure how ensemble averaging stabilizes the forecast.

    For each ensemble size N, runs ``trials`` independent forecasts and
    reports the across-trial dispersion (mean per-entry std) of the
    ensemble-mean path.  Larger N should not increase dispersion.
    """
    if trials < 2:
        raise ConfigError(f"need >= 2 trials to measure dispersion, got {trials}")
    base = sampling or TASK_SAMPLING_DEFAULTS["forecast"]
    trial_seeds = np.random.SeedSequence(seed).generate_state(len(n_samples_list) * trials)
    rows = []
    i = 0
    for n in n_samples_list:
        means = []
        for _trial in range(trials):
            cfg = replace(base, n_samples=n, seed=int(trial_seeds[i]))
            i += 1
            res = forecast(window, tokenizer_model, ar_model, horizon, cfg)
            means.append(res.ensemble_mean)
        arr = np.stack(means)
        rows.append(
            {
                "n_samples": float(n),
                "forecast_mean": float(arr.mean()),
                "dispersion": float(arr.std(axis=0).mean()),
            }
        )
    return rows
