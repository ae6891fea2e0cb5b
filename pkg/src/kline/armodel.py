"""Autoregressive transformer over (coarse, fine) token pairs.

Each position fuses the two subtoken embeddings plus calendar embeddings
into one vector; a causal RoPE transformer produces history states h_t.
The coarse head reads h_t directly.  The fine head conditions on the
coarse choice: the chosen coarse embedding queries h_t through a one-slot
cross-attention block (the query survives via the residual) and the result
feeds the fine logits.  Training samples the coarse condition from the
model's own distribution while the cross-entropy targets stay ground truth.

``count_parameters`` reports how the parameter budget would split if the
k bits were factorized into n subtokens per bar, which is how vocabulary
size is traded against sequence length.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from typing import Sequence

import numpy as np

from . import nn
from .core import Frequency
from .errors import ConfigError, ContextOverflowError, NumericError
from .optim import AdamWState, adamw_step, cosine_schedule, zero_grads
from .tensor import Tensor, concat, embedding_lookup, take_along_last

__all__ = [
    "ARConfig",
    "ARModel",
    "ARTrainConfig",
    "AR_PRESETS",
    "TEMPORAL_FIELDS",
    "TEMPORAL_SIZES",
    "ParamAudit",
    "temporal_features",
    "future_timestamps",
    "init_ar_model",
    "fuse_input",
    "backbone",
    "coarse_logits",
    "fine_logits",
    "cross_entropy",
    "sample_rows",
    "ar_loss",
    "train_ar",
    "count_parameters",
    "count_model_parameters",
]

# Calendar features; index 0 of every table is the "not applicable" sentinel.
TEMPORAL_FIELDS = ("minute", "hour", "weekday", "day", "month")
TEMPORAL_SIZES = {"minute": 61, "hour": 25, "weekday": 8, "day": 32, "month": 13}


@dataclass(frozen=True)
class ARConfig:
    n_layers: int
    d_model: int
    d_ff: int
    n_heads: int
    k: int = 16
    max_context: int = 512
    dropout_ffn: float = 0.0
    dropout_residual: float = 0.0
    dropout_attn: float = 0.0
    dropout_token: float = 0.0

    def __post_init__(self) -> None:
        if self.k < 2 or self.k % 2 != 0:
            raise ConfigError(f"k must be a positive even integer, got {self.k}")
        if self.max_context < 2:
            raise ConfigError(f"max_context must be >= 2, got {self.max_context}")
        if not 0.0 <= self.dropout_token < 1.0:
            raise ConfigError(f"dropout_token must be in [0, 1), got {self.dropout_token}")
        self.attention()  # validates dims and the other dropout rates

    @property
    def sub_vocab(self) -> int:
        return 1 << (self.k // 2)

    def attention(self) -> nn.AttentionConfig:
        return nn.AttentionConfig(
            self.d_model,
            self.n_heads,
            self.d_ff,
            causal=True,
            dropout_attn=self.dropout_attn,
            dropout_residual=self.dropout_residual,
            dropout_ffn=self.dropout_ffn,
        )


AR_PRESETS: dict[str, ARConfig] = {
    "tiny": ARConfig(n_layers=2, d_model=64, d_ff=128, n_heads=4, k=16, max_context=128),
    "small": ARConfig(
        n_layers=8, d_model=512, d_ff=1024, n_heads=8, k=20, max_context=512,
        dropout_ffn=0.25, dropout_residual=0.25, dropout_attn=0.1, dropout_token=0.1,
    ),
    "base": ARConfig(
        n_layers=12, d_model=832, d_ff=2048, n_heads=16, k=20, max_context=512,
        dropout_ffn=0.20, dropout_residual=0.20,
    ),
    "large": ARConfig(n_layers=18, d_model=1664, d_ff=3072, n_heads=32, k=20, max_context=512),
}

# (peak_lr, weight_decay) defaults per preset
AR_OPT_DEFAULTS: dict[str, tuple[float, float]] = {
    "tiny": (1e-3, 0.01),
    "small": (1e-3, 0.01),
    "base": (5e-4, 0.05),
    "large": (2e-4, 0.10),
}


@dataclass
class ARModel:
    cfg: ARConfig
    params: dict[str, Tensor]


def init_ar_model(cfg: ARConfig, seed: int | np.random.SeedSequence = 0) -> ARModel:
    rng = np.random.Generator(np.random.PCG64(seed))
    d = cfg.d_model
    v = cfg.sub_vocab
    params: dict[str, Tensor] = {
        "emb.coarse": nn._init(rng, v, d),
        "emb.fine": nn._init(rng, v, d),
        "fuse.w": nn._init(rng, 2 * d, d),
    }
    for name in TEMPORAL_FIELDS:
        params[f"temporal.{name}"] = nn._init(rng, TEMPORAL_SIZES[name], d)
    attn_cfg = cfg.attention()
    for i in range(cfg.n_layers):
        params.update(nn.init_layer_params(attn_cfg, rng, f"backbone.{i}"))
    params["backbone.norm"] = Tensor(np.ones(d), requires_grad=True)
    params.update(nn.init_cross_attention_params(d, rng, "xattn"))
    params["head.coarse"] = nn._init(rng, d, v)
    params["head.fine"] = nn._init(rng, d, v)
    return ARModel(cfg, params)


# --------------------------------------------------------------------------
# calendar features


def temporal_features(timestamps: np.ndarray, frequency: Frequency) -> np.ndarray:
    """[T x 5] embedding indices (minute, hour, weekday, day, month).

    Minute and hour carry the sentinel 0 at daily and coarser frequencies;
    observed values are shifted by +1 so 0 never collides with them.
    Minute resolution is minute-of-hour: together with the hour feature it
    encodes minute-of-day without a 1440-row table.
    """
    ts = np.asarray(timestamps, dtype=np.int64)
    out = np.zeros((len(ts), len(TEMPORAL_FIELDS)), dtype=np.int64)
    intraday = frequency.is_intraday
    for i, t in enumerate(ts):
        dt = datetime.fromtimestamp(int(t), tz=timezone.utc)
        out[i, 0] = dt.minute + 1 if intraday else 0
        out[i, 1] = dt.hour + 1 if intraday else 0
        out[i, 2] = dt.weekday() + 1
        out[i, 3] = dt.day
        out[i, 4] = dt.month
    return out


def future_timestamps(last_timestamp: int, frequency: Frequency, horizon: int) -> np.ndarray:
    """The next ``horizon`` grid timestamps after ``last_timestamp``."""
    if horizon < 1:
        raise ConfigError(f"horizon must be >= 1, got {horizon}")
    step = frequency.bar_seconds
    return last_timestamp + step * np.arange(1, horizon + 1, dtype=np.int64)


# --------------------------------------------------------------------------
# forward pieces


def fuse_input(
    pairs: np.ndarray,
    temporal: np.ndarray,
    model: ARModel,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """[..., T, 2] token pairs + [..., T, 5] calendar rows -> [..., T, d]."""
    pairs = np.asarray(pairs)
    temporal = np.asarray(temporal)
    if pairs.shape[-1] != 2:
        raise ConfigError(f"expected trailing dim 2 for token pairs, got {pairs.shape}")
    if temporal.shape[-1] != len(TEMPORAL_FIELDS):
        raise ConfigError(f"expected trailing dim 5 for temporal rows, got {temporal.shape}")
    if pairs.shape[:-1] != temporal.shape[:-1]:
        raise ConfigError(
            f"token/temporal leading shapes differ: {pairs.shape[:-1]} vs {temporal.shape[:-1]}"
        )
    p = model.params
    e_c = embedding_lookup(p["emb.coarse"], pairs[..., 0])
    e_f = embedding_lookup(p["emb.fine"], pairs[..., 1])
    v = concat([e_c, e_f], axis=-1) @ p["fuse.w"]
    for i, name in enumerate(TEMPORAL_FIELDS):
        v = v + embedding_lookup(p[f"temporal.{name}"], temporal[..., i])
    if train and model.cfg.dropout_token > 0.0:
        if rng is None:
            raise ValueError("train-mode token dropout needs an rng")
        keep = rng.random(v.shape[:-1]) >= model.cfg.dropout_token
        mask = keep[..., None] / (1.0 - model.cfg.dropout_token)
        v = v * Tensor(mask)
    return v


def backbone(
    v: Tensor,
    model: ARModel,
    positions: np.ndarray | None = None,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Causal transformer over fused inputs; returns normalized states h."""
    t = v.shape[-2]
    if t > model.cfg.max_context:
        raise ContextOverflowError(
            f"sequence length {t} exceeds max_context {model.cfg.max_context}"
        )
    attn_cfg = model.cfg.attention()
    h = v
    for i in range(model.cfg.n_layers):
        h = nn.transformer_layer(h, attn_cfg, model.params, f"backbone.{i}", positions, train, rng)
    return nn.rmsnorm(h, model.params["backbone.norm"])


def coarse_logits(h: Tensor, model: ARModel) -> Tensor:
    return h @ model.params["head.coarse"]


def fine_logits(h: Tensor, coarse_choice: np.ndarray, model: ARModel) -> Tensor:
    """Logits for the fine subtoken given history state and a coarse choice.

    The coarse embedding is the cross-attention query against the single
    history slot h_t, so changing the choice shifts the logits through the
    residual path.
    """
    q = embedding_lookup(model.params["emb.coarse"], np.asarray(coarse_choice))
    h_update = nn.cross_attention(q, h, model.params, "xattn", model.cfg.n_heads)
    return h_update @ model.params["head.fine"]


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Per-element negative log-likelihood along the last axis."""
    targets = np.asarray(targets)
    if targets.min() < 0 or targets.max() >= logits.shape[-1]:
        raise IndexError(
            f"target index out of range [0, {logits.shape[-1]}): "
            f"min={targets.min()} max={targets.max()}"
        )
    return logits.logsumexp(axis=-1) - take_along_last(logits, targets)


def sample_rows(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw one category per row of [..., V] probabilities."""
    u = rng.random(probs.shape[:-1])
    cum = np.cumsum(probs, axis=-1)
    idx = (cum < u[..., None]).sum(axis=-1)
    return np.minimum(idx, probs.shape[-1] - 1)


def _stable_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def ar_loss(
    pairs: np.ndarray,
    temporal: np.ndarray,
    model: ARModel,
    rng: np.random.Generator,
    train: bool = False,
) -> tuple[Tensor, dict[str, np.ndarray]]:
    """Mean next-token loss over positions 2..T of each sequence.

    Inputs are the first T-1 pairs; targets the last T-1.  The fine head is
    conditioned on a coarse subtoken sampled from the model's own
    (temperature 1) distribution, while both cross-entropy targets remain
    the ground-truth subtokens.  Returns the scalar loss plus per-position
    diagnostics (coarse/fine NLL arrays and the sampled conditions).
    """
    pairs = np.asarray(pairs)
    temporal = np.asarray(temporal)
    if pairs.ndim == 2:
        pairs = pairs[None]
        temporal = temporal[None]
    if pairs.shape[1] < 2:
        raise ValueError(f"need sequence length >= 2 for a next-token loss, got {pairs.shape[1]}")
    v = fuse_input(pairs[:, :-1], temporal[:, :-1], model, train=train, rng=rng)
    h = backbone(v, model, train=train, rng=rng)
    logits_c = coarse_logits(h, model)
    ce_c = cross_entropy(logits_c, pairs[:, 1:, 0])
    sampled = sample_rows(_stable_softmax(logits_c.data), rng)
    logits_f = fine_logits(h, sampled, model)
    ce_f = cross_entropy(logits_f, pairs[:, 1:, 1])
    loss = (ce_c + ce_f).mean()
    info = {
        "ce_coarse": ce_c.data.copy(),
        "ce_fine": ce_f.data.copy(),
        "sampled_coarse": sampled,
    }
    return loss, info


# --------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class ARTrainConfig:
    steps: int = 2000
    batch_size: int = 4
    peak_lr: float = 1e-3
    warmup_fraction: float = 0.1
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.warmup_fraction <= 1.0:
            raise ConfigError(f"warmup_fraction must be in [0, 1], got {self.warmup_fraction}")


def train_ar(
    pairs: np.ndarray,
    temporal: np.ndarray,
    cfg: ARConfig,
    train_cfg: ARTrainConfig,
    weights: np.ndarray | None = None,
) -> tuple[ARModel, list[dict[str, float]]]:
    """Train on [N x T x 2] token sequences with matching temporal rows."""
    pairs = np.asarray(pairs)
    temporal = np.asarray(temporal)
    if pairs.ndim != 3 or pairs.shape[-1] != 2:
        raise ConfigError(f"expected [N x T x 2] token dataset, got {pairs.shape}")
    if temporal.shape[:2] != pairs.shape[:2]:
        raise ConfigError(
            f"temporal shape {temporal.shape} does not match token dataset {pairs.shape}"
        )
    seeds = np.random.SeedSequence(train_cfg.seed).spawn(2)
    model = init_ar_model(cfg, seed=seeds[0])
    rng = np.random.Generator(np.random.PCG64(seeds[1]))
    if weights is not None:
        weights = np.asarray(weights, dtype=np.float64)
        weights = weights / weights.sum()
    state = AdamWState()
    warmup = int(round(train_cfg.warmup_fraction * train_cfg.steps))
    trace: list[dict[str, float]] = []
    for step in range(train_cfg.steps):
        idx = rng.choice(pairs.shape[0], size=train_cfg.batch_size, replace=True, p=weights)
        loss, info = ar_loss(pairs[idx], temporal[idx], model, rng, train=True)
        if not np.isfinite(loss.data):
            raise NumericError(f"model loss went non-finite at step {step}")
        zero_grads(model.params)
        loss.backward()
        lr = cosine_schedule(step, warmup, train_cfg.steps, train_cfg.peak_lr)
        adamw_step(model.params, state, lr, train_cfg.betas, train_cfg.eps, train_cfg.weight_decay)
        trace.append(
            {
                "step": step,
                "lr": lr,
                "loss": float(loss.data),
                "ce_coarse": float(info["ce_coarse"].mean()),
                "ce_fine": float(info["ce_fine"].mean()),
            }
        )
    return model, trace


# --------------------------------------------------------------------------
# parameter accounting


@dataclass(frozen=True)
class ParamAudit:
    """Parameter split for a given subtoken factorization."""

    n_splits: int
    sub_vocab: int
    core: int
    vocab: int
    fusion: int
    steps_per_token: int

    @property
    def total(self) -> int:
        return self.core + self.vocab + self.fusion


def count_parameters(cfg: ARConfig, n_splits: int) -> ParamAudit:
    """Account for every parameter under an n-way subtoken factorization.

    core: backbone layers (attention QKVO, gated FFN, two norms), the fine
    head's cross-attention, the calendar tables, and the final norm --
    everything independent of the vocabulary split.
    vocab: n embedding tables plus n output heads of size 2^(k/n) x d.
    fusion: the (n*d) -> d input fusion, absent when n == 1.
    """
    if n_splits < 1:
        raise ConfigError(f"n_splits must be >= 1, got {n_splits}")
    if cfg.k % n_splits != 0:
        raise ConfigError(f"n_splits {n_splits} must divide k {cfg.k}")
    d, f = cfg.d_model, cfg.d_ff
    per_layer = 4 * d * d + 3 * d * f + 2 * d
    temporal = sum(TEMPORAL_SIZES.values()) * d
    core = cfg.n_layers * per_layer + 4 * d * d + temporal + d
    sub = 1 << (cfg.k // n_splits)
    vocab = n_splits * sub * d * 2
    fusion = (n_splits * d) * d if n_splits >= 2 else 0
    return ParamAudit(
        n_splits=n_splits,
        sub_vocab=sub,
        core=core,
        vocab=vocab,
        fusion=fusion,
        steps_per_token=n_splits,
    )


def count_model_parameters(model: ARModel) -> int:
    """Actual parameter count of an instantiated model."""
    return sum(p.data.size for p in model.params.values())
