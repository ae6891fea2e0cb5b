"""Neural building blocks: RoPE attention, RMSNorm, gated FFN, recurrence.

Parameters live in flat ``dict[str, Tensor]`` maps keyed by dotted names so
checkpointing and the optimizer stay trivial.  All sequence functions accept
leading batch dimensions ([..., T, d]); the batch is carried by numpy
broadcasting, not by loops.

The transformer block is pre-norm: x + Attn(RMSNorm(x)), then
x + FFN(RMSNorm(x)), with a gated (SiLU) feed-forward.  Dropout is inverted
at train time so evaluation applies no rescaling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .tensor import Tensor, concat, where

__all__ = [
    "AttentionConfig",
    "RecurrentConfig",
    "rmsnorm",
    "rope_angles",
    "rope_rotate",
    "dropout",
    "causal_attention",
    "cross_attention",
    "feed_forward",
    "transformer_layer",
    "init_layer_params",
    "init_cross_attention_params",
    "init_recurrent_params",
    "recurrent_forward",
]

ROPE_BASE = 10_000.0
RMSNORM_EPS = 1e-12
_NEG_INF = -np.inf


@dataclass(frozen=True)
class AttentionConfig:
    """Shape and regularization settings for one transformer stack."""

    d_model: int
    n_heads: int
    d_ff: int
    causal: bool = True
    dropout_attn: float = 0.0
    dropout_residual: float = 0.0
    dropout_ffn: float = 0.0

    def __post_init__(self) -> None:
        if self.d_model < 1 or self.d_ff < 1 or self.n_heads < 1:
            raise ConfigError(
                f"d_model/d_ff/n_heads must be positive, got "
                f"{self.d_model}/{self.d_ff}/{self.n_heads}"
            )
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        for name in ("dropout_attn", "dropout_residual", "dropout_ffn"):
            rate = getattr(self, name)
            if not 0.0 <= rate < 1.0:
                raise ConfigError(f"{name} must be in [0, 1), got {rate}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


# --------------------------------------------------------------------------
# primitives


def rmsnorm(x: Tensor, gain: Tensor, eps: float = RMSNORM_EPS) -> Tensor:
    """Root-mean-square normalization over the last axis, then a learned gain."""
    ms = (x * x).mean(axis=-1, keepdims=True)
    return x / (ms + eps).sqrt() * gain


def rope_angles(positions: np.ndarray, d_head: int) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin tables [T x d_head/2] for the given 0-based positions."""
    if d_head % 2 != 0:
        raise ConfigError(f"RoPE needs an even head dimension, got {d_head}")
    half = d_head // 2
    inv_freq = ROPE_BASE ** (-np.arange(half, dtype=np.float64) * 2.0 / d_head)
    theta = np.asarray(positions, dtype=np.float64)[:, None] * inv_freq[None, :]
    return np.cos(theta), np.sin(theta)


def rope_rotate(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate [..., T, d_head] query/key rows by their position angles.

    Pairs dimension i with i + d_head/2 (split-half convention).  The
    rotation is orthogonal, so norms are preserved and scores depend only on
    position differences.
    """
    half = cos.shape[-1]
    a = x[..., :half]
    b = x[..., half:]
    return concat([a * cos - b * sin, a * sin + b * cos], axis=-1)


def dropout(x: Tensor, rate: float, train: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: scales kept entries by 1/(1-rate) at train time."""
    if not train or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("train-mode dropout needs an rng")
    mask = (rng.random(x.data.shape) >= rate) / (1.0 - rate)
    return x * Tensor(mask)


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    """[..., T, d_model] -> [..., H, T, d_head]."""
    *lead, t, d = x.shape
    return x.reshape(*lead, t, n_heads, d // n_heads).swapaxes(-3, -2)


def _merge_heads(x: Tensor) -> Tensor:
    """[..., H, T, d_head] -> [..., T, d_model]."""
    *lead, h, t, dh = x.shape
    return x.swapaxes(-3, -2).reshape(*lead, t, h * dh)


_MASK_CACHE: dict[int, np.ndarray] = {}


def _causal_mask(t: int) -> np.ndarray:
    mask = _MASK_CACHE.get(t)
    if mask is None:
        mask = np.tril(np.ones((t, t), dtype=bool))
        _MASK_CACHE[t] = mask
    return mask


def causal_attention(
    x: Tensor,
    cfg: AttentionConfig,
    params: dict[str, Tensor],
    prefix: str,
    positions: np.ndarray | None = None,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Multi-head self-attention with RoPE.  Causal unless cfg says otherwise.

    Masked score entries are forced to -inf before the max-subtracted
    softmax, so their weights are exactly zero and later positions cannot
    perturb earlier outputs even at the bit level.
    """
    t = x.shape[-2]
    if positions is None:
        positions = np.arange(t)
    q = _split_heads(x @ params[f"{prefix}.wq"], cfg.n_heads)
    k = _split_heads(x @ params[f"{prefix}.wk"], cfg.n_heads)
    v = _split_heads(x @ params[f"{prefix}.wv"], cfg.n_heads)
    cos, sin = rope_angles(positions, cfg.d_head)
    q = rope_rotate(q, cos, sin)
    k = rope_rotate(k, cos, sin)
    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(cfg.d_head))
    if cfg.causal:
        scores = where(_causal_mask(t), scores, Tensor(_NEG_INF))
    weights = scores.softmax(axis=-1)
    weights = dropout(weights, cfg.dropout_attn, train, rng)
    out = _merge_heads(weights @ v)
    return out @ params[f"{prefix}.wo"]


def cross_attention(
    query: Tensor,
    memory: Tensor,
    params: dict[str, Tensor],
    prefix: str,
    n_heads: int,
) -> Tensor:
    """Attend from each query vector to its own single memory slot.

    Both arguments are [..., d]; every leading index is an independent
    (query, memory) pair.  With one slot the softmax weight is exactly 1,
    so the attended value is a linear map of the memory; the query reenters
    through the residual connection, which is what lets the output depend
    on the query at all.
    """
    if query.shape != memory.shape:
        raise ConfigError(f"query/memory shapes differ: {query.shape} vs {memory.shape}")
    d = query.shape[-1]
    if d % n_heads != 0:
        raise ConfigError(f"d_model {d} not divisible by n_heads {n_heads}")
    dh = d // n_heads
    *lead, _ = query.shape
    # one kv slot: [..., 1, d] sequences per pair
    q = (query @ params[f"{prefix}.wq"]).reshape(*lead, n_heads, 1, dh)
    k = (memory @ params[f"{prefix}.wk"]).reshape(*lead, n_heads, 1, dh)
    v = (memory @ params[f"{prefix}.wv"]).reshape(*lead, n_heads, 1, dh)
    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(dh))
    weights = scores.softmax(axis=-1)
    attended = (weights @ v).reshape(*lead, d)
    return query + attended @ params[f"{prefix}.wo"]


def feed_forward(
    x: Tensor,
    cfg: AttentionConfig,
    params: dict[str, Tensor],
    prefix: str,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Gated feed-forward: down(silu(x @ gate) * (x @ up))."""
    h = (x @ params[f"{prefix}.wg"]).silu() * (x @ params[f"{prefix}.wu"])
    h = dropout(h, cfg.dropout_ffn, train, rng)
    return h @ params[f"{prefix}.wd"]


def transformer_layer(
    x: Tensor,
    cfg: AttentionConfig,
    params: dict[str, Tensor],
    prefix: str,
    positions: np.ndarray | None = None,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    attn = causal_attention(
        rmsnorm(x, params[f"{prefix}.norm1"]), cfg, params, f"{prefix}.attn", positions, train, rng
    )
    x = x + dropout(attn, cfg.dropout_residual, train, rng)
    ffn = feed_forward(
        rmsnorm(x, params[f"{prefix}.norm2"]), cfg, params, f"{prefix}.ffn", train, rng
    )
    return x + dropout(ffn, cfg.dropout_residual, train, rng)


# --------------------------------------------------------------------------
# initialization

INIT_SCALE = 0.02


def _init(rng: np.random.Generator, *shape: int) -> Tensor:
    return Tensor(rng.normal(0.0, INIT_SCALE, size=shape), requires_grad=True)


def init_layer_params(
    cfg: AttentionConfig, rng: np.random.Generator, prefix: str
) -> dict[str, Tensor]:
    d, f = cfg.d_model, cfg.d_ff
    return {
        f"{prefix}.attn.wq": _init(rng, d, d),
        f"{prefix}.attn.wk": _init(rng, d, d),
        f"{prefix}.attn.wv": _init(rng, d, d),
        f"{prefix}.attn.wo": _init(rng, d, d),
        f"{prefix}.norm1": Tensor(np.ones(d), requires_grad=True),
        f"{prefix}.norm2": Tensor(np.ones(d), requires_grad=True),
        f"{prefix}.ffn.wg": _init(rng, d, f),
        f"{prefix}.ffn.wu": _init(rng, d, f),
        f"{prefix}.ffn.wd": _init(rng, f, d),
    }


def init_cross_attention_params(
    d_model: int, rng: np.random.Generator, prefix: str
) -> dict[str, Tensor]:
    return {
        f"{prefix}.wq": _init(rng, d_model, d_model),
        f"{prefix}.wk": _init(rng, d_model, d_model),
        f"{prefix}.wv": _init(rng, d_model, d_model),
        f"{prefix}.wo": _init(rng, d_model, d_model),
    }


# --------------------------------------------------------------------------
# recurrent cell (evaluation harness)


@dataclass(frozen=True)
class RecurrentConfig:
    """A stack of single-gate recurrent layers plus a linear head."""

    d_in: int
    d_hidden: int
    n_layers: int = 1
    d_out: int = 1

    def __post_init__(self) -> None:
        if min(self.d_in, self.d_hidden, self.n_layers, self.d_out) < 1:
            raise ConfigError(f"all recurrent dims must be positive: {self}")


def init_recurrent_params(cfg: RecurrentConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    for layer in range(cfg.n_layers):
        d_in = cfg.d_in if layer == 0 else cfg.d_hidden
        params[f"rnn.{layer}.wz"] = _init(rng, d_in + cfg.d_hidden, cfg.d_hidden)
        params[f"rnn.{layer}.bz"] = Tensor(np.zeros(cfg.d_hidden), requires_grad=True)
        params[f"rnn.{layer}.wh"] = _init(rng, d_in + cfg.d_hidden, cfg.d_hidden)
        params[f"rnn.{layer}.bh"] = Tensor(np.zeros(cfg.d_hidden), requires_grad=True)
    params["rnn.head.w"] = _init(rng, cfg.d_hidden, cfg.d_out)
    params["rnn.head.b"] = Tensor(np.zeros(cfg.d_out), requires_grad=True)
    return params


def _cell_step(x_t: Tensor, h: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    """Single-gate update: h <- (1-z)*h + z*cand, z and cand from [x, h]."""
    joint = concat([x_t, h], axis=-1)
    z = (joint @ params[f"{prefix}.wz"] + params[f"{prefix}.bz"]).sigmoid()
    cand = (joint @ params[f"{prefix}.wh"] + params[f"{prefix}.bh"]).tanh()
    return (1.0 - z) * h + z * cand


def recurrent_forward(seq: Tensor, cfg: RecurrentConfig, params: dict[str, Tensor]) -> Tensor:
    """Run the stack over [B x T x d_in]; returns head output [B x d_out]."""
    b, t, _ = seq.shape
    layer_in = seq
    h = None
    for layer in range(cfg.n_layers):
        h = Tensor(np.zeros((b, cfg.d_hidden)))
        states = []
        for step in range(t):
            h = _cell_step(layer_in[:, step, :], h, params, f"rnn.{layer}")
            states.append(h.reshape(b, 1, cfg.d_hidden))
        layer_in = concat(states, axis=1)
    assert h is not None
    return h @ params["rnn.head.w"] + params["rnn.head.b"]
