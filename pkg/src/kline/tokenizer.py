"""Hierarchical tokenizer: transformer autoencoder around a binary
spherical quantizer.

Each normalized bar (a 6-vector) becomes one k-bit code: the encoder maps
the window to per-step latents, the latent is projected onto the unit
sphere, and each coordinate's sign becomes one bit.  The first k/2 bits
form the coarse subtoken, the rest the fine subtoken, so one bar is a
(coarse, fine) pair of indices in [0, 2^(k/2)).

Training decodes twice per step: once from the full code and once with the
fine half zeroed, which forces the coarse bits to carry a usable sketch on
their own.  Gradients cross the sign() through a straight-through estimator.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import nn
from .errors import ConfigError, NumericError
from .optim import AdamWState, adamw_step, cosine_schedule, zero_grads
from .pipeline import volume_dropout
from .tensor import Tensor, no_grad, straight_through

__all__ = [
    "TokenPair",
    "TokenizerConfig",
    "TokenizerModel",
    "TokenizerTrainConfig",
    "init_tokenizer",
    "bsq_quantize",
    "bits_to_pair",
    "pair_to_bits",
    "encode",
    "decode",
    "tokenizer_loss",
    "train_tokenizer",
    "evaluate_tokenizer",
    "codebook_usage",
    "distortion_bound",
]

N_FEATURES = 6


@dataclass(frozen=True)
class TokenPair:
    """One quantized bar: coarse sketch index plus fine refinement index."""

    coarse: int
    fine: int


@dataclass(frozen=True)
class TokenizerConfig:
    """Architecture and loss weights for the tokenizer.

    ``k`` is the total bit width (split evenly between coarse and fine) and
    must be a multiple of ``2 * group_size`` so entropy groups never straddle
    the coarse/fine boundary.  Loss weights: ``beta`` scales the commitment
    term, ``zeta`` the entropy pair (``gamma0`` per-sample vs ``gamma``
    batch-mean), and ``lam`` the whole quantization block.
    """

    n_layers: int = 3
    d_model: int = 256
    d_ff: int = 512
    n_heads: int = 4
    k: int = 16
    group_size: int = 4
    beta: float = 0.05
    gamma0: float = 1.0
    gamma: float = 1.1
    zeta: float = 0.05
    lam: float = 1.0

    def __post_init__(self) -> None:
        if self.k < 2 or self.k % 2 != 0:
            raise ConfigError(f"k must be a positive even integer, got {self.k}")
        if self.group_size < 1 or self.k % self.group_size != 0:
            raise ConfigError(f"group_size {self.group_size} must divide k {self.k}")
        if (self.k // 2) % self.group_size != 0:
            raise ConfigError(
                f"group_size {self.group_size} must divide the half width {self.k // 2}"
            )
        if self.beta < 0 or self.zeta < 0 or self.lam < 0:
            raise ConfigError("loss weights beta/zeta/lam must be >= 0")

    @property
    def half(self) -> int:
        return self.k // 2

    @property
    def sub_vocab(self) -> int:
        return 1 << self.half

    def attention(self) -> nn.AttentionConfig:
        return nn.AttentionConfig(self.d_model, self.n_heads, self.d_ff, causal=True)


TOKENIZER_PRESETS = {
    "full": TokenizerConfig(n_layers=3, d_model=256, d_ff=512, n_heads=4, k=20, group_size=5),
    "tiny": TokenizerConfig(n_layers=2, d_model=64, d_ff=128, n_heads=4, k=16, group_size=4),
}


@dataclass
class TokenizerModel:
    cfg: TokenizerConfig
    params: dict[str, Tensor]


def init_tokenizer(
    cfg: TokenizerConfig, seed: int | np.random.SeedSequence = 0
) -> TokenizerModel:
    rng = np.random.Generator(np.random.PCG64(seed))
    d = cfg.d_model
    attn_cfg = cfg.attention()
    params: dict[str, Tensor] = {
        "enc.win": nn._init(rng, N_FEATURES, d),
        "enc.bin": Tensor(np.zeros(d), requires_grad=True),
        "enc.norm": Tensor(np.ones(d), requires_grad=True),
        "enc.wlat": nn._init(rng, d, cfg.k),
        "enc.blat": Tensor(np.zeros(cfg.k), requires_grad=True),
        "dec.win": nn._init(rng, cfg.k, d),
        "dec.bin": Tensor(np.zeros(d), requires_grad=True),
        "dec.norm": Tensor(np.ones(d), requires_grad=True),
        "dec.wout": nn._init(rng, d, N_FEATURES),
        "dec.bout": Tensor(np.zeros(N_FEATURES), requires_grad=True),
    }
    for i in range(cfg.n_layers):
        params.update(nn.init_layer_params(attn_cfg, rng, f"enc.layer.{i}"))
        params.update(nn.init_layer_params(attn_cfg, rng, f"dec.layer.{i}"))
    return TokenizerModel(cfg, params)


# --------------------------------------------------------------------------
# quantizer


def bsq_quantize(latent: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Project latents onto the unit sphere and binarize coordinate signs.

    Accepts [..., k] and returns (xi, bits): xi is the unit-norm projection,
    bits are +-1 with sign(0) mapped to +1.  The quantized vector bits/sqrt(k)
    is itself unit norm, and the distortion ||xi - bits/sqrt(k)|| stays below
    sqrt(2 - 2/sqrt(k)) except on the measure-zero axis-aligned set.
    """
    latent = np.asarray(latent, dtype=np.float64)
    norm = np.sqrt(np.sum(latent * latent, axis=-1, keepdims=True))
    if np.any(norm == 0.0):
        raise NumericError("cannot quantize a zero latent vector")
    xi = latent / norm
    bits = np.where(xi >= 0.0, 1.0, -1.0)
    return xi, bits


def distortion_bound(k: int) -> float:
    """Worst-case spherical quantization distortion sqrt(2 - 2/sqrt(k))."""
    return float(np.sqrt(2.0 - 2.0 / np.sqrt(k)))


def _pack_weights(half: int) -> np.ndarray:
    # most significant bit first
    return 1 << np.arange(half - 1, -1, -1, dtype=np.int64)


def bits_to_pair(bits: np.ndarray, k: int) -> np.ndarray:
    """Map [..., k] sign vectors to [..., 2] (coarse, fine) indices.

    +1 encodes binary 1, -1 encodes 0; within each half the first bit is the
    most significant.
    """
    bits = np.asarray(bits)
    if bits.shape[-1] != k:
        raise ConfigError(f"expected {k} bits, got {bits.shape[-1]}")
    ones = (bits > 0).astype(np.int64)
    w = _pack_weights(k // 2)
    coarse = ones[..., : k // 2] @ w
    fine = ones[..., k // 2 :] @ w
    return np.stack([coarse, fine], axis=-1)


def pair_to_bits(pairs: np.ndarray, k: int) -> np.ndarray:
    """Inverse of ``bits_to_pair``; validates index ranges."""
    pairs = np.asarray(pairs)
    if pairs.shape[-1] != 2:
        raise ConfigError(f"expected trailing dimension 2, got shape {pairs.shape}")
    half = k // 2
    top = 1 << half
    if pairs.size and (pairs.min() < 0 or pairs.max() >= top):
        raise IndexError(f"token index out of range [0, {top}): min={pairs.min()} max={pairs.max()}")
    shift = np.arange(half - 1, -1, -1, dtype=np.int64)
    coarse_bits = (pairs[..., 0:1] >> shift) & 1
    fine_bits = (pairs[..., 1:2] >> shift) & 1
    ones = np.concatenate([coarse_bits, fine_bits], axis=-1)
    return np.where(ones > 0, 1.0, -1.0)


# --------------------------------------------------------------------------
# autoencoder forward


def _encode_latent(x: Tensor, model: TokenizerModel, train: bool = False,
                   rng: np.random.Generator | None = None) -> Tensor:
    """Window [..., T, 6] -> pre-quantization latent [..., T, k]."""
    cfg = model.cfg
    p = model.params
    h = x @ p["enc.win"] + p["enc.bin"]
    attn_cfg = cfg.attention()
    for i in range(cfg.n_layers):
        h = nn.transformer_layer(h, attn_cfg, p, f"enc.layer.{i}", train=train, rng=rng)
    h = nn.rmsnorm(h, p["enc.norm"])
    return h @ p["enc.wlat"] + p["enc.blat"]


def _decode_code(q: Tensor, model: TokenizerModel, train: bool = False,
                 rng: np.random.Generator | None = None) -> Tensor:
    """Quantized code [..., T, k] -> reconstructed window [..., T, 6]."""
    cfg = model.cfg
    p = model.params
    h = q @ p["dec.win"] + p["dec.bin"]
    attn_cfg = cfg.attention()
    for i in range(cfg.n_layers):
        h = nn.transformer_layer(h, attn_cfg, p, f"dec.layer.{i}", train=train, rng=rng)
    h = nn.rmsnorm(h, p["dec.norm"])
    return h @ p["dec.wout"] + p["dec.bout"]


def _project_unit(latent: Tensor) -> Tensor:
    norm_sq = (latent * latent).sum(axis=-1, keepdims=True)
    return latent / (norm_sq + 1e-24).sqrt()


def _coarse_mask(cfg: TokenizerConfig) -> np.ndarray:
    mask = np.zeros(cfg.k)
    mask[: cfg.half] = 1.0
    return mask


def encode(window: np.ndarray, model: TokenizerModel) -> np.ndarray:
    """Tokenize a normalized [T x 6] (or [B x T x 6]) window to [..., T, 2]."""
    arr = np.asarray(window, dtype=np.float64)
    if arr.shape[-1] != N_FEATURES:
        raise ConfigError(f"expected trailing dimension {N_FEATURES}, got {arr.shape}")
    with no_grad():
        latent = _encode_latent(Tensor(arr), model)
    _, bits = bsq_quantize(latent.data)
    return bits_to_pair(bits, model.cfg.k)


def decode(pairs: np.ndarray, model: TokenizerModel, mode: str = "full") -> np.ndarray:
    """Reconstruct normalized bars from token pairs.

    ``mode="coarse"`` zeroes the fine half of the bit code before decoding,
    yielding the sketch the coarse subtoken carries on its own.
    """
    if mode not in ("full", "coarse"):
        raise ConfigError(f"decode mode must be 'full' or 'coarse', got {mode!r}")
    cfg = model.cfg
    bits = pair_to_bits(pairs, cfg.k)
    q = bits / np.sqrt(cfg.k)
    if mode == "coarse":
        q = q * _coarse_mask(cfg)
    with no_grad():
        recon = _decode_code(Tensor(q), model)
    return recon.data


# --------------------------------------------------------------------------
# loss


def _outcome_matrix(group_size: int) -> np.ndarray:
    """[2^g x g] table of binary outcomes, most significant bit first."""
    n = 1 << group_size
    rows = np.arange(n, dtype=np.int64)
    shift = np.arange(group_size - 1, -1, -1, dtype=np.int64)
    return ((rows[:, None] >> shift) & 1).astype(np.float64)


def tokenizer_loss(
    batch: np.ndarray,
    model: TokenizerModel,
    train: bool = False,
    rng: np.random.Generator | None = None,
    frozen_bits: np.ndarray | None = None,
) -> tuple[Tensor, dict[str, float]]:
    """Composite reconstruction + quantization loss on a [B x T x 6] batch.

    total = L_coarse + L_fine + lam * (beta * commit + zeta * entropy)

    where L_coarse/L_fine are reconstruction MSEs from the coarse-only and
    full codes, commit pulls the spherical latent toward its own code, and
    entropy = gamma0 * E[H(group)] - gamma * H(E[group]) over bit groups
    (soft bit probabilities sigmoid(sqrt(k) * xi), summed over groups).

    ``frozen_bits`` replaces re-binarization with a fixed code so finite
    differences can probe the straight-through surrogate; leave it None in
    real training.
    """
    cfg = model.cfg
    x = Tensor(np.asarray(batch, dtype=np.float64))
    latent = _encode_latent(x, model, train=train, rng=rng)
    xi = _project_unit(latent)
    if frozen_bits is None:
        _, bits = bsq_quantize(latent.data)
    else:
        bits = np.asarray(frozen_bits, dtype=np.float64)
        if bits.shape != xi.data.shape:
            raise ConfigError(f"frozen_bits shape {bits.shape} != latent shape {xi.data.shape}")
    code = bits / np.sqrt(cfg.k)

    q_full = straight_through(xi, code)
    q_coarse = q_full * Tensor(_coarse_mask(cfg))
    recon_full = _decode_code(q_full, model, train=train, rng=rng)
    recon_coarse = _decode_code(q_coarse, model, train=train, rng=rng)
    err_full = recon_full - x
    err_coarse = recon_coarse - x
    l_fine = (err_full * err_full).mean()
    l_coarse = (err_coarse * err_coarse).mean()

    diff = xi - Tensor(code)
    commit = (diff * diff).sum(axis=-1).mean()

    # soft bit probabilities and grouped categorical entropies
    g = cfg.group_size
    n_groups = cfg.k // g
    probs = (xi * np.sqrt(cfg.k)).sigmoid()
    lead = probs.shape[:-1]
    probs = probs.reshape(*lead, n_groups, g)
    outcomes = _outcome_matrix(g)  # [O x g]
    log_p = probs.log()
    log_not = (1.0 - probs).log()
    log_q = log_p @ Tensor(outcomes.T) + log_not @ Tensor(1.0 - outcomes.T)  # [..., G, O]
    q = log_q.exp()
    h_sample = -(q * log_q).sum(axis=-1)  # [..., G]
    mean_axes = tuple(range(h_sample.ndim - 1))
    e_of_h = h_sample.mean(axis=mean_axes).sum()
    q_bar = q.mean(axis=tuple(range(q.ndim - 2)))  # [G x O]
    h_of_e = -(q_bar * q_bar.log()).sum(axis=-1).sum()
    entropy = cfg.gamma0 * e_of_h - cfg.gamma * h_of_e

    quant = cfg.beta * commit + cfg.zeta * entropy
    total = l_coarse + l_fine + cfg.lam * quant
    components = {
        "total": total.item(),
        "l_coarse": l_coarse.item(),
        "l_fine": l_fine.item(),
        "commit": commit.item(),
        "entropy": entropy.item(),
        "e_of_h": e_of_h.item(),
        "h_of_e": h_of_e.item(),
    }
    return total, components


# --------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TokenizerTrainConfig:
    steps: int = 2000
    batch_size: int = 16
    peak_lr: float = 1e-3
    warmup_fraction: float = 0.1
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    volume_dropout_rate: float = 0.05
    seed: int = 0

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.warmup_fraction <= 1.0:
            raise ConfigError(f"warmup_fraction must be in [0, 1], got {self.warmup_fraction}")


def train_tokenizer(
    windows: Sequence[np.ndarray] | np.ndarray,
    cfg: TokenizerConfig,
    train_cfg: TokenizerTrainConfig,
    weights: np.ndarray | None = None,
) -> tuple[TokenizerModel, list[dict[str, float]]]:
    """Train a tokenizer on pre-normalized windows; returns (model, trace).

    ``weights`` optionally biases window sampling (e.g. asset-class
    rebalancing).  Aborts with NumericError the first time the loss stops
    being finite.
    """
    data = np.asarray(windows, dtype=np.float64)
    if data.ndim != 3 or data.shape[-1] != N_FEATURES:
        raise ConfigError(f"expected [N x T x 6] training windows, got {data.shape}")
    seeds = np.random.SeedSequence(train_cfg.seed).spawn(2)
    model = init_tokenizer(cfg, seed=seeds[0])
    rng = np.random.Generator(np.random.PCG64(seeds[1]))
    if weights is not None:
        weights = np.asarray(weights, dtype=np.float64)
        weights = weights / weights.sum()
    state = AdamWState()
    warmup = int(round(train_cfg.warmup_fraction * train_cfg.steps))
    trace: list[dict[str, float]] = []
    for step in range(train_cfg.steps):
        idx = rng.choice(data.shape[0], size=train_cfg.batch_size, replace=True, p=weights)
        batch = volume_dropout(data[idx], train_cfg.volume_dropout_rate, rng)
        loss, comps = tokenizer_loss(batch, model, train=True, rng=rng)
        if not np.isfinite(loss.data):
            raise NumericError(f"tokenizer loss went non-finite at step {step}: {comps}")
        zero_grads(model.params)
        loss.backward()
        lr = cosine_schedule(step, warmup, train_cfg.steps, train_cfg.peak_lr)
        adamw_step(
            model.params,
            state,
            lr,
            train_cfg.betas,
            train_cfg.eps,
            train_cfg.weight_decay,
        )
        comps["step"] = step
        comps["lr"] = lr
        trace.append(comps)
    return model, trace


def evaluate_tokenizer(windows: np.ndarray, model: TokenizerModel) -> dict[str, float]:
    """Held-out reconstruction quality: full and coarse-only MSE."""
    data = np.asarray(windows, dtype=np.float64)
    pairs = encode(data, model)
    recon_full = decode_batch(pairs, model, "full")
    recon_coarse = decode_batch(pairs, model, "coarse")
    return {
        "mse_full": float(np.mean((recon_full - data) ** 2)),
        "mse_coarse": float(np.mean((recon_coarse - data) ** 2)),
    }


def decode_batch(pairs: np.ndarray, model: TokenizerModel, mode: str = "full") -> np.ndarray:
    """Vectorized decode for [... x T x 2] token arrays."""
    return decode(pairs, model, mode)


def codebook_usage(pairs: np.ndarray, k: int) -> dict[str, float]:
    """Fraction of each subtoken vocabulary that actually occurs."""
    pairs = np.asarray(pairs).reshape(-1, 2)
    top = 1 << (k // 2)
    return {
        "coarse": len(np.unique(pairs[:, 0])) / top,
        "fine": len(np.unique(pairs[:, 1])) / top,
    }
