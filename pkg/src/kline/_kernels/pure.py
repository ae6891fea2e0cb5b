"""Numpy reference implementations of the hot kernels.

These are the semantic ground truth; the compiled twins in ``_fast.pyx``
must agree with them (bitwise for the elementwise AdamW update, to float
reassociation tolerance for the attention reduction).
"""

from __future__ import annotations

import math

import numpy as np


def attn_step(q: np.ndarray, k_cache: np.ndarray, v_cache: np.ndarray) -> np.ndarray:
    """One incremental-decoding attention step.

    q is [H x dh]; the caches are [S x H x dh].  Returns the [H x dh]
    attention output with a max-subtracted softmax over the S cached slots.
    """
    dh = q.shape[1]
    scores = np.einsum("hd,shd->hs", q, k_cache) / math.sqrt(dh)
    scores -= scores.max(axis=1, keepdims=True)
    weights = np.exp(scores)
    weights /= weights.sum(axis=1, keepdims=True)
    return np.einsum("hs,shd->hd", weights, v_cache)


def rmsnorm_row(x: np.ndarray, gain: np.ndarray, eps: float) -> np.ndarray:
    """RMS-normalize a single [d] vector and scale by the gain."""
    ms = np.mean(x * x)
    return x / np.sqrt(ms + eps) * gain


def adamw_update(
    p: np.ndarray,
    g: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    lr: float,
    beta1: float,
    beta2: float,
    eps: float,
    weight_decay: float,
    bias_correction1: float,
    bias_correction2: float,
) -> None:
    """Fused in-place AdamW update on flat float64 views.

    Weight decay is decoupled: it scales the pre-step parameter value and
    never touches the moment estimates.
    """
    np.multiply(m, beta1, out=m)
    m += (1.0 - beta1) * g
    np.multiply(v, beta2, out=v)
    v += (1.0 - beta2) * (g * g)
    m_hat = m / bias_correction1
    v_hat = v / bias_correction2
    p -= lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * p)
