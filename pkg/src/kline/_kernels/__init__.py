"""Kernel backend selection.

The compiled extension is preferred when it imported cleanly; the numpy
fallback is always available.  Set ``KLINE_PURE_KERNELS=1`` before import
to force the fallback, e.g. to benchmark or to rule the extension out when
debugging.  ``use()`` swaps the active backend temporarily.
"""

from __future__ import annotations

import contextlib
import os

from . import pure

BACKENDS = {"pure": pure}

try:  # pragma: no cover - exercised only when the extension is built
    from . import _fast  # type: ignore[attr-defined]

    BACKENDS["compiled"] = _fast
except ImportError:  # pragma: no cover
    _fast = None

if os.environ.get("KLINE_PURE_KERNELS", "") == "1" or "compiled" not in BACKENDS:
    _active_name = "pure"
else:
    _active_name = "compiled"
_active = BACKENDS[_active_name]


def backend_name() -> str:
    return _active_name


def attn_step(q, k_cache, v_cache):
    return _active.attn_step(q, k_cache, v_cache)


def rmsnorm_row(x, gain, eps):
    return _active.rmsnorm_row(x, gain, eps)


def adamw_update(p, g, m, v, lr, beta1, beta2, eps, weight_decay, bc1, bc2):
    return _active.adamw_update(p, g, m, v, lr, beta1, beta2, eps, weight_decay, bc1, bc2)


@contextlib.contextmanager
def use(name: str):
    """Temporarily switch the active backend ("pure" or "compiled")."""
    global _active, _active_name
    if name not in BACKENDS:
        raise ValueError(f"unknown kernel backend {name!r}; have {sorted(BACKENDS)}")
    prev, prev_name = _active, _active_name
    _active, _active_name = BACKENDS[name], name
    try:
        yield
    finally:
        _active, _active_name = prev, prev_name
