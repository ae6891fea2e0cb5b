"""Micro- and macro-benchmarks comparing the pure NumPy kernels with the
compiled extension (when available).

Covers the three hot kernels (single-step attention, row RMS norm, fused
AdamW) and an end-to-end token-generation loop on a small untrained model.
"""

from __future__ import annotations

import time
from typing import Callable

import numpy as np

from . import _kernels
from .armodel import AR_PRESETS, init_ar_model, temporal_features
from .core import Frequency
from .inference import SamplingConfig, generate

__all__ = ["run_benchmarks", "format_benchmarks"]


def _time(fn: Callable[[], None], reps: int) -> float:
    fn()  # warm up caches and lazy allocations
    start = time.perf_counter()
    for _ in range(reps):
        fn()
    return (time.perf_counter() - start) / reps


def _attn_case(rng: np.random.Generator, s: int, h: int, dh: int) -> Callable[[], None]:
    q = rng.standard_normal((h, dh))
    k = rng.standard_normal((s, h, dh))
    v = rng.standard_normal((s, h, dh))
    return lambda: _kernels.attn_step(q, k, v)


def _rmsnorm_case(rng: np.random.Generator) -> Callable[[], None]:
    x = rng.standard_normal(832)
    gain = rng.standard_normal(832)
    return lambda: _kernels.rmsnorm_row(x, gain, 1e-12)


def _adamw_case(rng: np.random.Generator) -> Callable[[], None]:
    n = 1_000_000
    p = rng.standard_normal(n)
    g = rng.standard_normal(n)
    m = np.zeros(n)
    v = np.zeros(n)
    return lambda: _kernels.adamw_update(p, g, m, v, 1e-3, 0.9, 0.999, 1e-8, 0.01, 0.9, 0.999)


def _generate_case(rng: np.random.Generator) -> tuple[Callable[[], None], int]:
    model = init_ar_model(AR_PRESETS["tiny"], seed=0)
    horizon = 32
    t_ctx = 16
    v = model.cfg.sub_vocab
    pairs = rng.integers(0, v, size=(t_ctx, 2))
    stamps = 1_704_067_200 + 86_400 * np.arange(t_ctx + horizon, dtype=np.int64)
    temporal = temporal_features(stamps, Frequency.DAILY)
    sampling = SamplingConfig(temperature=1.0, top_p=1.0)

    def run() -> None:
        generate(
            model,
            pairs,
            temporal[:t_ctx],
            temporal[t_ctx:],
            horizon,
            sampling,
            np.random.Generator(np.random.PCG64(0)),
        )

    return run, horizon


def run_benchmarks(reps: int = 50) -> list[dict[str, object]]:
    """Time each kernel under every available backend; returns result rows."""
    rng = np.random.Generator(np.random.PCG64(12345))
    cases: list[tuple[str, Callable[[], None], int]] = [
        ("attn_step[S=128,H=4,dh=16]", _attn_case(rng, 128, 4, 16), reps * 20),
        ("attn_step[S=512,H=8,dh=64]", _attn_case(rng, 512, 8, 64), reps),
        ("rmsnorm_row[d=832]", _rmsnorm_case(rng), reps * 20),
        ("adamw_update[n=1e6]", _adamw_case(rng), max(reps // 5, 3)),
    ]
    gen_fn, horizon = _generate_case(rng)
    gen_reps = 3
    rows: list[dict[str, object]] = []
    for backend in sorted(_kernels.BACKENDS):
        with _kernels.use(backend):
            for name, fn, n in cases:
                rows.append({"kernel": name, "backend": backend, "reps": n, "seconds": _time(fn, n)})
            per_call = _time(gen_fn, gen_reps)
            rows.append(
                {
                    "kernel": f"generate[tiny,{horizon} tokens]",
                    "backend": backend,
                    "reps": gen_reps,
                    "seconds": per_call,
                }
            )
    return rows


def format_benchmarks(rows: list[dict[str, object]]) -> str:
    by_kernel: dict[str, dict[str, float]] = {}
    for row in rows:
        by_kernel.setdefault(str(row["kernel"]), {})[str(row["backend"])] = float(row["seconds"])  # type: ignore[arg-type]
    lines = [f"{'kernel':<32} {'backend':<10} {'per call':>12} {'speedup':>9}"]
    for row in rows:
        kernel = str(row["kernel"])
        backend = str(row["backend"])
        seconds = float(row["seconds"])  # type: ignore[arg-type]
        pure = by_kernel[kernel].get("pure")
        speedup = f"{pure / seconds:6.2f}x" if pure and backend != "pure" else "      -"
        lines.append(f"{kernel:<32} {backend:<10} {seconds * 1e6:10.1f}us {speedup:>9}")
    lines.append(f"active backend: {_kernels.backend_name()}")
    return "\n".join(lines)
