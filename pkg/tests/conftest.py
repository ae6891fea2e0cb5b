"""Shared fixtures: small training runs reused across test modules."""

from __future__ import annotations

import numpy as np
import pytest

from kline.armodel import AR_PRESETS, ARTrainConfig, temporal_features, train_ar
from kline.pipeline import build_training_windows
from kline.synthetic import make_ar1_series
from kline.tokenizer import (
    TOKENIZER_PRESETS,
    TokenizerTrainConfig,
    encode,
    train_tokenizer,
)


@pytest.fixture(scope="session")
def demo_series():
    return make_ar1_series(n=480, seed=11)


@pytest.fixture(scope="session")
def demo_windows(demo_series):
    windows, stamps, stats, masks = build_training_windows(demo_series, 32, 8)
    return np.asarray(windows), stamps, stats, masks


@pytest.fixture(scope="session")
def tiny_tokenizer(demo_windows):
    windows, _, _, _ = demo_windows
    model, trace = train_tokenizer(
        windows,
        TOKENIZER_PRESETS["tiny"],
        TokenizerTrainConfig(steps=40, batch_size=8, seed=5),
    )
    return model, trace


@pytest.fixture(scope="session")
def tiny_ar(demo_windows, tiny_tokenizer, demo_series):
    windows, stamps, _, _ = demo_windows
    tok, _ = tiny_tokenizer
    pairs = encode(windows, tok)
    temporal = np.stack([temporal_features(ts, demo_series.frequency) for ts in stamps])
    model, trace = train_ar(
        pairs, temporal, AR_PRESETS["tiny"], ARTrainConfig(steps=40, batch_size=4, seed=5)
    )
    return model, trace, pairs, temporal
