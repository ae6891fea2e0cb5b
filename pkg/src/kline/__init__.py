"""End-to-end K-line modeling: cleaning, hierarchical binary-spherical
tokenization, coarse-to-fine autoregressive modeling, stochastic
forecasting, and quant-finance evaluation.
"""

from .core import (
    CHANNELS,
    Frequency,
    KLineRecord,
    KLineSeries,
    Segment,
    Violation,
    slice_series,
    validate_series,
)
from .errors import (
    ConfigError,
    ContextOverflowError,
    DataError,
    KlineError,
    NumericError,
    ShapeError,
)
from .pipeline import (
    CleaningParams,
    NormalizationStats,
    QualityReport,
    build_training_windows,
    clean_series,
    default_cleaning_params,
    denormalize,
    fit_normalization,
    normalize,
)
from .tokenizer import (
    TOKENIZER_PRESETS,
    TokenizerConfig,
    TokenizerModel,
    TokenizerTrainConfig,
    bsq_quantize,
    decode,
    distortion_bound,
    encode,
    init_tokenizer,
    tokenizer_loss,
    train_tokenizer,
)
from .armodel import (
    AR_PRESETS,
    ARConfig,
    ARModel,
    ARTrainConfig,
    ar_loss,
    count_parameters,
    init_ar_model,
    temporal_features,
    train_ar,
)
from .inference import (
    ForecastResult,
    SamplingConfig,
    TASK_SAMPLING_DEFAULTS,
    apply_temperature,
    ensemble_variance_study,
    forecast,
    generate,
    nucleus_filter,
)
from .evaluation import (
    BacktestResult,
    MetricReport,
    backtest_topk,
    discriminative_score,
    forecast_metrics,
    mae,
    pearson_ic,
    r_squared,
    rank_ic,
    realized_volatility,
    tstr_score,
)
from .checkpoint import load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "CHANNELS",
    "Frequency",
    "KLineRecord",
    "KLineSeries",
    "Segment",
    "Violation",
    "slice_series",
    "validate_series",
    "KlineError",
    "ConfigError",
    "DataError",
    "NumericError",
    "ShapeError",
    "ContextOverflowError",
    "CleaningParams",
    "NormalizationStats",
    "QualityReport",
    "clean_series",
    "default_cleaning_params",
    "build_training_windows",
    "fit_normalization",
    "normalize",
    "denormalize",
    "TOKENIZER_PRESETS",
    "TokenizerConfig",
    "TokenizerModel",
    "TokenizerTrainConfig",
    "bsq_quantize",
    "distortion_bound",
    "encode",
    "decode",
    "init_tokenizer",
    "tokenizer_loss",
    "train_tokenizer",
    "AR_PRESETS",
    "ARConfig",
    "ARModel",
    "ARTrainConfig",
    "ar_loss",
    "count_parameters",
    "init_ar_model",
    "temporal_features",
    "train_ar",
    "SamplingConfig",
    "TASK_SAMPLING_DEFAULTS",
    "ForecastResult",
    "apply_temperature",
    "nucleus_filter",
    "generate",
    "forecast",
    "ensemble_variance_study",
    "MetricReport",
    "BacktestResult",
    "pearson_ic",
    "rank_ic",
    "mae",
    "r_squared",
    "realized_volatility",
    "forecast_metrics",
    "discriminative_score",
    "tstr_score",
    "backtest_topk",
    "save_checkpoint",
    "load_checkpoint",
    "__version__",
]
