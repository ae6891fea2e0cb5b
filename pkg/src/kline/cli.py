"""Command-line interface.

Subcommands cover the full pipeline: clean, train-tokenizer, train-model,
forecast, generate, evaluate, backtest, audit-params, and bench.  Commands
that read bar data accept --input CSV files; when omitted they fall back to
deterministic synthetic demo data so every command runs out of the box.

Exit codes: 0 success, 2 configuration/usage error, 3 data error,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import _kernels
from . import io as kio
from .armodel import (
    AR_PRESETS,
    ARModel,
    ARTrainConfig,
    count_model_parameters,
    count_parameters,
    future_timestamps,
    init_ar_model,
    temporal_features,
    train_ar,
)
from .bench import format_benchmarks, run_benchmarks
from .checkpoint import load_checkpoint, save_checkpoint
from .config import load_config, resolve_config_path
from .core import Frequency, KLineRecord, KLineSeries, Segment, slice_series
from .errors import ConfigError, DataError, KlineError, NumericError
from .evaluation import (
    backtest_topk,
    forecast_metrics,
    realized_volatility,
)
from .inference import SamplingConfig, TASK_SAMPLING_DEFAULTS, forecast
from .pipeline import build_training_windows, clean_series, default_cleaning_params
from .synthetic import make_ar1_series, make_backtest_panel, make_messy_series
from .tokenizer import (
    TOKENIZER_PRESETS,
    TokenizerModel,
    TokenizerTrainConfig,
    encode,
    evaluate_tokenizer,
    train_tokenizer,
)

log = logging.getLogger("kline")

__all__ = ["main"]


# --------------------------------------------------------------------------
# shared helpers


def _frequency(args, config) -> Frequency:
    label = args.frequency if args.frequency else config["data"]["frequency"]
    try:
        return Frequency.from_label(label)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _load_series(args, config, demo: str = "ar1") -> KLineSeries:
    freq = _frequency(args, config)
    if args.input:
        return kio.ingest_csv(args.input, args.asset_id, freq)
    log.info("no --input given; using deterministic synthetic demo series")
    if demo == "messy":
        return make_messy_series(args.asset_id, freq, seed=0)
    return make_ar1_series(args.asset_id, freq, n=512, seed=0)


def _cleaning_params(series: KLineSeries, config):
    return default_cleaning_params(series.frequency, config["data"]["liquidity_epsilon"])


def _training_windows(series: KLineSeries, config):
    windows, stamps, stats, masks = build_training_windows(
        series,
        config["data"]["window_length"],
        config["data"]["stride"],
        _cleaning_params(series, config),
    )
    if not windows:
        raise DataError(
            f"cleaning left no window of length {config['data']['window_length']}; "
            "provide more data or lower [data] window_length"
        )
    return np.asarray(windows), stamps, stats, masks


def _context_window(series: KLineSeries, config) -> KLineSeries:
    """Last cleaned stretch of the series, capped at the window length."""
    imputed, segments, _ = clean_series(series, _cleaning_params(series, config))
    if not segments:
        raise DataError("cleaning left no usable context segment")
    seg = segments[-1]
    lo = max(seg.start, seg.end - config["data"]["window_length"])
    return slice_series(imputed, Segment(series.asset_id, series.frequency, lo, seg.end))


def _load_tokenizer(path: str) -> TokenizerModel:
    model = load_checkpoint(path)
    if not isinstance(model, TokenizerModel):
        raise DataError(f"{path} holds a model checkpoint, not a tokenizer")
    return model


def _load_ar(path: str) -> ARModel:
    model = load_checkpoint(path)
    if not isinstance(model, ARModel):
        raise DataError(f"{path} holds a tokenizer checkpoint, not a model")
    return model


def _prepare_out(path: str | Path) -> Path:
    path = Path(path)
    if path.parent and not path.parent.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _sampling_from(args, config, task: str) -> SamplingConfig:
    base = TASK_SAMPLING_DEFAULTS[task]
    section = config["sampling"]
    return SamplingConfig(
        temperature=args.temperature if args.temperature is not None else (
            section["temperature"] if task == "forecast" else base.temperature
        ),
        top_p=args.top_p if args.top_p is not None else (
            section["top_p"] if task == "forecast" else base.top_p
        ),
        n_samples=getattr(args, "samples", None) or (
            section["n_samples"] if task == "forecast" else base.n_samples
        ),
        seed=args.seed if args.seed is not None else section["seed"],
    )


# --------------------------------------------------------------------------
# subcommands


def cmd_clean(args, config) -> int:
    series = _load_series(args, config, demo="messy")
    imputed, segments, report = clean_series(series, _cleaning_params(series, config))
    out_dir = Path(args.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    kio.write_segments_csv(out_dir / "segments.csv", segments)
    kio.write_metrics_csv(out_dir / "quality.csv", kio.quality_report_rows(report))
    for i, seg in enumerate(segments):
        kio.write_kline_csv(out_dir / f"segment_{i:03d}.csv", slice_series(imputed, seg))
    print(
        f"clean: kept {report.bars_kept}/{report.bars_total} bars in "
        f"{report.segments_kept} segments -> {out_dir}"
    )
    return 0


def cmd_train_tokenizer(args, config) -> int:
    series = _load_series(args, config)
    windows, _, _, _ = _training_windows(series, config)
    section = config["tokenizer"]
    preset = args.preset or section["preset"]
    cfg = TOKENIZER_PRESETS[preset]
    train_cfg = TokenizerTrainConfig(
        steps=args.steps or section["steps"],
        batch_size=section["batch_size"],
        peak_lr=section["peak_lr"],
        warmup_fraction=section["warmup_fraction"],
        weight_decay=section["weight_decay"],
        volume_dropout_rate=section["volume_dropout"],
        seed=args.seed if args.seed is not None else section["seed"],
    )
    log.info("training %s tokenizer for %d steps on %d windows", preset, train_cfg.steps, len(windows))
    model, trace = train_tokenizer(windows, cfg, train_cfg)
    save_checkpoint(_prepare_out(args.output), model)
    if args.trace:
        kio.write_trace_csv(_prepare_out(args.trace), trace)
    quality = evaluate_tokenizer(windows, model)
    print(
        f"train-tokenizer: {preset} final loss {trace[-1]['total']:.4f} "
        f"mse_full {quality['mse_full']:.4f} -> {args.output}"
    )
    return 0


def cmd_train_model(args, config) -> int:
    tok = _load_tokenizer(args.tokenizer)
    series = _load_series(args, config)
    windows, stamps, _, _ = _training_windows(series, config)
    pairs = encode(windows, tok)
    temporal = np.stack([temporal_features(ts, series.frequency) for ts in stamps])
    section = config["model"]
    preset = args.preset or section["preset"]
    cfg = AR_PRESETS[preset]
    if cfg.k != tok.cfg.k:
        raise ConfigError(
            f"model preset {preset!r} expects {cfg.k}-bit codes but the tokenizer "
            f"produces {tok.cfg.k}-bit codes"
        )
    train_cfg = ARTrainConfig(
        steps=args.steps or section["steps"],
        batch_size=section["batch_size"],
        peak_lr=section["peak_lr"],
        warmup_fraction=section["warmup_fraction"],
        weight_decay=section["weight_decay"],
        seed=args.seed if args.seed is not None else section["seed"],
    )
    log.info("training %s model for %d steps on %d token windows", preset, train_cfg.steps, len(pairs))
    model, trace = train_ar(pairs, temporal, cfg, train_cfg)
    save_checkpoint(_prepare_out(args.output), model)
    if args.trace:
        kio.write_trace_csv(_prepare_out(args.trace), trace)
    print(f"train-model: {preset} final loss {trace[-1]['loss']:.4f} -> {args.output}")
    return 0


def cmd_forecast(args, config) -> int:
    tok = _load_tokenizer(args.tokenizer)
    model = _load_ar(args.model)
    series = _load_series(args, config)
    window = _context_window(series, config)
    horizon = args.horizon or config["sampling"]["horizon"]
    sampling = _sampling_from(args, config, "forecast")
    result = forecast(window, tok, model, horizon, sampling, threads=args.threads)
    kio.write_forecast_csv(_prepare_out(args.output), result)
    print(
        f"forecast: {sampling.n_samples} samples x {horizon} steps for "
        f"{series.asset_id} -> {args.output}"
    )
    return 0


def cmd_generate(args, config) -> int:
    tok = _load_tokenizer(args.tokenizer)
    model = _load_ar(args.model)
    series = _load_series(args, config)
    window = _context_window(series, config)
    horizon = args.horizon or config["sampling"]["horizon"]
    sampling = replace(_sampling_from(args, config, "generation"), n_samples=1)
    result = forecast(window, tok, model, horizon, sampling, threads=1)
    path = series.asset_id + "-gen"
    records = tuple(
        KLineRecord(
            timestamp=int(result.timestamps[i]),
            open=float(result.samples[0, i, 0]),
            high=float(result.samples[0, i, 1]),
            low=float(result.samples[0, i, 2]),
            close=float(result.samples[0, i, 3]),
            volume=float(result.samples[0, i, 4]),
            amount=float(result.samples[0, i, 5]),
        )
        for i in range(horizon)
    )
    kio.write_kline_csv(_prepare_out(args.output), KLineSeries(path, series.frequency, records))
    print(f"generate: {horizon} sampled bars for {series.asset_id} -> {args.output}")
    return 0


def cmd_evaluate(args, config) -> int:
    ts, mean, _samples = kio.read_forecast_csv(args.forecast)
    freq = _frequency(args, config)
    actual_series = kio.ingest_csv(args.actual, args.asset_id, freq)
    by_ts = {rec.timestamp: i for i, rec in enumerate(actual_series.records)}
    missing = [int(t) for t in ts if int(t) not in by_ts]
    if missing:
        raise DataError(
            f"actual data lacks {len(missing)} forecast timestamps "
            f"(first missing: {kio.format_timestamp(missing[0])})"
        )
    actual = actual_series.to_matrix()[[by_ts[int(t)] for t in ts]]
    report = forecast_metrics(mean[None], actual[None])
    metrics = report.as_dict()
    if np.all(mean[:, 3] > 0) and np.all(actual[:, 3] > 0):
        metrics["rv_forecast"] = realized_volatility(mean[:, 3])
        metrics["rv_actual"] = realized_volatility(actual[:, 3])
        metrics["rv_abs_error"] = abs(metrics["rv_forecast"] - metrics["rv_actual"])
    kio.write_metrics_csv(_prepare_out(args.output), metrics)
    print(
        f"evaluate: ic {metrics['ic']:.4f} rank_ic {metrics['rank_ic']:.4f} "
        f"mae {metrics['mae']:.4f} -> {args.output}"
    )
    return 0


def cmd_backtest(args, config) -> int:
    section = config["backtest"]
    if args.signals or args.prices or args.benchmark:
        if not (args.signals and args.prices and args.benchmark):
            raise ConfigError("--signals, --prices, and --benchmark must be given together")
        sig_ts, sig_ids, signals = kio.read_panel_csv(args.signals)
        px_ts, px_ids, prices = kio.read_panel_csv(args.prices)
        b_ts, _, bench = kio.read_panel_csv(args.benchmark)
        if sig_ids != px_ids:
            raise DataError("signals and prices list different assets")
        if not (np.array_equal(sig_ts, px_ts) and np.array_equal(sig_ts, b_ts)):
            raise DataError("signals, prices, and benchmark cover different days")
        benchmark = bench[:, 0]
    else:
        log.info("no panel inputs given; using synthetic demo panel")
        _, sig_ids, signals, prices, benchmark = make_backtest_panel(seed=0)
    result = backtest_topk(
        signals,
        prices,
        benchmark,
        top_k=args.top_k if args.top_k is not None else section["top_k"],
        max_trades_per_day=(
            args.max_trades if args.max_trades is not None else section["max_trades_per_day"]
        ),
        min_hold_days=args.min_hold if args.min_hold is not None else section["min_hold_days"],
        cost_rate=args.cost_rate if args.cost_rate is not None else section["cost_rate"],
        initial_cash=section["initial_cash"],
    )
    kio.write_equity_csv(_prepare_out(args.output), result)
    if args.metrics:
        kio.write_metrics_csv(
            _prepare_out(args.metrics),
            {
                "annualized_excess_return": result.annualized_excess_return,
                "information_ratio": result.information_ratio,
                "final_value": result.final_value,
                "n_buys": float(result.n_buys),
                "n_sells": float(result.n_sells),
                "total_costs": float(result.costs.sum()),
            },
        )
    print(
        f"backtest: {len(sig_ids)} assets, {len(result.values)} days, "
        f"final value {result.final_value:.4f}, AER {result.annualized_excess_return:+.4f}, "
        f"IR {result.information_ratio:.2f} -> {args.output}"
    )
    return 0


def cmd_audit_params(args, config) -> int:
    overridden = args.k is not None or args.d_model is not None
    if args.preset:
        presets = [args.preset]
    elif overridden:
        presets = ["base"]
    else:
        presets = list(AR_PRESETS)
    try:
        splits = [int(s) for s in args.splits.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"--splits must be comma-separated integers, got {args.splits!r}") from None
    configs = {}
    for preset in presets:
        cfg = AR_PRESETS[preset]
        if overridden:
            cfg = replace(
                cfg,
                k=args.k if args.k is not None else cfg.k,
                d_model=args.d_model if args.d_model is not None else cfg.d_model,
            )
        configs[preset] = cfg
    rows = []
    print(
        f"{'preset':<8} {'splits':>6} {'sub_vocab':>10} {'core':>14} "
        f"{'vocab':>14} {'fusion':>12} {'total':>14} {'steps/token':>12}"
    )
    for preset, cfg in configs.items():
        for n in splits:
            if cfg.k % n != 0:
                continue
            audit = count_parameters(cfg, n)
            rows.append((preset, audit))
            print(
                f"{preset:<8} {n:>6} {audit.sub_vocab:>10} {audit.core:>14,} "
                f"{audit.vocab:>14,} {audit.fusion:>12,} {audit.total:>14,} "
                f"{audit.steps_per_token:>12}"
            )
    if args.verify:
        cfg = AR_PRESETS["tiny"]
        actual = count_model_parameters(init_ar_model(cfg, seed=0))
        expected = count_parameters(cfg, 2).total
        if actual != expected:
            raise NumericError(
                f"parameter audit mismatch: counted {actual}, formula gives {expected}"
            )
        print(f"verified: tiny model holds exactly {actual:,} parameters")
    return 0


def cmd_bench(args, config) -> int:
    rows = run_benchmarks(reps=args.reps)
    print(format_benchmarks(rows))
    return 0


# --------------------------------------------------------------------------
# argument parsing


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file (default: $KLINE_CONFIG if set)")
    common.add_argument(
        "--threads",
        type=int,
        default=1,
        help="worker threads for ensemble rollouts; results are identical at any value",
    )
    common.add_argument("--verbose", action="store_true", help="debug logging")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--input", help="bar CSV (header: timestamp,open,high,low,close,volume,amount)")
    data.add_argument("--asset-id", default="demo", help="asset identifier for the input")
    data.add_argument("--frequency", help="bar frequency label (default from config)")

    parser = argparse.ArgumentParser(
        prog="kline",
        description="K-line tokenization, autoregressive modeling, forecasting, and evaluation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("clean", parents=[common, data], help="segment and filter raw bars")
    p.add_argument("--output-dir", required=True, help="directory for segments and quality report")
    p.set_defaults(fn=cmd_clean)

    p = sub.add_parser("train-tokenizer", parents=[common, data], help="fit the bar tokenizer")
    p.add_argument("--output", required=True, help="checkpoint path to write")
    p.add_argument("--trace", help="optional training trace CSV")
    p.add_argument("--steps", type=int, help="override [tokenizer] steps")
    p.add_argument("--seed", type=int, help="override [tokenizer] seed")
    p.add_argument("--preset", choices=sorted(TOKENIZER_PRESETS), help="override [tokenizer] preset")
    p.set_defaults(fn=cmd_train_tokenizer)

    p = sub.add_parser("train-model", parents=[common, data], help="fit the sequence model")
    p.add_argument("--tokenizer", required=True, help="tokenizer checkpoint")
    p.add_argument("--output", required=True, help="checkpoint path to write")
    p.add_argument("--trace", help="optional training trace CSV")
    p.add_argument("--steps", type=int, help="override [model] steps")
    p.add_argument("--seed", type=int, help="override [model] seed")
    p.add_argument("--preset", choices=sorted(AR_PRESETS), help="override [model] preset")
    p.set_defaults(fn=cmd_train_model)

    for name, task, help_text in (
        ("forecast", "forecast", "Monte Carlo forecast from the end of a series"),
        ("generate", "generation", "sample a synthetic continuation as bar data"),
    ):
        p = sub.add_parser(name, parents=[common, data], help=help_text)
        p.add_argument("--tokenizer", required=True, help="tokenizer checkpoint")
        p.add_argument("--model", required=True, help="model checkpoint")
        p.add_argument("--output", required=True, help="output CSV")
        p.add_argument("--horizon", type=int, help="steps to produce (default [sampling] horizon)")
        p.add_argument("--temperature", type=float, help="sampling temperature")
        p.add_argument("--top-p", type=float, dest="top_p", help="nucleus mass")
        p.add_argument("--seed", type=int, help="sampling seed")
        if name == "forecast":
            p.add_argument("--samples", type=int, help="ensemble size")
        p.set_defaults(fn=cmd_forecast if name == "forecast" else cmd_generate)

    p = sub.add_parser("evaluate", parents=[common], help="score a forecast against realized bars")
    p.add_argument("--forecast", required=True, help="forecast CSV from the forecast command")
    p.add_argument("--actual", required=True, help="realized bar CSV")
    p.add_argument("--asset-id", default="demo")
    p.add_argument("--frequency", help="bar frequency label (default from config)")
    p.add_argument("--output", required=True, help="metrics CSV")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("backtest", parents=[common], help="top-k long-only signal backtest")
    p.add_argument("--signals", help="panel CSV: timestamp,<asset>,... of ranking signals")
    p.add_argument("--prices", help="panel CSV of execution prices")
    p.add_argument("--benchmark", help="single-column panel CSV of benchmark levels")
    p.add_argument("--output", required=True, help="equity curve CSV")
    p.add_argument("--metrics", help="optional metrics CSV")
    p.add_argument("--top-k", type=int, dest="top_k")
    p.add_argument("--max-trades", type=int, dest="max_trades")
    p.add_argument("--min-hold", type=int, dest="min_hold")
    p.add_argument("--cost-rate", type=float, dest="cost_rate")
    p.set_defaults(fn=cmd_backtest)

    p = sub.add_parser("audit-params", parents=[common], help="parameter accounting per preset")
    p.add_argument("--preset", choices=sorted(AR_PRESETS))
    p.add_argument("--splits", default="1,2,4,5", help="comma-separated factorization counts")
    p.add_argument("--k", type=int, help="override code bits (defaults to the preset's)")
    p.add_argument("--d-model", type=int, dest="d_model", help="override model width")
    p.add_argument("--verify", action="store_true", help="check the formula against a built model")
    p.set_defaults(fn=cmd_audit_params)

    p = sub.add_parser("bench", parents=[common], help="time pure vs compiled kernels")
    p.add_argument("--reps", type=int, default=50)
    p.set_defaults(fn=cmd_bench)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    if args.threads < 1:
        print("kline: --threads must be >= 1", file=sys.stderr)
        return 2
    try:
        config = load_config(resolve_config_path(args.config))
        log.debug("kernel backend: %s", _kernels.backend_name())
        return args.fn(args, config)
    except ConfigError as exc:
        print(f"kline: configuration error: {exc}", file=sys.stderr)
        return 2
    except (DataError, OSError) as exc:
        print(f"kline: data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"kline: numeric failure: {exc}", file=sys.stderr)
        return 4
    except KlineError as exc:
        print(f"kline: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
