"""CSV ingestion and emission.

Bar files use the fixed header ``timestamp,open,high,low,close,volume,amount``.
The timestamp column is either ISO-8601 (UTC assumed when no offset is given)
or integer epoch seconds; the style is detected from the first data row and a
file may not mix styles.  Empty price fields mean missing; empty volume or
amount fields mean the channel was not observed for that bar.

All writers emit ``\n`` line endings and shortest round-trip float formatting,
so identical inputs produce byte-identical files.
"""

from __future__ import annotations

import csv
import math
import re
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .core import CHANNELS, Frequency, KLineRecord, KLineSeries, Segment
from .errors import DataError
from .evaluation import BacktestResult
from .inference import ForecastResult
from .pipeline import QualityReport

__all__ = [
    "KLINE_HEADER",
    "ingest_csv",
    "write_kline_csv",
    "write_forecast_csv",
    "read_forecast_csv",
    "write_metrics_csv",
    "write_trace_csv",
    "write_segments_csv",
    "write_equity_csv",
    "read_panel_csv",
    "quality_report_rows",
]

KLINE_HEADER = ("timestamp",) + CHANNELS

_EPOCH_RE = re.compile(r"^-?\d+$")


# --------------------------------------------------------------------------
# timestamps


def _parse_epoch(field: str, where: str) -> int:
    if not _EPOCH_RE.match(field):
        raise DataError(f"{where}: expected epoch seconds, got {field!r} (styles may not mix)")
    return int(field)


def _parse_iso(field: str, where: str) -> int:
    if _EPOCH_RE.match(field):
        raise DataError(f"{where}: expected ISO-8601, got {field!r} (styles may not mix)")
    text = field.strip()
    if text.endswith(("Z", "z")):
        text = text[:-1] + "+00:00"
    try:
        dt = datetime.fromisoformat(text)
    except ValueError as exc:
        raise DataError(f"{where}: unparseable timestamp {field!r}") from exc
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    if dt.microsecond != 0:
        raise DataError(f"{where}: sub-second timestamps are not supported: {field!r}")
    return int(dt.timestamp())


def _timestamp_parser(first_field: str):
    """Pick the parser for a whole file from its first data row."""
    return _parse_epoch if _EPOCH_RE.match(first_field.strip()) else _parse_iso


def format_timestamp(ts: int) -> str:
    return datetime.fromtimestamp(int(ts), tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


# --------------------------------------------------------------------------
# bar files


def _parse_price(field: str, where: str) -> float:
    if field.strip() == "":
        return float("nan")
    try:
        return float(field)
    except ValueError as exc:
        raise DataError(f"{where}: bad price field {field!r}") from exc


def _parse_optional(field: str, where: str) -> tuple[float, bool]:
    if field.strip() == "":
        return 0.0, False
    try:
        return float(field), True
    except ValueError as exc:
        raise DataError(f"{where}: bad volume/amount field {field!r}") from exc


def ingest_csv(path: str | Path, asset_id: str, frequency: Frequency) -> KLineSeries:
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty file")
    if tuple(rows[0]) != KLINE_HEADER:
        raise DataError(
            f"{path}: bad header {','.join(rows[0])!r}; expected {','.join(KLINE_HEADER)!r}"
        )
    body = [r for r in rows[1:] if r]
    if not body:
        raise DataError(f"{path}: no data rows")
    parse_ts = _timestamp_parser(body[0][0])
    records = []
    for i, row in enumerate(body, start=2):
        where = f"{path}:{i}"
        if len(row) != len(KLINE_HEADER):
            raise DataError(f"{where}: expected {len(KLINE_HEADER)} fields, got {len(row)}")
        ts = parse_ts(row[0].strip(), where)
        o, h, lo, c = (_parse_price(row[j], where) for j in range(1, 5))
        vol, vol_present = _parse_optional(row[5], where)
        amt, amt_present = _parse_optional(row[6], where)
        records.append(
            KLineRecord(ts, o, h, lo, c, vol, amt, vol_present, amt_present)
        )
    return KLineSeries(asset_id=asset_id, frequency=frequency, records=tuple(records))


def _fmt(value: float) -> str:
    if math.isnan(value):
        return ""
    return repr(float(value))


def write_kline_csv(path: str | Path, series: KLineSeries, iso: bool = True) -> None:
    with Path(path).open("w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(KLINE_HEADER)
        for rec in series:
            ts = format_timestamp(rec.timestamp) if iso else str(rec.timestamp)
            out.writerow(
                [
                    ts,
                    _fmt(rec.open),
                    _fmt(rec.high),
                    _fmt(rec.low),
                    _fmt(rec.close),
                    _fmt(rec.volume) if rec.volume_present else "",
                    _fmt(rec.amount) if rec.amount_present else "",
                ]
            )


# --------------------------------------------------------------------------
# forecasts


def write_forecast_csv(path: str | Path, result: ForecastResult) -> None:
    """One row per (sample, step); the ensemble mean uses sample id "mean"."""
    with Path(path).open("w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(("sample", "timestamp") + CHANNELS)
        for step, ts in enumerate(result.timestamps):
            out.writerow(
                ["mean", format_timestamp(int(ts))] + [_fmt(v) for v in result.ensemble_mean[step]]
            )
        for s in range(result.samples.shape[0]):
            for step, ts in enumerate(result.timestamps):
                out.writerow(
                    [str(s), format_timestamp(int(ts))] + [_fmt(v) for v in result.samples[s, step]]
                )


def read_forecast_csv(path: str | Path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (timestamps [H], mean [H x 6], samples [N x H x 6])."""
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    expected = ("sample", "timestamp") + CHANNELS
    if not rows or tuple(rows[0]) != expected:
        raise DataError(f"{path}: not a forecast file (expected header {','.join(expected)!r})")
    groups: dict[str, list[list[float]]] = {}
    stamps: dict[str, list[int]] = {}
    for i, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(expected):
            raise DataError(f"{path}:{i}: expected {len(expected)} fields, got {len(row)}")
        key = row[0]
        stamps.setdefault(key, []).append(_parse_iso(row[1], f"{path}:{i}"))
        groups.setdefault(key, []).append([float(v) for v in row[2:]])
    if "mean" not in groups:
        raise DataError(f"{path}: forecast file has no ensemble mean rows")
    mean = np.asarray(groups.pop("mean"), dtype=np.float64)
    ts = np.asarray(stamps["mean"], dtype=np.int64)
    sample_keys = sorted(groups, key=int)
    samples = (
        np.stack([np.asarray(groups[k], dtype=np.float64) for k in sample_keys])
        if sample_keys
        else np.empty((0,) + mean.shape)
    )
    return ts, mean, samples


# --------------------------------------------------------------------------
# reports


def write_metrics_csv(path: str | Path, metrics: Mapping[str, float]) -> None:
    with Path(path).open("w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(("metric", "value"))
        for key in sorted(metrics):
            out.writerow((key, _fmt(float(metrics[key]))))


def write_trace_csv(path: str | Path, trace: Sequence[Mapping[str, float]]) -> None:
    if not trace:
        raise DataError("empty training trace")
    keys = sorted(trace[0])
    with Path(path).open("w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(keys)
        for row in trace:
            out.writerow([_fmt(float(row[k])) for k in keys])


def write_segments_csv(path: str | Path, segments: Iterable[Segment]) -> None:
    with Path(path).open("w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(("asset_id", "frequency", "start", "end"))
        for seg in segments:
            out.writerow((seg.asset_id, seg.frequency.value, seg.start, seg.end))


def quality_report_rows(report: QualityReport) -> dict[str, float]:
    return {
        "bars_total": float(report.bars_total),
        "bars_kept": float(report.bars_kept),
        "bars_dropped": float(report.bars_dropped),
        "segments_kept": float(report.segments_kept),
        "drop_missing_price": float(report.drop_missing_price),
        "drop_illiquid_run": float(report.drop_illiquid_run),
        "drop_stagnant_run": float(report.drop_stagnant_run),
        "drop_min_length": float(report.drop_min_length),
    }


def write_equity_csv(path: str | Path, result: BacktestResult) -> None:
    with Path(path).open("w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(("day", "value", "pnl", "costs"))
        for day in range(len(result.values)):
            out.writerow(
                (day, _fmt(result.values[day]), _fmt(result.pnl[day]), _fmt(result.costs[day]))
            )


# --------------------------------------------------------------------------
# panels (backtest inputs)


def read_panel_csv(path: str | Path) -> tuple[np.ndarray, list[str], np.ndarray]:
    """Read a [days x columns] panel: header ``timestamp,<id>,<id>,...``.

    Returns (timestamps, column ids, matrix).  Used for backtest signals,
    prices, and (single-column) benchmarks.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:1] != ["timestamp"] or len(rows[0]) < 2:
        raise DataError(f"{path}: expected header 'timestamp,<id>,...'")
    ids = rows[0][1:]
    body = [r for r in rows[1:] if r]
    if not body:
        raise DataError(f"{path}: no data rows")
    parse_ts = _timestamp_parser(body[0][0])
    stamps = []
    values = []
    for i, row in enumerate(body, start=2):
        where = f"{path}:{i}"
        if len(row) != len(ids) + 1:
            raise DataError(f"{where}: expected {len(ids) + 1} fields, got {len(row)}")
        stamps.append(parse_ts(row[0].strip(), where))
        try:
            values.append([float(v) for v in row[1:]])
        except ValueError as exc:
            raise DataError(f"{where}: bad numeric field") from exc
    return np.asarray(stamps, dtype=np.int64), ids, np.asarray(values, dtype=np.float64)
