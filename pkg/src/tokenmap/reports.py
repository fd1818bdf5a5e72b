"""Report assembly: concentration and integration tables, trend rows,
and the per-category wrapping time series.

Percentages are rendered at two decimals, half-even, from the exact
rationals; rounding happens here and nowhere else.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from decimal import Decimal, ROUND_HALF_EVEN
from fractions import Fraction
from typing import Mapping, Sequence

from .errors import InsufficientHistory
from .metrics import (
    ConcentrationReport,
    IntegrationReport,
    MIN_TREND_OBSERVATIONS,
    TOP_N_LEVELS,
    TOP_PCT_LEVELS,
    TrendEntry,
    trend_and_vol,
)
from .model import AdjustmentCategory, Snapshot, TokenId

INSUFFICIENT_HISTORY_MARK = "†"  # dagger, matches the published table

CONCENTRATION_HEADER = (
    "Token",
    "Date",
    "Owner #",
    "Top 5",
    "Top 10",
    "Top 50",
    "Top 100",
    "Top 500",
    "Top 50%",
    "Top 99%",
    "Gini 500",
)

INTEGRATION_HEADER = (
    "Token",
    "Date",
    "Inclusion %",
    "Wrapping Complexity",
    "Multi-Token Holdings 1+",
    "Multi-Token Holdings 2+",
    "Multi-Token Holdings 3+",
    "Multi-Token Holdings 4+",
    "Shorted",
)

TIMESERIES_HEADER = ("token", "date", "category", "value")


@dataclass(frozen=True)
class SnapshotMetrics:
    token: TokenId
    snapshot: Snapshot
    concentration: ConcentrationReport
    integration: IntegrationReport


def percent_str(value: Fraction, places: int = 2) -> str:
    """Exact rational -> percentage string, half-even at `places`."""
    quant = Decimal(1).scaleb(-places)
    dec = (Decimal(value.numerator) / Decimal(value.denominator) * 100).quantize(
        quant, rounding=ROUND_HALF_EVEN
    )
    return f"{dec}%"


def signed_percent_str(value: float, places: int = 2) -> str:
    dec = Decimal(repr(value)).quantize(Decimal(1).scaleb(-places), rounding=ROUND_HALF_EVEN)
    return f"{'+' if dec >= 0 else ''}{dec}%"


def sigma_str(value: float) -> str:
    return format(value, ".6g")


def _concentration_values(report: ConcentrationReport) -> list[float]:
    values: list[float] = [float(report.owner_count)]
    values.extend(float(report.top_n_share[n]) for n in TOP_N_LEVELS)
    values.extend(float(report.top_pct_count[p]) for p in TOP_PCT_LEVELS)
    values.append(float(report.gini_500))
    return values


def concentration_row(entry: SnapshotMetrics, *, dagger: bool = False) -> list[str]:
    report = entry.concentration
    row = [
        entry.token.symbol + (INSUFFICIENT_HISTORY_MARK if dagger else ""),
        entry.snapshot.date.isoformat(),
        str(report.owner_count),
    ]
    row.extend(percent_str(report.top_n_share[n]) for n in TOP_N_LEVELS)
    row.extend(str(report.top_pct_count[p]) for p in TOP_PCT_LEVELS)
    row.append(percent_str(report.gini_500))
    return row


def integration_row(entry: SnapshotMetrics, *, dagger: bool = False) -> list[str]:
    report = entry.integration
    row = [
        entry.token.symbol + (INSUFFICIENT_HISTORY_MARK if dagger else ""),
        entry.snapshot.date.isoformat(),
        percent_str(report.inclusion_pct),
        percent_str(report.wrapping_complexity),
    ]
    row.extend(str(report.multi_token.get(n, 0)) for n in (1, 2, 3, 4))
    row.append(percent_str(report.shorted_pct))
    return row


def _trend_rows(token: TokenId, series: Sequence[Sequence[float]]) -> list[list[str]]:
    """Trend and sigma rows over per-snapshot metric columns."""
    columns = list(zip(*series))
    trends: list[TrendEntry] = [trend_and_vol(column) for column in columns]
    trend_row = [token.symbol, "Trend"] + [signed_percent_str(t.trend_pct_per_month) for t in trends]
    sigma_row = [token.symbol, "σ 12m"] + [sigma_str(t.sigma_12m) for t in trends]
    return [trend_row, sigma_row]


def build_concentration_table(series_by_token: Mapping[TokenId, Sequence[SnapshotMetrics]]) -> list[list[str]]:
    """One row per (token, snapshot) plus trend/sigma rows when the token
    has at least twelve snapshots; otherwise the token gets a dagger."""
    rows: list[list[str]] = []
    for token in sorted(series_by_token, key=lambda t: t.symbol):
        series = sorted(series_by_token[token], key=lambda e: e.snapshot.block)
        enough = len(series) >= MIN_TREND_OBSERVATIONS
        for entry in series:
            rows.append(concentration_row(entry, dagger=not enough))
        if enough:
            rows.extend(_trend_rows(token, [_concentration_values(e.concentration) for e in series]))
    return rows


def build_integration_table(series_by_token: Mapping[TokenId, Sequence[SnapshotMetrics]]) -> list[list[str]]:
    rows: list[list[str]] = []
    for token in sorted(series_by_token, key=lambda t: t.symbol):
        series = sorted(series_by_token[token], key=lambda e: e.snapshot.block)
        enough = len(series) >= MIN_TREND_OBSERVATIONS
        for entry in series:
            rows.append(integration_row(entry, dagger=not enough))
    return rows


def build_timeseries_rows(series_by_token: Mapping[TokenId, Sequence[SnapshotMetrics]]) -> list[list[str]]:
    """Long-format stacked wrapping-complexity data (one row per non-zero
    category per snapshot), ready for any plotting tool."""
    rows: list[list[str]] = []
    for token in sorted(series_by_token, key=lambda t: t.symbol):
        for entry in sorted(series_by_token[token], key=lambda e: e.snapshot.block):
            by_cat = entry.integration.wrapping_by_category
            for category in AdjustmentCategory:
                value = by_cat.get(category, Fraction(0))
                if value == 0:
                    continue
                rows.append(
                    [
                        token.symbol,
                        entry.snapshot.date.isoformat(),
                        category.value,
                        repr(float(value)),
                    ]
                )
    return rows


def render_csv(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buffer.getvalue()


def rows_to_json(header: Sequence[str], rows: Sequence[Sequence[str]]) -> list[dict[str, str]]:
    return [dict(zip(header, row)) for row in rows]
