"""Ownership-concentration and ecosystem-integration metrics.

All ratio metrics are computed on exact rationals and returned as
Fractions; callers convert to float or formatted percentages at the
presentation edge. Trend statistics use ordinary least squares over
monthly series.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import InsufficientHistory, NonPositiveSupply
from .mapper import MappingResult
from .model import (
    Address,
    Adjustment,
    AdjustmentCategory,
    Amount,
    ExclusionReason,
    HolderTable,
    TokenId,
)

TOP_N_LEVELS = (5, 10, 50, 100, 500)
TOP_PCT_LEVELS = (50, 99)
GINI_TOP = 500
MULTI_TOKEN_LEVELS = (1, 2, 3, 4)
MULTI_TOKEN_THRESHOLD = Fraction(1, 1000)
MIN_TREND_OBSERVATIONS = 12


def relevant_supply(table: HolderTable) -> Fraction:
    """Net total of all included holdings; debts count negatively."""
    total = table.total()
    if total <= 0:
        raise NonPositiveSupply(f"relevant supply is {total}")
    return total


def top_n_share(table: HolderTable, n: int) -> Fraction:
    """Share of relevant supply held by the n largest positive holders."""
    if n < 1:
        raise ValueError("n must be at least 1")
    supply = relevant_supply(table)
    top = sum((v for _, v in table.positive_ranked()[:n]), Fraction(0))
    return top / supply


def top_pct_count(table: HolderTable, p: Fraction | float) -> int:
    """Smallest number of top holders that jointly own at least p."""
    p = Fraction(str(p)) if isinstance(p, float) else Fraction(p)
    if not 0 < p < 1:
        raise ValueError("p must be strictly between 0 and 1")
    target = p * relevant_supply(table)
    cumulative = Fraction(0)
    for k, (_, value) in enumerate(table.positive_ranked(), start=1):
        cumulative += value
        if cumulative >= target:
            return k
    raise NonPositiveSupply("positive holdings never reach the requested share")


def gini_500(table: HolderTable, *, pad: bool = True) -> Fraction:
    """Gini coefficient over the top 500 positive balances.

    With `pad` (the default) fewer than 500 holders are zero-padded so
    the fixed 500^2 denominator stays literal; `pad=False` restricts the
    population to the holders that exist.
    """
    balances = [v for _, v in table.positive_ranked()[:GINI_TOP]]
    if not balances:
        raise NonPositiveSupply("gini requires at least one positive holder")
    n = GINI_TOP if pad else len(balances)
    total = sum(balances, Fraction(0))
    ascending = sorted(balances)
    offset = n - len(ascending)  # implicit zeros sort first when padding
    weighted = sum(
        ((2 * (i + 1 + offset) - n - 1) * x for i, x in enumerate(ascending)),
        Fraction(0),
    )
    return Fraction(weighted, 1) / (n * total)


def inclusion_pct(relevant: Amount, total_supply: Amount, burned: Amount) -> Fraction:
    """Relevant supply over total non-burned supply."""
    total_supply = Fraction(total_supply)
    burned = Fraction(burned)
    if total_supply <= burned:
        raise NonPositiveSupply("total supply must exceed burned supply")
    return Fraction(relevant) / (total_supply - burned)


def shorted_pct(table: HolderTable) -> Fraction:
    """Magnitude of negative net balances relative to relevant supply."""
    supply = relevant_supply(table)
    short = sum((-v for v in table.entries.values() if v < 0), Fraction(0))
    return short / supply


def wrapping_complexity(
    adjustments: Iterable[Adjustment], relevant: Amount
) -> tuple[Fraction, dict[AdjustmentCategory, Fraction]]:
    """Sum of absolute adjustments over relevant supply, split by category.

    Callers must pass only the relevant adjustments (see
    `relevant_adjustments`): remaps whose beneficiary ended up excluded
    are dropped from both sides of the ratio.
    """
    relevant = Fraction(relevant)
    if relevant <= 0:
        raise NonPositiveSupply("relevant supply must be positive")
    by_category: dict[AdjustmentCategory, Fraction] = {}
    for adj in adjustments:
        magnitude = abs(adj.amount)
        by_category[adj.category] = by_category.get(adj.category, Fraction(0)) + magnitude
    shares = {cat: value / relevant for cat, value in by_category.items()}
    total = sum(shares.values(), Fraction(0))
    return total, shares


def relevant_adjustments(result: MappingResult) -> list[Adjustment]:
    """Adjustments whose beneficiary was not excluded by the run."""
    excluded = result.excluded_addresses()
    return [adj for adj in result.adjustments if adj.beneficiary not in excluded]


def multi_token_holdings(
    tables: Mapping[TokenId, HolderTable],
    focus: TokenId,
    *,
    threshold: Fraction = MULTI_TOKEN_THRESHOLD,
) -> dict[int, int]:
    """Addresses above the threshold in the focus token and in >= n others."""
    if focus not in tables:
        raise ValueError(f"focus token {focus.symbol} missing from tables")
    if len(tables) < 2:
        raise ValueError("multi-token holdings need at least two tokens")
    qualifiers: dict[TokenId, set[Address]] = {}
    for token, table in tables.items():
        floor = threshold * relevant_supply(table)
        qualifiers[token] = {addr for addr, value in table.entries.items() if value >= floor and value > 0}
    counts = {n: 0 for n in MULTI_TOKEN_LEVELS}
    others = [token for token in tables if token != focus]
    for addr in qualifiers[focus]:
        hits = sum(1 for token in others if addr in qualifiers[token])
        for n in MULTI_TOKEN_LEVELS:
            if hits >= n:
                counts[n] += 1
    return counts


@dataclass(frozen=True)
class TrendEntry:
    trend_pct_per_month: float
    sigma_12m: float


def trend_and_vol(series: Sequence[float]) -> TrendEntry:
    """OLS slope normalized by the series mean, plus sample volatility.

    The slope is expressed as percent of the mean level per month; a
    flat series yields exactly (0, 0).
    """
    if len(series) < MIN_TREND_OBSERVATIONS:
        raise InsufficientHistory(
            f"need at least {MIN_TREND_OBSERVATIONS} monthly observations, got {len(series)}"
        )
    values = np.asarray(series, dtype=float)
    if np.all(values == values[0]):
        return TrendEntry(0.0, 0.0)
    months = np.arange(len(values), dtype=float)
    slope = float(np.polyfit(months, values, 1)[0])
    mean = float(values.mean())
    if mean == 0.0:
        raise ValueError("cannot normalize trend for a zero-mean series")
    sigma = float(values.std(ddof=1))
    return TrendEntry(slope / mean * 100.0, sigma)


@dataclass(frozen=True)
class ConcentrationReport:
    owner_count: int
    top_n_share: Mapping[int, Fraction]
    top_pct_count: Mapping[int, int]
    gini_500: Fraction


@dataclass(frozen=True)
class IntegrationReport:
    relevant_supply: Fraction
    inclusion_pct: Fraction
    wrapping_complexity: Fraction
    wrapping_by_category: Mapping[AdjustmentCategory, Fraction]
    multi_token: Mapping[int, int]
    shorted_pct: Fraction


@dataclass(frozen=True)
class TrendReport:
    entries: Mapping[str, TrendEntry] = field(default_factory=dict)


def concentration_report(table: HolderTable, *, gini_pad: bool = True) -> ConcentrationReport:
    positive = table.positive_ranked()
    return ConcentrationReport(
        owner_count=len(positive),
        top_n_share={n: top_n_share(table, n) for n in TOP_N_LEVELS},
        top_pct_count={p: top_pct_count(table, Fraction(p, 100)) for p in TOP_PCT_LEVELS},
        gini_500=gini_500(table, pad=gini_pad),
    )


_BURN_REASONS = frozenset({ExclusionReason.BURNER, ExclusionReason.SELF_MAPPED_BURN})


def burned_supply(result: MappingResult) -> Fraction:
    """Supply destroyed outright: zero-address burns, burner-address
    holdings, and self-mapped tokens."""
    table = result.table
    burned = table.burned
    for (_, reason), amount in table.excluded.items():
        if reason in _BURN_REASONS:
            burned += amount
    return burned


def integration_report(
    result: MappingResult,
    *,
    peer_tables: Mapping[TokenId, HolderTable] | None = None,
) -> IntegrationReport:
    table = result.table
    supply = relevant_supply(table)
    total, by_category = wrapping_complexity(relevant_adjustments(result), supply)
    burned = burned_supply(result)
    tables = dict(peer_tables or {})
    tables[table.token] = table
    if len(tables) >= 2:
        multi = multi_token_holdings(tables, table.token)
    else:
        multi = {n: 0 for n in MULTI_TOKEN_LEVELS}
    return IntegrationReport(
        relevant_supply=supply,
        inclusion_pct=inclusion_pct(supply, table.minted, burned),
        wrapping_complexity=total,
        wrapping_by_category=by_category,
        multi_token=multi,
        shorted_pct=shorted_pct(table),
    )
