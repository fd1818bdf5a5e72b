"""Offline token-holder analytics.

Rebuilds holder tables from normalized event logs, iteratively remaps
custodial contract holdings to their economic beneficiaries, and
computes ownership-concentration and ecosystem-integration metrics.
"""

from .errors import (
    ConfigError,
    CycleDetected,
    DuplicateEvent,
    EmptyPool,
    InsolventPool,
    InsufficientHistory,
    IterationLimitExceeded,
    NegativeBalance,
    NegativePosition,
    NonPositiveSupply,
    OverAllocated,
    ParseError,
    SchemaError,
    TokenMapError,
    UnresolvedMajorHolder,
    ZeroDenominator,
)
from .ingest import (
    ContractEntry,
    ContractKind,
    ContractRegistry,
    EventKind,
    LabelClass,
    LabelEntry,
    LabelRegistry,
    LedgerEvent,
    PositionLedger,
    build_holder_table,
    build_position_ledger,
    load_events,
    load_registries,
)
from .mapper import (
    Action,
    Category,
    Decision,
    MappingResult,
    categorize,
    classify_adjustment,
    inclusion_decision,
    map_lending_pool,
    map_liquidity_pool,
    map_staking,
    map_unique,
    run_iterative_mapping,
)
from .metrics import (
    ConcentrationReport,
    IntegrationReport,
    TrendEntry,
    concentration_report,
    gini_500,
    inclusion_pct,
    integration_report,
    multi_token_holdings,
    relevant_adjustments,
    relevant_supply,
    shorted_pct,
    top_n_share,
    top_pct_count,
    trend_and_vol,
    wrapping_complexity,
)
from .model import (
    Address,
    Adjustment,
    AdjustmentCategory,
    Amount,
    ExclusionReason,
    HolderTable,
    Snapshot,
    TokenId,
    ZERO_ADDRESS,
    amount_add,
    amount_prorate,
    format_units,
    parse_units,
)
from .pipeline import EventIndex, SnapshotContext, map_snapshot
from .synth import GroundTruth, Scenario, ScenarioSpec, generate, oracle_metrics

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
