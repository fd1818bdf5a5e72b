"""Snapshot orchestration: events + registries in, mapping results out.

Builds the holder table, position ledgers and share-token tables for one
(token, snapshot) pair and feeds them to the iterative mapper. Distinct
(token, snapshot) runs are independent.
"""

from __future__ import annotations

import heapq
from collections import defaultdict
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

from .ingest import (
    ContractKind,
    ContractRegistry,
    EventKind,
    LabelRegistry,
    LedgerEvent,
    PositionLedger,
    build_holder_table,
    build_position_ledger,
)
from .mapper import (
    DEFAULT_ITERATION_CAP,
    DEFAULT_TOP_WINDOW,
    DEFAULT_UNKNOWN_THRESHOLD,
    MappingResult,
    run_iterative_mapping,
)
from .model import Address, HolderTable, Snapshot, TokenId


class EventIndex:
    """One-pass partition of an event stream for repeated lookups."""

    def __init__(self, events: Iterable[LedgerEvent]):
        self.transfers: dict[Address, list[LedgerEvent]] = defaultdict(list)
        self.positions: dict[Address, list[LedgerEvent]] = defaultdict(list)
        self.contract_addresses: set[Address] = set()
        for event in events:
            if event.kind is EventKind.TRANSFER:
                self.transfers[event.token].append(event)
            else:
                if event.contract is not None:
                    self.positions[event.contract].append(event)
                    self.contract_addresses.add(event.contract)

    def transfers_of(self, token: Address) -> Sequence[LedgerEvent]:
        return self.transfers.get(Address(token), ())

    def events_for_ledger(self, contract: Address, token: Address) -> list[LedgerEvent]:
        return list(
            heapq.merge(
                self.transfers_of(token),
                self.positions.get(Address(contract), ()),
                key=lambda e: e.sort_key,
            )
        )


def bytecode_addresses(index: EventIndex, labels: LabelRegistry, contracts: ContractRegistry) -> set[Address]:
    """Addresses known to carry bytecode: registered contracts, share
    tokens, and anything that emitted position events."""
    addrs = set(index.contract_addresses)
    addrs.update(contracts.entries)
    for entry in contracts.entries.values():
        if entry.share_token is not None:
            addrs.add(entry.share_token.address)
    return addrs


class SnapshotContext:
    """Lazily built tables and ledgers for one snapshot of one token."""

    def __init__(
        self,
        events: Sequence[LedgerEvent],
        labels: LabelRegistry,
        contracts: ContractRegistry,
        snapshot: Snapshot,
        *,
        index: EventIndex | None = None,
    ):
        self.events = events
        self.index = index if index is not None else EventIndex(events)
        self.labels = labels.with_bytecode(bytecode_addresses(self.index, labels, contracts))
        self.contracts = contracts
        self.snapshot = snapshot
        self._tables: dict[Address, HolderTable] = {}
        self._ledgers: dict[tuple[Address, Address], PositionLedger] = {}

    def holder_table(self, token: TokenId) -> HolderTable:
        key = token.address
        if key not in self._tables:
            self._tables[key] = build_holder_table(
                self.index.transfers_of(key), token, self.snapshot
            )
        return self._tables[key]

    def share_table(self, token_addr: Address) -> HolderTable | None:
        token_addr = Address(token_addr)
        if token_addr not in self._tables:
            token = self._resolve_token(token_addr)
            self._tables[token_addr] = build_holder_table(
                self.index.transfers_of(token_addr), token, self.snapshot
            )
        return self._tables[token_addr]

    def _resolve_token(self, token_addr: Address) -> TokenId:
        for entry in self.contracts.entries.values():
            share = entry.share_token
            if share is not None and share.address == token_addr:
                return share
        return TokenId(token_addr, symbol=token_addr[:10], decimals=18)

    def position_ledger(self, contract: Address, token_addr: Address) -> PositionLedger:
        key = (Address(contract), Address(token_addr))
        if key not in self._ledgers:
            self._ledgers[key] = build_position_ledger(
                self.index.events_for_ledger(*key), key[0], key[1], self.snapshot
            )
        return self._ledgers[key]

    def force_visits(self, token: TokenId) -> list[Address]:
        """Lending pools with outstanding debt in this token; they need a
        mapping visit even when fully lent out (zero live balance)."""
        forced = []
        for addr in self.contracts.of_kind(ContractKind.LENDING_POOL):
            ledger = self.position_ledger(addr, token.address)
            if ledger.debts_total() > 0:
                forced.append(addr)
        return forced


def map_snapshot(
    events: Sequence[LedgerEvent],
    labels: LabelRegistry,
    contracts: ContractRegistry,
    token: TokenId,
    snapshot: Snapshot,
    *,
    token_protocol: str | None = None,
    iteration_cap: int = DEFAULT_ITERATION_CAP,
    top_window: int = DEFAULT_TOP_WINDOW,
    unknown_threshold: Fraction = DEFAULT_UNKNOWN_THRESHOLD,
    context: SnapshotContext | None = None,
) -> MappingResult:
    """Full pipeline for one (token, snapshot): ingest, then unwrap."""
    ctx = context if context is not None else SnapshotContext(events, labels, contracts, snapshot)
    initial = ctx.holder_table(token)
    ledgers = {
        addr: ctx.position_ledger(addr, token.address)
        for addr in ctx.contracts.addresses()
    }
    return run_iterative_mapping(
        initial,
        ctx.labels,
        ctx.contracts,
        ledgers,
        ctx.share_table,
        instrument_ledgers=ctx.position_ledger,
        token_protocol=token_protocol,
        iteration_cap=iteration_cap,
        top_window=top_window,
        unknown_threshold=unknown_threshold,
        force_visit=ctx.force_visits(token),
    )
