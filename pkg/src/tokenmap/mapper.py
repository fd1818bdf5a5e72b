"""Iterative remapping of custodial holdings to beneficial owners.

The run works on one token's holder table. Each iteration ranks the
table, inspects the top rows, excludes what cannot be owned (burners,
CEX custody, vesting), and redistributes every mappable contract row to
the addresses that actually own the funds: share-token holders for
pools, receipt holders and borrowers for lending markets, stake and
reward books for staking contracts, explicit owner books for unique
contracts. Beneficiaries that are themselves contracts are unwound in
later iterations, so one wrapped position produces one adjustment per
custody layer.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum, unique
from fractions import Fraction
from typing import Callable, Iterable, Mapping

from .errors import (
    CycleDetected,
    EmptyPool,
    InsolventPool,
    IterationLimitExceeded,
    OverAllocated,
    UnresolvedMajorHolder,
)
from .ingest import (
    ContractEntry,
    ContractKind,
    ContractRegistry,
    LabelClass,
    LabelRegistry,
    PositionLedger,
    table_to_jsonable,
)
from .model import (
    Address,
    Adjustment,
    AdjustmentCategory,
    Amount,
    ExclusionReason,
    HolderTable,
    TokenId,
    fraction_to_str,
)

log = logging.getLogger(__name__)

DEFAULT_ITERATION_CAP = 50
DEFAULT_TOP_WINDOW = 1000
DEFAULT_UNKNOWN_THRESHOLD = Fraction(1, 1000)


@unique
class Category(Enum):
    INCLUDED_EOA = "included_eoa"
    MULTISIG = "multisig"
    BURNER = "burner"
    CEX = "cex"
    FTIA_VESTING = "ftia_vesting"
    LIQUIDITY_POOL = "liquidity_pool"
    LENDING_POOL = "lending_pool"
    STAKING = "staking"
    UNIQUE = "unique"
    EXCLUDED_CONTRACT = "excluded_contract"
    UNKNOWN_CONTRACT = "unknown_contract"


class Action(Enum):
    INCLUDE = "include"
    EXCLUDE = "exclude"
    MAP = "map"


@dataclass(frozen=True)
class Decision:
    action: Action
    reason: ExclusionReason | None = None


_KIND_TO_CATEGORY = {
    ContractKind.LIQUIDITY_POOL: Category.LIQUIDITY_POOL,
    ContractKind.LENDING_POOL: Category.LENDING_POOL,
    ContractKind.STAKING: Category.STAKING,
    ContractKind.UNIQUE: Category.UNIQUE,
    ContractKind.EXCLUDED_CONTRACT: Category.EXCLUDED_CONTRACT,
}

_LABEL_TO_CATEGORY = {
    LabelClass.EOA: Category.INCLUDED_EOA,
    LabelClass.BURNER: Category.BURNER,
    LabelClass.CEX: Category.CEX,
    LabelClass.FTIA_VESTING: Category.FTIA_VESTING,
    LabelClass.MULTISIG: Category.MULTISIG,
    LabelClass.CONTRACT: Category.UNKNOWN_CONTRACT,
}

_DECISION_TABLE = {
    Category.INCLUDED_EOA: Decision(Action.INCLUDE),
    Category.MULTISIG: Decision(Action.INCLUDE),
    Category.UNKNOWN_CONTRACT: Decision(Action.INCLUDE),
    Category.BURNER: Decision(Action.EXCLUDE, ExclusionReason.BURNER),
    Category.CEX: Decision(Action.EXCLUDE, ExclusionReason.CEX_CUSTODY),
    Category.FTIA_VESTING: Decision(Action.EXCLUDE, ExclusionReason.FTIA_VESTING),
    Category.EXCLUDED_CONTRACT: Decision(Action.EXCLUDE, ExclusionReason.UNMAPPABLE_CONTRACT),
    Category.LIQUIDITY_POOL: Decision(Action.MAP),
    Category.LENDING_POOL: Decision(Action.MAP),
    Category.STAKING: Decision(Action.MAP),
    Category.UNIQUE: Decision(Action.MAP),
}


def categorize(addr: Address, labels: LabelRegistry, contracts: ContractRegistry) -> Category:
    """Resolve an address to its category; the contract registry wins."""
    entry = contracts.get(addr)
    if entry is not None:
        return _KIND_TO_CATEGORY[entry.kind]
    return _LABEL_TO_CATEGORY[labels.class_of(addr)]


def inclusion_decision(cat: Category) -> Decision:
    return _DECISION_TABLE[cat]


def contract_adjustment_category(entry: ContractEntry, token_protocol: str | None) -> AdjustmentCategory:
    """Adjustment category for funds remapped out of a registered contract.

    Staking splits on protocol identity; a `category` entry in params
    overrides the kind default (used for 1:1 wrappers and baskets that
    are mapped like pools but reported as "other").
    """
    override = entry.params.get("category")
    if override:
        return AdjustmentCategory(override)
    if entry.kind is ContractKind.STAKING:
        if token_protocol is not None and entry.protocol == token_protocol:
            return AdjustmentCategory.INTERNAL_STAKING
        return AdjustmentCategory.EXTERNAL_STAKING
    if entry.kind is ContractKind.LIQUIDITY_POOL:
        return AdjustmentCategory.AMM_LIQUIDITY
    if entry.kind is ContractKind.LENDING_POOL:
        return AdjustmentCategory.LENDING_BORROWING
    return AdjustmentCategory.OTHER


def classify_adjustment(
    adj: Adjustment, contracts: ContractRegistry, token_protocol: str | None
) -> AdjustmentCategory:
    entry = contracts.get(adj.source)
    if entry is None:
        raise ValueError(f"adjustment source {adj.source} is not a registered contract")
    return contract_adjustment_category(entry, token_protocol)


class _Ctx:
    """Mutable state shared by the distribution primitives."""

    def __init__(self, table: HolderTable):
        self.table = table
        self.token = table.token
        self.adjustments: list[Adjustment] = []
        self.new_exclusions: dict[tuple[Address, ExclusionReason], Fraction] = {}
        self.audit: list[str] = []

    def exclude(self, addr: Address, amount: Amount, reason: ExclusionReason) -> None:
        amount = Fraction(amount)
        if amount == 0:
            return
        self.table.record_exclusion(addr, amount, reason)
        key = (Address(addr), reason)
        self.new_exclusions[key] = self.new_exclusions.get(key, Fraction(0)) + amount

    def credit(
        self,
        source: Address,
        beneficiary: Address,
        amount: Fraction,
        category: AdjustmentCategory,
        depth: int,
        instrument: Address | None = None,
    ) -> None:
        if amount == 0:
            return
        if beneficiary == source:
            # funds mapped onto themselves are unrecoverable: treat as burned
            self.exclude(source, amount, ExclusionReason.SELF_MAPPED_BURN)
            return
        self.table.add(beneficiary, amount)
        self.adjustments.append(
            Adjustment(
                token=self.token,
                source=source,
                beneficiary=beneficiary,
                amount=amount,
                category=category,
                depth=depth,
            )
        )
        self.on_credit(source, beneficiary, amount, instrument)

    def on_credit(
        self, source: Address, beneficiary: Address, amount: Fraction, instrument: Address | None
    ) -> None:
        """Hook for the iterative run (channel and cycle tracking)."""


def _distribute_pool_shares(
    ctx: _Ctx,
    source: Address,
    amount: Fraction,
    share_holders: HolderTable | None,
    category: AdjustmentCategory,
    depth: int,
    *,
    strict: bool,
) -> None:
    """Split `amount` pro-rata over a share-token holder table.

    Shares held by the source contract itself are burned: their pro-rata
    slice is excluded as self-mapped and never reaches a beneficiary.
    """
    if amount == 0:
        return
    supply = share_holders.total() if share_holders is not None else Fraction(0)
    if supply <= 0:
        if strict:
            raise EmptyPool(f"{source} holds {fraction_to_str(amount)} but its share token has no supply")
        ctx.audit.append(
            f"empty share supply for {source}: {fraction_to_str(amount)} marked unmappable"
        )
        ctx.exclude(source, amount, ExclusionReason.UNMAPPABLE_CONTRACT)
        return
    instrument = share_holders.token.address
    for holder, bal in share_holders.ranked():
        part = amount * bal / supply
        ctx.credit(source, holder, part, category, depth, instrument=instrument)


def _distribute_lending(
    ctx: _Ctx,
    pool: Address,
    entry: Fraction,
    receipt_holders: HolderTable | None,
    debts: Mapping[Address, Fraction],
    category: AdjustmentCategory,
    depth: int,
    *,
    strict: bool,
) -> None:
    total_debt = sum(debts.values(), Fraction(0))
    deposits_total = entry + total_debt
    if deposits_total < total_debt:
        raise InsolventPool(
            f"lending pool {pool}: outstanding debt {fraction_to_str(total_debt)} "
            f"exceeds deposits {fraction_to_str(deposits_total)}"
        )
    _distribute_pool_shares(ctx, pool, deposits_total, receipt_holders, category, depth, strict=strict)
    for borrower in sorted(debts):
        debt = debts[borrower]
        ctx.credit(pool, borrower, -debt, category, depth)


def _distribute_staking_books(
    ctx: _Ctx,
    contract: Address,
    raw: Fraction,
    stakes: Mapping[Address, Fraction],
    accrued: Mapping[Address, Fraction],
    category: AdjustmentCategory,
    depth: int,
) -> None:
    """Pay out stake + accrued reward books; the remainder is future rewards."""
    owed = sum(stakes.values(), Fraction(0)) + sum(accrued.values(), Fraction(0))
    if raw < owed:
        raise InsolventPool(
            f"staking contract {contract}: positions {fraction_to_str(owed)} "
            f"exceed holdings {fraction_to_str(raw)}"
        )
    for owner in sorted(set(stakes) | set(accrued)):
        amount = stakes.get(owner, Fraction(0)) + accrued.get(owner, Fraction(0))
        ctx.credit(contract, owner, amount, category, depth)
    reserve = raw - owed
    if reserve > 0:
        ctx.exclude(contract, reserve, ExclusionReason.FUTURE_REWARDS)


def _distribute_book_prorata(
    ctx: _Ctx,
    contract: Address,
    amount: Fraction,
    book: Mapping[Address, Fraction],
    category: AdjustmentCategory,
    depth: int,
    instrument: Address | None,
) -> None:
    """Split a channeled credit over an ownership book, preserving shares."""
    if amount == 0:
        return
    total = sum(book.values(), Fraction(0))
    if total <= 0:
        ctx.audit.append(
            f"no ownership book for {fraction_to_str(amount)} routed through {contract}; marked unmappable"
        )
        ctx.exclude(contract, amount, ExclusionReason.UNMAPPABLE_CONTRACT)
        return
    for owner in sorted(book):
        ctx.credit(contract, owner, amount * book[owner] / total, category, depth, instrument=instrument)


def _distribute_unique(
    ctx: _Ctx,
    contract: Address,
    raw: Fraction,
    owners: Mapping[Address, Fraction],
    category: AdjustmentCategory,
    depth: int,
) -> None:
    total_owned = sum(owners.values(), Fraction(0))
    if total_owned > raw:
        raise OverAllocated(
            f"unique contract {contract}: explicit owners claim {fraction_to_str(total_owned)} "
            f"of {fraction_to_str(raw)}"
        )
    for owner in sorted(owners):
        ctx.credit(contract, owner, owners[owner], category, depth)
    remainder = raw - total_owned
    if remainder > 0:
        ctx.exclude(contract, remainder, ExclusionReason.UNMAPPABLE_CONTRACT)


def map_liquidity_pool(
    pool: Address,
    table: HolderTable,
    share_holders: HolderTable,
    *,
    category: AdjustmentCategory = AdjustmentCategory.AMM_LIQUIDITY,
    depth: int = 1,
    strict: bool = True,
) -> tuple[list[Adjustment], HolderTable]:
    """Remap a pool's holding pro-rata over its liquidity-pool token holders."""
    work = table.copy()
    ctx = _Ctx(work)
    amount = work.remove(Address(pool))
    _distribute_pool_shares(ctx, Address(pool), amount, share_holders, category, depth, strict=strict)
    return ctx.adjustments, work


def map_lending_pool(
    pool: Address,
    table: HolderTable,
    receipt_holders: HolderTable,
    ledger: PositionLedger,
    *,
    category: AdjustmentCategory = AdjustmentCategory.LENDING_BORROWING,
    depth: int = 1,
    strict: bool = True,
) -> tuple[list[Adjustment], HolderTable]:
    """Remap deposits to receipt holders and debts to borrowers (signed)."""
    work = table.copy()
    ctx = _Ctx(work)
    entry = work.remove(Address(pool))
    _distribute_lending(
        ctx, Address(pool), entry, receipt_holders, ledger.debts, category, depth, strict=strict
    )
    return ctx.adjustments, work


def map_staking(
    contract: Address,
    table: HolderTable,
    ledger: PositionLedger,
    *,
    category: AdjustmentCategory = AdjustmentCategory.INTERNAL_STAKING,
    depth: int = 1,
) -> tuple[list[Adjustment], HolderTable]:
    """Credit each staker their stake plus accrued rewards.

    Whatever the contract holds beyond recorded positions is the pot of
    future rewards, which cannot be attributed and is excluded.
    """
    work = table.copy()
    ctx = _Ctx(work)
    entry = work.remove(Address(contract))
    _distribute_staking_books(
        ctx, Address(contract), entry, ledger.stakes, ledger.accrued_rewards, category, depth
    )
    return ctx.adjustments, work


def map_unique(
    contract: Address,
    table: HolderTable,
    explicit_owners: Mapping[Address, Amount],
    *,
    category: AdjustmentCategory = AdjustmentCategory.OTHER,
    depth: int = 1,
) -> tuple[list[Adjustment], HolderTable]:
    """Remap per an explicit owner book; the unclaimed remainder is unmappable."""
    work = table.copy()
    ctx = _Ctx(work)
    entry = work.remove(Address(contract))
    owners = {Address(a): Fraction(v) for a, v in explicit_owners.items()}
    _distribute_unique(ctx, Address(contract), entry, owners, category, depth)
    return ctx.adjustments, work


@dataclass(frozen=True)
class MappingResult:
    table: HolderTable
    adjustments: tuple[Adjustment, ...]
    exclusions: Mapping[tuple[Address, ExclusionReason], Fraction]
    iterations: int
    audit: tuple[str, ...] = ()

    def exclusion_records(self) -> list[tuple[Address, Fraction, ExclusionReason]]:
        return [
            (addr, self.exclusions[(addr, reason)], reason)
            for addr, reason in sorted(self.exclusions, key=lambda k: (k[0], k[1].value))
        ]

    def excluded_addresses(self) -> frozenset[Address]:
        return frozenset(addr for addr, _ in self.exclusions)

    def max_depth(self) -> int:
        return max((adj.depth for adj in self.adjustments), default=0)

    def to_jsonable(self) -> dict[str, object]:
        return {
            "table": table_to_jsonable(self.table),
            "adjustments": [
                {
                    "source": adj.source,
                    "beneficiary": adj.beneficiary,
                    "amount": fraction_to_str(adj.amount),
                    "category": adj.category.value,
                    "depth": adj.depth,
                }
                for adj in self.adjustments
            ],
            "exclusions": [
                {"address": addr, "amount": fraction_to_str(amount), "reason": reason.value}
                for addr, amount, reason in self.exclusion_records()
            ],
            "iterations": self.iterations,
            "audit": list(self.audit),
        }


def mapping_result_from_jsonable(obj: Mapping[str, object]) -> MappingResult:
    from .ingest import table_from_jsonable

    table = table_from_jsonable(obj["table"])
    adjustments = tuple(
        Adjustment(
            token=table.token,
            source=Address(item["source"]),
            beneficiary=Address(item["beneficiary"]),
            amount=Fraction(item["amount"]),
            category=AdjustmentCategory(item["category"]),
            depth=int(item["depth"]),
        )
        for item in obj.get("adjustments", [])
    )
    exclusions: dict[tuple[Address, ExclusionReason], Fraction] = {}
    for item in obj.get("exclusions", []):
        key = (Address(item["address"]), ExclusionReason(item["reason"]))
        exclusions[key] = exclusions.get(key, Fraction(0)) + Fraction(item["amount"])
    return MappingResult(
        table=table,
        adjustments=adjustments,
        exclusions=exclusions,
        iterations=int(obj.get("iterations", 0)),
        audit=tuple(obj.get("audit", [])),
    )


ShareTableProvider = Callable[[Address], HolderTable | None]
InstrumentLedgerProvider = Callable[[Address, Address], PositionLedger | None]


class _RunCtx(_Ctx):
    """Distribution context that also tracks credit channels and the
    contract dependency graph used for cycle detection."""

    def __init__(self, table: HolderTable, run: "_MappingRun"):
        super().__init__(table)
        self.run = run

    def on_credit(
        self, source: Address, beneficiary: Address, amount: Fraction, instrument: Address | None
    ) -> None:
        run = self.run
        entry = run.contracts.get(beneficiary)
        if entry is None or entry.kind not in _MAPPABLE:
            return
        if instrument is not None and instrument != self.token.address:
            channels = run.via.setdefault(beneficiary, {})
            channels[instrument] = channels.get(instrument, Fraction(0)) + amount
        run.register_edge(source, beneficiary)


_MAPPABLE = frozenset(
    {
        ContractKind.LIQUIDITY_POOL,
        ContractKind.LENDING_POOL,
        ContractKind.STAKING,
        ContractKind.UNIQUE,
    }
)


class _MappingRun:
    def __init__(
        self,
        initial: HolderTable,
        labels: LabelRegistry,
        contracts: ContractRegistry,
        ledgers: Mapping[Address, PositionLedger],
        share_tables: ShareTableProvider,
        instrument_ledgers: InstrumentLedgerProvider | None,
        token_protocol: str | None,
        iteration_cap: int,
        top_window: int,
        unknown_threshold: Fraction,
        force_visit: Iterable[Address],
    ):
        self.initial_total = initial.total()
        self.labels = labels
        self.contracts = contracts
        self.ledgers = {Address(a): l for a, l in ledgers.items()}
        self.share_tables = share_tables
        self.instrument_ledgers = instrument_ledgers
        self.token_protocol = token_protocol
        self.iteration_cap = iteration_cap
        self.top_window = top_window
        self.unknown_threshold = unknown_threshold
        self.token = initial.token
        self.ctx = _RunCtx(initial.copy(), self)
        self.via: dict[Address, dict[Address, Fraction]] = {}
        self.edges: dict[Address, set[Address]] = {}
        # lending pools with outstanding debt can sit at zero balance
        # (fully lent out) and still need their one unwinding visit
        self.forced_pending: list[Address] = sorted(
            a
            for a in {Address(x) for x in force_visit}
            if (e := contracts.get(a)) is not None and e.kind is ContractKind.LENDING_POOL
        )
        self.books_consumed: set[Address] = set()
        self.debts_consumed: set[Address] = set()
        self.deferred_last: list[Address] = []

    # -- ledger access -------------------------------------------------

    def ledger_for(self, addr: Address) -> PositionLedger | None:
        ledger = self.ledgers.get(addr)
        if ledger is None and self.instrument_ledgers is not None:
            ledger = self.instrument_ledgers(addr, self.token.address)
        return ledger

    def channel_book(self, addr: Address, instrument: Address, kind: ContractKind) -> Mapping[Address, Fraction] | None:
        if self.instrument_ledgers is None:
            return None
        ledger = self.instrument_ledgers(addr, instrument)
        if ledger is None:
            return None
        return ledger.deposits if kind is ContractKind.UNIQUE else ledger.stakes

    # -- cycle detection ------------------------------------------------

    def register_edge(self, src: Address, dst: Address) -> None:
        peers = self.edges.setdefault(src, set())
        if dst in peers:
            return
        peers.add(dst)
        # a cycle exists if dst can already reach src
        stack: list[tuple[Address, tuple[Address, ...]]] = [(dst, (dst,))]
        seen = {dst}
        while stack:
            node, path = stack.pop()
            if node == src:
                raise CycleDetected((src,) + path)
            for nxt in sorted(self.edges.get(node, ())):
                if nxt not in seen:
                    seen.add(nxt)
                    stack.append((nxt, path + (nxt,)))

    # -- per-contract dispatch -------------------------------------------

    def map_contract(self, addr: Address, entry: ContractEntry, depth: int) -> bool:
        """Distribute one contract row. Returns False when deferred."""
        ctx = self.ctx
        category = contract_adjustment_category(entry, self.token_protocol)
        kind = entry.kind
        if kind in (ContractKind.LIQUIDITY_POOL, ContractKind.LENDING_POOL):
            amount = ctx.table.remove(addr)
            self.via.pop(addr, None)
            share = entry.share_token
            share_table = self.share_tables(share.address) if share is not None else None
            if kind is ContractKind.LIQUIDITY_POOL:
                _distribute_pool_shares(ctx, addr, amount, share_table, category, depth, strict=False)
            else:
                if addr in self.debts_consumed:
                    debts: Mapping[Address, Fraction] = {}
                else:
                    ledger = self.ledger_for(addr)
                    debts = ledger.debts if ledger is not None else {}
                    self.debts_consumed.add(addr)
                _distribute_lending(ctx, addr, amount, share_table, debts, category, depth, strict=False)
            return True

        # staking and unique contracts: split the live entry into the
        # portion backed by this token's own books and the portions that
        # arrived through share instruments, each with its own book
        channels = self.via.pop(addr, {})
        entry_amount = ctx.table.balance(addr)
        channel_total = sum(channels.values(), Fraction(0))
        raw = entry_amount - channel_total
        ledger = self.ledger_for(addr)
        if kind is ContractKind.STAKING:
            stakes = ledger.stakes if ledger is not None else {}
            accrued = ledger.accrued_rewards if ledger is not None else {}
            owed = sum(stakes.values(), Fraction(0)) + sum(accrued.values(), Fraction(0))
            if addr not in self.books_consumed and raw < owed:
                # claims may still be in flight through other contracts;
                # leave the row for a later iteration
                if channels:
                    self.via[addr] = channels
                self.deferred_last.append(addr)
                return False
            ctx.table.remove(addr)
            if addr in self.books_consumed:
                _distribute_book_prorata(ctx, addr, raw, stakes, category, depth, instrument=None)
            else:
                _distribute_staking_books(ctx, addr, raw, stakes, accrued, category, depth)
                self.books_consumed.add(addr)
        else:  # UNIQUE
            owners = ledger.deposits if ledger is not None else {}
            owed = sum(owners.values(), Fraction(0))
            if addr not in self.books_consumed and raw < owed:
                if channels:
                    self.via[addr] = channels
                self.deferred_last.append(addr)
                return False
            ctx.table.remove(addr)
            if addr in self.books_consumed:
                _distribute_book_prorata(ctx, addr, raw, owners, category, depth, instrument=None)
            else:
                _distribute_unique(ctx, addr, raw, owners, category, depth)
                self.books_consumed.add(addr)
        for instrument in sorted(channels):
            book = self.channel_book(addr, instrument, kind)
            _distribute_book_prorata(
                ctx, addr, channels[instrument], book or {}, category, depth, instrument=instrument
            )
        return True

    # -- main loop -------------------------------------------------------

    def iterate(self, depth: int) -> bool:
        ctx = self.ctx
        ranked = ctx.table.ranked()
        candidates = [addr for addr, _ in ranked[: self.top_window]]
        # registered mappable contracts below the window are still unwound;
        # unknown or excludable dust beyond the window is left untouched
        for addr, _ in ranked[self.top_window :]:
            if inclusion_decision(categorize(addr, self.labels, self.contracts)).action is Action.MAP:
                candidates.append(addr)
        for addr in self.forced_pending:
            if addr not in ctx.table.entries:
                candidates.append(addr)
        self.forced_pending = []
        self.deferred_last = []

        progress = False
        for addr in candidates:
            in_table = addr in ctx.table.entries
            cat = categorize(addr, self.labels, self.contracts)
            entry = self.contracts.get(addr)
            if not in_table and not (entry is not None and entry.kind is ContractKind.LENDING_POOL):
                continue
            decision = inclusion_decision(cat)
            if decision.action is Action.EXCLUDE:
                reason = decision.reason
                if cat is Category.EXCLUDED_CONTRACT and entry is not None:
                    declared = entry.params.get("reason")
                    if declared:
                        reason = ExclusionReason(declared)
                amount = ctx.table.remove(addr)
                self.via.pop(addr, None)
                ctx.exclude(addr, amount, reason)
                progress = True
            elif decision.action is Action.MAP:
                if self.map_contract(addr, entry, depth):
                    progress = True
        return progress

    def finalize(self, iterations: int) -> MappingResult:
        ctx = self.ctx
        if self.deferred_last:
            raise InsolventPool(
                "unfunded positions remain on: " + ", ".join(sorted(self.deferred_last))
            )
        relevant = ctx.table.total()
        if relevant > 0:
            for addr, amount in ctx.table.ranked():
                if amount <= 0:
                    break
                cat = categorize(addr, self.labels, self.contracts)
                share = amount / relevant
                if cat is Category.UNKNOWN_CONTRACT and share > self.unknown_threshold:
                    raise UnresolvedMajorHolder(addr, float(share))
        new_total = sum(ctx.new_exclusions.values(), Fraction(0))
        if ctx.table.total() + new_total != self.initial_total:
            raise AssertionError(
                "conservation violated: "
                f"{fraction_to_str(ctx.table.total())} + {fraction_to_str(new_total)} "
                f"!= {fraction_to_str(self.initial_total)}"
            )
        adjustments = tuple(
            sorted(ctx.adjustments, key=lambda a: (a.depth, a.source, a.beneficiary, a.amount))
        )
        return MappingResult(
            table=ctx.table,
            adjustments=adjustments,
            exclusions=dict(ctx.new_exclusions),
            iterations=iterations,
            audit=tuple(ctx.audit),
        )

    def run(self) -> MappingResult:
        iterations = 0
        while True:
            iterations += 1
            progress = self.iterate(iterations)
            if not progress:
                break
            if iterations >= self.iteration_cap:
                raise IterationLimitExceeded(
                    f"mapping did not converge within {self.iteration_cap} iterations"
                )
        return self.finalize(iterations)


def run_iterative_mapping(
    initial: HolderTable,
    labels: LabelRegistry,
    contracts: ContractRegistry,
    ledgers: Mapping[Address, PositionLedger],
    share_tables: ShareTableProvider | Mapping[Address, HolderTable],
    *,
    instrument_ledgers: InstrumentLedgerProvider | None = None,
    token_protocol: str | None = None,
    iteration_cap: int = DEFAULT_ITERATION_CAP,
    top_window: int = DEFAULT_TOP_WINDOW,
    unknown_threshold: Fraction = DEFAULT_UNKNOWN_THRESHOLD,
    force_visit: Iterable[Address] = (),
) -> MappingResult:
    """Run the iterative mapping process on one holder table.

    Iterates until an inspection pass changes nothing, then asserts that
    no unidentified contract above the coverage threshold remains.
    `force_visit` names lending pools that must be unwound even when
    they hold no live balance (callers derive it from ingestion state;
    a table that is already mapped is rerun without it).
    """
    if isinstance(share_tables, Mapping):
        by_addr = {Address(a): t for a, t in share_tables.items()}
        provider: ShareTableProvider = lambda addr: by_addr.get(addr)
    else:
        provider = share_tables
    run = _MappingRun(
        initial=initial,
        labels=labels,
        contracts=contracts,
        ledgers=ledgers,
        share_tables=provider,
        instrument_ledgers=instrument_ledgers,
        token_protocol=token_protocol,
        iteration_cap=iteration_cap,
        top_window=top_window,
        unknown_threshold=unknown_threshold,
        force_visit=force_visit,
    )
    return run.run()
