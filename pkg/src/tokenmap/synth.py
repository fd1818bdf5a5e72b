"""Synthetic token ecosystems with constructively known ownership.

The generator builds event histories step by step while maintaining the
defining books (balances, shares, stakes, debts, reward accruals) in
plain dictionaries. Ground truth is derived from those books by the
ownership definitions themselves, never by parsing the emitted events,
so it serves as an independent oracle for the mapping engine.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .ingest import (
    ContractEntry,
    ContractKind,
    ContractRegistry,
    EventKind,
    LabelClass,
    LabelEntry,
    LabelRegistry,
    LedgerEvent,
    event_to_json,
)
from .model import (
    Address,
    AdjustmentCategory,
    ExclusionReason,
    Snapshot,
    TokenId,
    ZERO_ADDRESS,
    fraction_to_str,
)

SNAPSHOT_DATE = "2020-09-15"

_DEFAULT_POOL_MIX = {
    "liquidity_pool": 0.35,
    "lending_pool": 0.25,
    "staking": 0.25,
    "wrapper": 0.15,
}
_DEFAULT_EXCLUSION_MIX = {"cex": 0.5, "burner": 0.25, "ftia": 0.25}

_POOL_KINDS = ("liquidity_pool", "lending_pool", "staking", "wrapper", "unique")
_EXCLUSION_KINDS = ("cex", "burner", "ftia")

# beyond this many holders, excludable actors could fall outside the
# mapper's inspection window; large scenarios stay exclusion-free
WINDOW_SAFE_EOAS = 700


@dataclass(frozen=True)
class ScenarioSpec:
    seed: int
    n_eoas: int = 50
    n_tokens: int = 1
    max_depth: int = 2
    pool_mix: Mapping[str, float] = field(default_factory=lambda: dict(_DEFAULT_POOL_MIX))
    exclusion_mix: Mapping[str, float] = field(default_factory=lambda: dict(_DEFAULT_EXCLUSION_MIX))

    def __post_init__(self):
        if self.n_eoas < 1 or self.n_tokens < 1 or self.max_depth < 0:
            raise ValueError("n_eoas, n_tokens >= 1 and max_depth >= 0 required")
        for mix, allowed in ((self.pool_mix, _POOL_KINDS), (self.exclusion_mix, _EXCLUSION_KINDS)):
            unknown = set(mix) - set(allowed)
            if unknown:
                raise ValueError(f"unknown mix keys: {sorted(unknown)}")
            if not math.isclose(sum(mix.values()), 1.0, abs_tol=1e-9):
                raise ValueError("mix probabilities must sum to 1")


@dataclass
class GroundTruth:
    token: TokenId
    ownership: dict[Address, Fraction]
    exclusions: dict[Address, Fraction]
    exclusion_reasons: dict[Address, ExclusionReason]
    expected_adjustments: dict[AdjustmentCategory, Fraction]
    relevant_adjustments: dict[AdjustmentCategory, Fraction]
    minted: int
    burned: int

    def relevant_supply(self) -> Fraction:
        return sum(self.ownership.values(), Fraction(0))


@dataclass
class Scenario:
    name: str
    tokens: list[TokenId]
    token_protocols: dict[Address, str]
    snapshot: Snapshot
    events: list[LedgerEvent]
    labels: LabelRegistry
    contracts: ContractRegistry
    truth: dict[Address, GroundTruth]
    checkpoints: list[int] = field(default_factory=list)

    def write(self, outdir: str | Path) -> dict[str, Path]:
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        paths = {
            "events": outdir / "events.jsonl",
            "labels": outdir / "labels.json",
            "contracts": outdir / "contracts.json",
            "truth": outdir / "truth.json",
            "config": outdir / "config.json",
        }
        with open(paths["events"], "w", encoding="utf-8") as handle:
            for event in self.events:
                handle.write(event_to_json(event) + "\n")
        paths["labels"].write_text(
            json.dumps(self.labels.to_jsonable(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        paths["contracts"].write_text(
            json.dumps(self.contracts.to_jsonable(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        truth_obj = {
            addr: {
                "ownership": {a: fraction_to_str(v) for a, v in sorted(gt.ownership.items())},
                "exclusions": [
                    {
                        "address": a,
                        "amount": fraction_to_str(gt.exclusions[a]),
                        "reason": gt.exclusion_reasons[a].value,
                    }
                    for a in sorted(gt.exclusions)
                ],
                "expected_adjustments": {
                    cat.value: fraction_to_str(v) for cat, v in sorted(
                        gt.expected_adjustments.items(), key=lambda kv: kv[0].value
                    )
                },
                "minted": gt.minted,
                "burned": gt.burned,
            }
            for addr, gt in sorted(self.truth.items())
        }
        paths["truth"].write_text(
            json.dumps(truth_obj, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        config_obj = {
            "tokens": [
                {
                    "address": token.address,
                    "symbol": token.symbol,
                    "decimals": token.decimals,
                    "protocol": self.token_protocols[token.address],
                }
                for token in self.tokens
            ],
            "snapshots": [{"block": self.snapshot.block, "date": self.snapshot.date.isoformat()}],
            "events": "events.jsonl",
            "labels": "labels.json",
            "contracts": "contracts.json",
            "out_dir": "out",
        }
        paths["config"].write_text(
            json.dumps(config_obj, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        return paths


def _addr(prefix: str, n: int) -> Address:
    return Address("0x" + prefix + format(n, "x").rjust(40 - len(prefix), "0"))


@dataclass
class _ContractBook:
    addr: Address
    kind: ContractKind
    protocol: str
    share_token: TokenId | None = None
    params: dict[str, str] = field(default_factory=dict)
    stakes: dict[Address, dict[Address, int]] = field(default_factory=dict)
    debts: dict[Address, dict[Address, int]] = field(default_factory=dict)
    accrued: dict[Address, dict[Address, int]] = field(default_factory=dict)
    deposits: dict[Address, dict[Address, int]] = field(default_factory=dict)

    def book(self, table: str, token: Address) -> dict[Address, int]:
        return getattr(self, table).setdefault(token, {})


_ACTOR_REASON = {
    LabelClass.BURNER: ExclusionReason.BURNER,
    LabelClass.CEX: ExclusionReason.CEX_CUSTODY,
    LabelClass.FTIA_VESTING: ExclusionReason.FTIA_VESTING,
}

_EVENTS_PER_BLOCK = 3


class _Builder:
    """Emits events while maintaining the defining books in lockstep."""

    def __init__(self, rng: random.Random):
        self.rng = rng
        self.events: list[LedgerEvent] = []
        self.balances: dict[Address, dict[Address, int]] = {}
        self.minted: dict[Address, int] = {}
        self.burned: dict[Address, int] = {}
        self.tokens: list[TokenId] = []
        self.token_protocols: dict[Address, str] = {}
        self.labels: dict[Address, LabelEntry] = {}
        self.books: dict[Address, _ContractBook] = {}
        self.contract_order: list[Address] = []
        self.checkpoints: list[int] = []
        self._seq = 0
        self._eoa_n = 0
        self._excl_n = 0
        self._contract_n = 0
        self._share_n = 0
        self._token_n = 0
        self._misc_n = 0

    # -- identity ---------------------------------------------------------

    def new_eoa(self) -> Address:
        self._eoa_n += 1
        return _addr("aa", self._eoa_n)

    def new_excluded(self, kind: str) -> Address:
        self._excl_n += 1
        addr = _addr("bb", self._excl_n)
        cls = {"cex": LabelClass.CEX, "burner": LabelClass.BURNER, "ftia": LabelClass.FTIA_VESTING}[kind]
        self.labels[addr] = LabelEntry(cls=cls)
        return addr

    def new_multisig(self) -> Address:
        self._misc_n += 1
        addr = _addr("99", self._misc_n)
        self.labels[addr] = LabelEntry(cls=LabelClass.MULTISIG)
        return addr

    def new_unknown_contract(self) -> Address:
        self._misc_n += 1
        addr = _addr("ff", self._misc_n)
        self.labels[addr] = LabelEntry(cls=LabelClass.CONTRACT)
        return addr

    def new_token(self, symbol: str, decimals: int, protocol: str) -> TokenId:
        self._token_n += 1
        token = TokenId(_addr("ee", self._token_n), symbol=symbol, decimals=decimals)
        self.tokens.append(token)
        self.token_protocols[token.address] = protocol
        return token

    def new_share_token(self, symbol: str) -> TokenId:
        self._share_n += 1
        return TokenId(_addr("dd", self._share_n), symbol=symbol, decimals=18)

    def new_contract(
        self,
        kind: ContractKind,
        protocol: str,
        share_token: TokenId | None = None,
        params: Mapping[str, str] | None = None,
    ) -> Address:
        self._contract_n += 1
        addr = _addr("cc", self._contract_n)
        self.books[addr] = _ContractBook(
            addr=addr,
            kind=kind,
            protocol=protocol,
            share_token=share_token,
            params=dict(params or {}),
        )
        self.contract_order.append(addr)
        return addr

    # -- emission ----------------------------------------------------------

    def _pos(self) -> tuple[int, int]:
        block = 1 + self._seq // _EVENTS_PER_BLOCK
        log_index = self._seq % _EVENTS_PER_BLOCK
        self._seq += 1
        return block, log_index

    def checkpoint(self) -> None:
        """Close the current block so a snapshot here is prefix-exact."""
        if self._seq % _EVENTS_PER_BLOCK:
            self._seq += _EVENTS_PER_BLOCK - self._seq % _EVENTS_PER_BLOCK
        self.checkpoints.append(self._seq // _EVENTS_PER_BLOCK)

    def last_block(self) -> int:
        return 1 + max(0, self._seq - 1) // _EVENTS_PER_BLOCK

    def emit(self, kind: EventKind, token: Address, amount: int, **fields) -> None:
        block, log_index = self._pos()
        self.events.append(
            LedgerEvent(kind=kind, token=token, block=block, log_index=log_index, amount=amount, **fields)
        )

    def balance(self, token: Address, addr: Address) -> int:
        return self.balances.get(token, {}).get(addr, 0)

    def transfer(self, token: Address, src: Address, dst: Address, amount: int) -> None:
        if amount <= 0:
            return
        book = self.balances.setdefault(token, {})
        if src == ZERO_ADDRESS:
            self.minted[token] = self.minted.get(token, 0) + amount
        else:
            have = book.get(src, 0)
            if amount > have:
                raise AssertionError(f"builder bug: {src} holds {have}, sending {amount}")
            book[src] = have - amount
        if dst == ZERO_ADDRESS:
            self.burned[token] = self.burned.get(token, 0) + amount
        else:
            book[dst] = book.get(dst, 0) + amount
        self.emit(EventKind.TRANSFER, token, amount, src=src, dst=dst)

    def mint(self, token: TokenId, dst: Address, amount: int) -> None:
        self.transfer(token.address, ZERO_ADDRESS, dst, amount)

    def burn(self, token: TokenId, src: Address, amount: int) -> None:
        self.transfer(token.address, src, ZERO_ADDRESS, amount)

    def pool_deposit(self, pool: Address, instrument: Address, owner: Address, amount: int) -> None:
        """Deposit into a share-issuing pool; shares are minted 1:1."""
        share = self.books[pool].share_token
        self.transfer(instrument, owner, pool, amount)
        self.transfer(share.address, ZERO_ADDRESS, owner, amount)

    def borrow(self, pool: Address, token: Address, borrower: Address, amount: int) -> None:
        self.transfer(token, pool, borrower, amount)
        self.emit(EventKind.BORROW, token, amount, contract=pool, owner=borrower)
        book = self.books[pool].book("debts", token)
        book[borrower] = book.get(borrower, 0) + amount

    def repay(self, pool: Address, token: Address, borrower: Address, amount: int) -> None:
        self.transfer(token, borrower, pool, amount)
        self.emit(EventKind.REPAY, token, amount, contract=pool, owner=borrower)
        book = self.books[pool].book("debts", token)
        book[borrower] = book.get(borrower, 0) - amount

    def stake(self, contract: Address, instrument: Address, owner: Address, amount: int) -> None:
        self.transfer(instrument, owner, contract, amount)
        self.emit(EventKind.STAKE, instrument, amount, contract=contract, owner=owner)
        book = self.books[contract].book("stakes", instrument)
        book[owner] = book.get(owner, 0) + amount

    def accrue_reward(self, contract: Address, token: Address, owner: Address, amount: int) -> None:
        self.emit(EventKind.REWARD_ACCRUED, token, amount, contract=contract, owner=owner)
        book = self.books[contract].book("accrued", token)
        book[owner] = book.get(owner, 0) + amount

    def deposit_unique(self, contract: Address, instrument: Address, owner: Address, amount: int) -> None:
        self.transfer(instrument, owner, contract, amount)
        self.emit(EventKind.DEPOSIT, instrument, amount, contract=contract, owner=owner)
        book = self.books[contract].book("deposits", instrument)
        book[owner] = book.get(owner, 0) + amount

    def migrate(self, contract: Address, old_share: TokenId, new_share: TokenId, new_amount: int) -> None:
        """Swap the contract's staked share position to a new share token."""
        held = self.balance(old_share.address, contract)
        self.transfer(old_share.address, contract, ZERO_ADDRESS, held)
        self.transfer(new_share.address, ZERO_ADDRESS, contract, new_amount)
        self.emit(
            EventKind.MIGRATE, new_share.address, new_amount, contract=contract, src=old_share.address
        )
        book = self.books[contract]
        old = book.book("stakes", old_share.address)
        total = sum(old.values())
        if total:
            # builder fixtures migrate full positions at integral ratios
            if new_amount % total:
                raise AssertionError("builder migrations must preserve integral stakes")
            ratio = new_amount // total
            new = book.book("stakes", new_share.address)
            for owner in sorted(old):
                new[owner] = new.get(owner, 0) + old[owner] * ratio
        book.stakes.pop(old_share.address, None)

    # -- registry assembly -------------------------------------------------

    def label_registry(self) -> LabelRegistry:
        return LabelRegistry(dict(self.labels))

    def contract_registry(self) -> ContractRegistry:
        entries = {
            addr: ContractEntry(
                kind=book.kind,
                protocol=book.protocol,
                share_token=book.share_token,
                params=dict(book.params),
            )
            for addr, book in self.books.items()
        }
        return ContractRegistry(entries)

    def snapshot(self, date: str = SNAPSHOT_DATE) -> Snapshot:
        return Snapshot(self.last_block() + 1, date)


def _category(book: _ContractBook, token_protocol: str) -> AdjustmentCategory:
    override = book.params.get("category")
    if override:
        return AdjustmentCategory(override)
    if book.kind is ContractKind.STAKING:
        if book.protocol == token_protocol:
            return AdjustmentCategory.INTERNAL_STAKING
        return AdjustmentCategory.EXTERNAL_STAKING
    if book.kind is ContractKind.LIQUIDITY_POOL:
        return AdjustmentCategory.AMM_LIQUIDITY
    if book.kind is ContractKind.LENDING_POOL:
        return AdjustmentCategory.LENDING_BORROWING
    return AdjustmentCategory.OTHER


def _resolve(builder: _Builder, token: TokenId) -> GroundTruth:
    """Derive beneficial ownership of `token` from the builder's books.

    Contracts are processed in creation order; by construction every
    claim flows from earlier-created contracts to later ones, so each
    contract sees its complete inbound before distributing.
    """
    base = token.address
    protocol = builder.token_protocols[base]
    ownership: dict[Address, Fraction] = {}
    exclusions: dict[Address, Fraction] = {}
    reasons: dict[Address, ExclusionReason] = {}
    records: list[tuple[AdjustmentCategory, Address, Fraction]] = []
    pending: dict[Address, dict[Address, Fraction]] = {}

    def exclude(addr: Address, amount: Fraction, reason: ExclusionReason) -> None:
        if amount == 0:
            return
        exclusions[addr] = exclusions.get(addr, Fraction(0)) + amount
        reasons.setdefault(addr, reason)

    def route(dst: Address, amount: Fraction, instrument: Address) -> None:
        if amount == 0:
            return
        if dst in builder.books:
            channels = pending.setdefault(dst, {})
            channels[instrument] = channels.get(instrument, Fraction(0)) + amount
            return
        label = builder.labels.get(dst)
        if label is not None and label.cls in _ACTOR_REASON:
            exclude(dst, amount, _ACTOR_REASON[label.cls])
            return
        ownership[dst] = ownership.get(dst, Fraction(0)) + amount

    def distribute(source: Address, cat: AdjustmentCategory, dst: Address, amount: Fraction, instrument: Address) -> None:
        if amount == 0:
            return
        if dst == source:
            exclude(source, amount, ExclusionReason.SELF_MAPPED_BURN)
            return
        records.append((cat, dst, amount))
        route(dst, amount, instrument)

    for holder in sorted(builder.balances.get(base, {})):
        route(holder, Fraction(builder.balances[base][holder]), base)

    for addr in builder.contract_order:
        book = builder.books[addr]
        debts = {o: v for o, v in book.debts.get(base, {}).items() if v}
        inbound = pending.pop(addr, None)
        if inbound is None and not (book.kind is ContractKind.LENDING_POOL and debts):
            continue
        inbound = inbound or {}
        if book.kind is ContractKind.EXCLUDED_CONTRACT:
            total = sum(inbound.values(), Fraction(0))
            declared = book.params.get("reason")
            reason = ExclusionReason(declared) if declared else ExclusionReason.UNMAPPABLE_CONTRACT
            exclude(addr, total, reason)
            continue
        cat = _category(book, protocol)
        if book.kind in (ContractKind.LIQUIDITY_POOL, ContractKind.LENDING_POOL):
            total = sum(inbound.values(), Fraction(0))
            if book.kind is ContractKind.LENDING_POOL:
                total += sum(Fraction(v) for v in debts.values())
                for borrower in sorted(debts):
                    distribute(addr, cat, borrower, Fraction(-debts[borrower]), base)
            share = book.share_token.address
            share_balances = builder.balances.get(share, {})
            supply = sum(share_balances.values())
            if supply == 0:
                exclude(addr, total, ExclusionReason.UNMAPPABLE_CONTRACT)
                continue
            for holder in sorted(share_balances):
                part = total * share_balances[holder] / supply
                distribute(addr, cat, holder, part, share)
        elif book.kind is ContractKind.STAKING:
            raw = inbound.pop(base, Fraction(0))
            stakes = book.stakes.get(base, {})
            accrued = book.accrued.get(base, {})
            owed = Fraction(sum(stakes.values()) + sum(accrued.values()))
            for owner in sorted(set(stakes) | set(accrued)):
                amount = Fraction(stakes.get(owner, 0) + accrued.get(owner, 0))
                distribute(addr, cat, owner, amount, base)
            if raw - owed > 0:
                exclude(addr, raw - owed, ExclusionReason.FUTURE_REWARDS)
            elif raw - owed < 0:
                raise AssertionError(f"builder bug: staking {addr} underfunded by {owed - raw}")
            for instrument in sorted(inbound):
                amount = inbound[instrument]
                sbook = book.stakes.get(instrument, {})
                stotal = sum(sbook.values())
                if stotal == 0:
                    exclude(addr, amount, ExclusionReason.UNMAPPABLE_CONTRACT)
                    continue
                for owner in sorted(sbook):
                    distribute(addr, cat, owner, amount * sbook[owner] / stotal, instrument)
        else:  # UNIQUE
            raw = inbound.pop(base, Fraction(0))
            owners = book.deposits.get(base, {})
            owned_total = Fraction(sum(owners.values()))
            for owner in sorted(owners):
                distribute(addr, cat, owner, Fraction(owners[owner]), base)
            remainder = raw - owned_total
            if remainder > 0:
                exclude(addr, remainder, ExclusionReason.UNMAPPABLE_CONTRACT)
            elif remainder < 0:
                raise AssertionError(f"builder bug: unique {addr} over-allocated")
            for instrument in sorted(inbound):
                amount = inbound[instrument]
                dbook = book.deposits.get(instrument, {})
                dtotal = sum(dbook.values())
                if dtotal == 0:
                    exclude(addr, amount, ExclusionReason.UNMAPPABLE_CONTRACT)
                    continue
                for owner in sorted(dbook):
                    distribute(addr, cat, owner, amount * dbook[owner] / dtotal, instrument)

    if pending:
        raise AssertionError(f"builder bug: unprocessed claims on {sorted(pending)}")

    ownership = {a: v for a, v in ownership.items() if v != 0}
    exclusions = {a: v for a, v in exclusions.items() if v != 0}
    raw_totals: dict[AdjustmentCategory, Fraction] = {}
    relevant_totals: dict[AdjustmentCategory, Fraction] = {}
    for cat, beneficiary, amount in records:
        raw_totals[cat] = raw_totals.get(cat, Fraction(0)) + abs(amount)
        if beneficiary not in exclusions:
            relevant_totals[cat] = relevant_totals.get(cat, Fraction(0)) + abs(amount)
    return GroundTruth(
        token=token,
        ownership=ownership,
        exclusions=exclusions,
        exclusion_reasons={a: r for a, r in reasons.items() if a in exclusions},
        expected_adjustments=raw_totals,
        relevant_adjustments=relevant_totals,
        minted=builder.minted.get(base, 0),
        burned=builder.burned.get(base, 0),
    )


def _partition(rng: random.Random, total: int, parts: int) -> list[int]:
    """Random integer partition of `total` into `parts` non-negative cells."""
    if parts <= 0:
        return []
    weights = [rng.random() ** 2 + 1e-9 for _ in range(parts)]
    scale = sum(weights)
    amounts = [int(total * w / scale) for w in weights]
    return amounts


def _weighted_choice(rng: random.Random, mix: Mapping[str, float]) -> str:
    keys = sorted(mix)
    return rng.choices(keys, weights=[mix[k] for k in keys], k=1)[0]


def _positive_holders(builder: _Builder, token: Address, pool: Iterable[Address]) -> list[Address]:
    balances = builder.balances.get(token, {})
    allowed = set(pool)
    return sorted(a for a, v in balances.items() if v > 0 and a in allowed)


def generate(spec: ScenarioSpec) -> Scenario:
    """Generate a randomized scenario; deterministic in the seed."""
    rng = random.Random(spec.seed)
    builder = _Builder(rng)
    eoas = [builder.new_eoa() for _ in range(spec.n_eoas)]
    window_safe = spec.n_eoas > WINDOW_SAFE_EOAS

    for token_n in range(spec.n_tokens):
        symbol = f"TK{token_n}"
        token = builder.new_token(symbol, decimals=rng.randint(6, 18), protocol=symbol.lower())
        _generate_token_history(builder, spec, token, eoas, window_safe=window_safe)

    snapshot = builder.snapshot()
    truth = {token.address: _resolve(builder, token) for token in builder.tokens}
    return Scenario(
        name=f"random-{spec.seed}",
        tokens=list(builder.tokens),
        token_protocols=dict(builder.token_protocols),
        snapshot=snapshot,
        events=list(builder.events),
        labels=builder.label_registry(),
        contracts=builder.contract_registry(),
        truth=truth,
        checkpoints=list(builder.checkpoints),
    )


def _generate_token_history(
    builder: _Builder,
    spec: ScenarioSpec,
    token: TokenId,
    eoas: Sequence[Address],
    *,
    window_safe: bool,
) -> None:
    rng = builder.rng
    base = token.address
    protocol = builder.token_protocols[base]
    supply = rng.randrange(10**9, 10**12)
    treasury = rng.choice(eoas)
    builder.mint(token, treasury, supply)
    builder.checkpoint()

    # spread most of the supply over a random subset of accounts
    k = rng.randint(max(1, len(eoas) // 2), len(eoas))
    holders = rng.sample(list(eoas), k)
    distributable = supply * rng.randint(50, 90) // 100
    for addr, amount in zip(holders, _partition(rng, distributable, k)):
        if addr != treasury:
            builder.transfer(base, treasury, addr, amount)
    builder.checkpoint()

    if not window_safe:
        if rng.random() < 0.8:
            for _ in range(rng.randint(1, 3)):
                kind = _weighted_choice(rng, spec.exclusion_mix)
                actor = builder.new_excluded(kind)
                donor = treasury if builder.balance(base, treasury) > 0 else None
                if donor is None:
                    break
                amount = builder.balance(base, donor) * rng.randint(5, 25) // 100
                builder.transfer(base, donor, actor, amount)
        if rng.random() < 0.3 and builder.balance(base, treasury) > 10:
            builder.burn(token, treasury, builder.balance(base, treasury) // 10)
        if rng.random() < 0.25 and builder.balance(base, treasury) > 10:
            escrow = builder.new_contract(
                ContractKind.EXCLUDED_CONTRACT,
                protocol,
                params={"reason": ExclusionReason.NON_CIRCULATING.value}
                if rng.random() < 0.5
                else {},
            )
            builder.transfer(base, treasury, escrow, builder.balance(base, treasury) // 5)
        if rng.random() < 0.3:
            multisig = builder.new_multisig()
            donor = rng.choice(sorted(a for a in eoas if builder.balance(base, a) > 0))
            builder.transfer(base, donor, multisig, builder.balance(base, donor) // 3)
        builder.checkpoint()

    # nested wrapping layers; instruments from earlier levels feed later ones
    instruments_by_level: dict[int, list[Address]] = {0: [base]}
    depth = rng.randint(0, spec.max_depth)
    for level in range(1, depth + 1):
        created: list[Address] = []
        lower = [a for lv in range(level) for a in instruments_by_level.get(lv, [])]
        if not lower:
            break
        for _ in range(rng.randint(1, 2)):
            kind_name = _weighted_choice(rng, spec.pool_mix)
            prev = instruments_by_level.get(level - 1) or lower
            instrument = rng.choice(prev if rng.random() < 0.8 else lower)
            depositor_pool: list[Address] = list(eoas)
            if not window_safe and rng.random() < 0.25:
                depositor_pool += [a for a, l in sorted(builder.labels.items()) if l.cls is LabelClass.CEX]
            holders_of = _positive_holders(builder, instrument, depositor_pool)
            if not holders_of:
                continue
            depositors = rng.sample(holders_of, min(len(holders_of), rng.randint(1, 4)))
            share_addr = _spawn_contract(
                builder, spec, token, kind_name, instrument, depositors, eoas
            )
            if share_addr is not None:
                created.append(share_addr)
        if created:
            instruments_by_level[level] = created
        builder.checkpoint()

    # move some share-token claims between accounts
    for level, shares in sorted(instruments_by_level.items()):
        if level == 0:
            continue
        for share in shares:
            if rng.random() < 0.4:
                holders_of = _positive_holders(builder, share, eoas)
                if holders_of:
                    src = rng.choice(holders_of)
                    dst = rng.choice(sorted(set(eoas) - {src}) or holders_of)
                    if src != dst:
                        builder.transfer(share, src, dst, builder.balance(share, src) // 2)
    builder.checkpoint()


def _spawn_contract(
    builder: _Builder,
    spec: ScenarioSpec,
    token: TokenId,
    kind_name: str,
    instrument: Address,
    depositors: Sequence[Address],
    eoas: Sequence[Address],
) -> Address | None:
    """Create one custodial contract and run its deposit flow; returns the
    share-token address when the contract issues one."""
    rng = builder.rng
    base_protocol = builder.token_protocols[token.address]
    protocol = base_protocol if rng.random() < 0.5 else f"p{builder._contract_n + 1}"

    if kind_name in ("liquidity_pool", "wrapper"):
        n = builder._contract_n + 1
        share = builder.new_share_token(f"LP{n}" if kind_name == "liquidity_pool" else f"WR{n}")
        params = {"category": AdjustmentCategory.OTHER.value} if kind_name == "wrapper" else {}
        pool = builder.new_contract(ContractKind.LIQUIDITY_POOL, protocol, share, params)
        for owner in depositors:
            bal = builder.balance(instrument, owner)
            amount = bal if kind_name == "wrapper" else bal * rng.randint(30, 90) // 100
            if amount > 0:
                builder.pool_deposit(pool, instrument, owner, amount)
        return share.address

    if kind_name == "lending_pool":
        n = builder._contract_n + 1
        share = builder.new_share_token(f"CR{n}")
        pool = builder.new_contract(ContractKind.LENDING_POOL, protocol, share)
        for owner in depositors:
            amount = builder.balance(instrument, owner) * rng.randint(30, 90) // 100
            if amount > 0:
                builder.pool_deposit(pool, instrument, owner, amount)
        available = builder.balance(instrument, pool)
        if available > 1 and rng.random() < 0.7:
            for borrower in rng.sample(list(eoas), rng.randint(1, 2)):
                limit = builder.balance(instrument, pool) * 4 // 5
                if limit < 1:
                    break
                amount = rng.randint(1, limit)
                builder.borrow(pool, instrument, borrower, amount)
                if rng.random() < 0.5:
                    buyer = rng.choice(sorted(set(eoas) - {borrower}) or [borrower])
                    if buyer != borrower:
                        builder.transfer(instrument, borrower, buyer, amount * rng.randint(40, 100) // 100)
                if rng.random() < 0.3:
                    repayable = min(
                        builder.balance(instrument, borrower),
                        builder.books[pool].book("debts", instrument).get(borrower, 0),
                    )
                    if repayable > 0:
                        builder.repay(pool, instrument, borrower, repayable // 2 or repayable)
        return share.address

    if kind_name == "staking":
        contract = builder.new_contract(
            ContractKind.STAKING, protocol, params={"staked_token": instrument}
        )
        stakers: list[Address] = []
        for owner in depositors:
            amount = builder.balance(instrument, owner) * rng.randint(40, 95) // 100
            if amount > 0:
                builder.stake(contract, instrument, owner, amount)
                stakers.append(owner)
        if stakers and rng.random() < 0.5:
            treasury_like = [a for a in eoas if builder.balance(token.address, a) > len(stakers) * 2]
            if treasury_like:
                funder = rng.choice(sorted(treasury_like))
                pot = builder.balance(token.address, funder) * rng.randint(5, 20) // 100
                if pot > 0:
                    builder.transfer(token.address, funder, contract, pot)
                    accrue_total = pot * rng.randint(0, 60) // 100
                    for staker, part in zip(stakers, _partition(rng, accrue_total, len(stakers))):
                        if part > 0:
                            builder.accrue_reward(contract, token.address, staker, part)
        return None

    if kind_name == "unique":
        contract = builder.new_contract(ContractKind.UNIQUE, protocol)
        for owner in depositors:
            amount = builder.balance(instrument, owner) * rng.randint(30, 80) // 100
            if amount > 0:
                builder.deposit_unique(contract, instrument, owner, amount)
        if rng.random() < 0.3:
            holders_of = _positive_holders(builder, instrument, eoas)
            if holders_of:
                donor = rng.choice(holders_of)
                extra = builder.balance(instrument, donor) // 4
                if extra > 0:
                    # funds parked without a deposit record stay unmappable
                    builder.transfer(instrument, donor, contract, extra)
        return None

    raise ValueError(f"unknown pool kind {kind_name!r}")


def paper_chain_fixture() -> Scenario:
    """Three-layer nesting: lending pool -> two-asset pool -> staking.

    A base token is deposited into a lending market, the receipt tokens
    (together with receipts of a second token) go into a pool that mints
    a combined pool token, and those pool tokens are staked in a
    contract that pays rewards in the second token. The base token must
    come out attributed to the stakers in exactly three mapping layers.
    """
    rng = random.Random(0xC0FFEE)
    builder = _Builder(rng)
    e1, e2 = builder.new_eoa(), builder.new_eoa()
    treasury = builder.new_eoa()

    tka = builder.new_token("TKA", decimals=18, protocol="tka")
    tkb = builder.new_token("TKB", decimals=18, protocol="creamish")

    builder.mint(tka, e1, 600)
    builder.mint(tka, e2, 400)
    builder.mint(tkb, e1, 300)
    builder.mint(tkb, e2, 100)
    builder.mint(tkb, treasury, 100)
    builder.checkpoint()

    cr_a = builder.new_share_token("crTKA")
    lend_a = builder.new_contract(ContractKind.LENDING_POOL, "creamish", cr_a)
    cr_b = builder.new_share_token("crTKB")
    lend_b = builder.new_contract(ContractKind.LENDING_POOL, "creamish", cr_b)
    builder.pool_deposit(lend_a, tka.address, e1, 600)
    builder.pool_deposit(lend_a, tka.address, e2, 400)
    builder.pool_deposit(lend_b, tkb.address, e1, 300)
    builder.pool_deposit(lend_b, tkb.address, e2, 100)
    builder.checkpoint()

    crpt = builder.new_share_token("CRPT")
    balancer = builder.new_contract(ContractKind.LIQUIDITY_POOL, "creamish", crpt)
    builder.pool_deposit(balancer, cr_a.address, e1, 600)
    builder.transfer(cr_b.address, e1, balancer, 300)
    builder.pool_deposit(balancer, cr_a.address, e2, 400)
    builder.transfer(cr_b.address, e2, balancer, 100)
    builder.checkpoint()

    staking = builder.new_contract(
        ContractKind.STAKING, "creamish", params={"staked_token": crpt.address}
    )
    builder.stake(staking, crpt.address, e1, 600)
    builder.stake(staking, crpt.address, e2, 400)
    builder.transfer(tkb.address, treasury, staking, 50)
    builder.accrue_reward(staking, tkb.address, e1, 20)
    builder.accrue_reward(staking, tkb.address, e2, 10)
    builder.checkpoint()

    snapshot = builder.snapshot()
    truth = {token.address: _resolve(builder, token) for token in builder.tokens}
    return Scenario(
        name="paper-chain",
        tokens=list(builder.tokens),
        token_protocols=dict(builder.token_protocols),
        snapshot=snapshot,
        events=list(builder.events),
        labels=builder.label_registry(),
        contracts=builder.contract_registry(),
        truth=truth,
        checkpoints=list(builder.checkpoints),
    )


def complexity_chain_fixture() -> Scenario:
    """Lend -> borrow -> AMM -> stake chain over the full supply.

    Every unit of the token is wrapped four times, so the wrapping
    complexity of the token comes out at exactly 4.
    """
    rng = random.Random(0xFACADE)
    builder = _Builder(rng)
    a, b = builder.new_eoa(), builder.new_eoa()
    tkc = builder.new_token("TKC", decimals=18, protocol="tkc")
    supply = 100_000
    builder.mint(tkc, a, supply)
    builder.checkpoint()

    cr = builder.new_share_token("crTKC")
    lend = builder.new_contract(ContractKind.LENDING_POOL, "lend", cr)
    builder.pool_deposit(lend, tkc.address, a, supply)
    builder.borrow(lend, tkc.address, b, supply)
    builder.checkpoint()

    lp = builder.new_share_token("LPC")
    amm = builder.new_contract(ContractKind.LIQUIDITY_POOL, "amm", lp)
    builder.pool_deposit(amm, tkc.address, b, supply)
    builder.checkpoint()

    farm = builder.new_contract(ContractKind.STAKING, "farm", params={"staked_token": lp.address})
    builder.stake(farm, lp.address, b, supply)
    builder.checkpoint()

    snapshot = builder.snapshot()
    truth = {tkc.address: _resolve(builder, tkc)}
    return Scenario(
        name="complexity-4",
        tokens=[tkc],
        token_protocols=dict(builder.token_protocols),
        snapshot=snapshot,
        events=list(builder.events),
        labels=builder.label_registry(),
        contracts=builder.contract_registry(),
        truth=truth,
        checkpoints=list(builder.checkpoints),
    )


def coverage_fixture(unknown_share: Fraction) -> Scenario:
    """One unregistered contract holding `unknown_share` of the supply.

    Above the coverage threshold the mapping run must refuse to finish;
    at dust level the contract is included as a single actor.
    """
    rng = random.Random(0xBEEF)
    builder = _Builder(rng)
    eoas = [builder.new_eoa() for _ in range(5)]
    token = builder.new_token("TKD", decimals=18, protocol="tkd")
    supply = 1_000_000
    builder.mint(token, eoas[0], supply)
    builder.checkpoint()

    unknown = builder.new_unknown_contract()
    slice_amount = int(supply * Fraction(unknown_share))
    builder.transfer(token.address, eoas[0], unknown, slice_amount)
    for eoa, amount in zip(eoas[1:], _partition(rng, supply // 2, len(eoas) - 1)):
        builder.transfer(token.address, eoas[0], eoa, amount)
    builder.checkpoint()

    share = builder.new_share_token("LPD")
    pool = builder.new_contract(ContractKind.LIQUIDITY_POOL, "tkd", share)
    builder.pool_deposit(pool, token.address, eoas[1], builder.balance(token.address, eoas[1]) // 2)
    builder.checkpoint()

    snapshot = builder.snapshot()
    truth = {token.address: _resolve(builder, token)}
    return Scenario(
        name=f"coverage-{unknown_share}",
        tokens=[token],
        token_protocols=dict(builder.token_protocols),
        snapshot=snapshot,
        events=list(builder.events),
        labels=builder.label_registry(),
        contracts=builder.contract_registry(),
        truth=truth,
        checkpoints=list(builder.checkpoints),
    )


def oracle_metrics(truth: GroundTruth):
    """Straightforward metric implementations computed from ground truth.

    Deliberately naive: full sorts, an O(n^2) double-loop Gini, linear
    scans. Used to cross-check the main metrics path.
    """
    from .metrics import GINI_TOP, ConcentrationReport, IntegrationReport, TOP_N_LEVELS

    positives = sorted((v for v in truth.ownership.values() if v > 0), reverse=True)
    relevant = truth.relevant_supply()
    if relevant <= 0:
        raise ValueError("oracle needs a positive relevant supply")

    top_shares = {}
    for n in TOP_N_LEVELS:
        top_shares[n] = sum(positives[:n], Fraction(0)) / relevant

    def count_for(p: Fraction) -> int:
        target = p * relevant
        running = Fraction(0)
        for k, value in enumerate(positives, start=1):
            running += value
            if running >= target:
                return k
        raise ValueError("share never reached")

    vector = positives[:GINI_TOP] + [Fraction(0)] * max(0, GINI_TOP - len(positives))
    mean = sum(vector, Fraction(0)) / GINI_TOP
    double_sum = Fraction(0)
    for xi in vector:
        for xj in vector:
            double_sum += abs(xi - xj)
    gini = double_sum / (2 * GINI_TOP**2 * mean)

    burned_total = Fraction(truth.burned)
    for addr, reason in truth.exclusion_reasons.items():
        if reason in (ExclusionReason.BURNER, ExclusionReason.SELF_MAPPED_BURN):
            burned_total += truth.exclusions[addr]
    inclusion = relevant / (Fraction(truth.minted) - burned_total)

    wrap_by_cat = dict(truth.relevant_adjustments)
    wrap_total = sum(wrap_by_cat.values(), Fraction(0)) / relevant
    wrap_shares = {cat: v / relevant for cat, v in wrap_by_cat.items()}

    short_total = sum((-v for v in truth.ownership.values() if v < 0), Fraction(0))

    concentration = ConcentrationReport(
        owner_count=len(positives),
        top_n_share=top_shares,
        top_pct_count={50: count_for(Fraction(1, 2)), 99: count_for(Fraction(99, 100))},
        gini_500=gini,
    )
    integration = IntegrationReport(
        relevant_supply=relevant,
        inclusion_pct=inclusion,
        wrapping_complexity=wrap_total,
        wrapping_by_category=wrap_shares,
        multi_token={n: 0 for n in (1, 2, 3, 4)},
        shorted_pct=short_total / relevant,
    )
    return concentration, integration
