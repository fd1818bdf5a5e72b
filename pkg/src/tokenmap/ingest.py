"""Event-file and registry ingestion.

Parses the normalized JSON Lines event schema and the label/contract
registry files, then reconstructs holder tables and per-contract
position ledgers at a snapshot block. Ingestion works in integer raw
units; rationals only appear later, from proportional remapping.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from enum import Enum, unique
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import (
    DuplicateEvent,
    NegativeBalance,
    NegativePosition,
    ParseError,
    SchemaError,
)
from .model import (
    Address,
    Amount,
    ExclusionReason,
    HolderTable,
    Snapshot,
    TokenId,
    ZERO_ADDRESS,
    fraction_to_str,
)

log = logging.getLogger(__name__)


@unique
class EventKind(Enum):
    TRANSFER = "transfer"
    DEPOSIT = "deposit"
    WITHDRAW = "withdraw"
    BORROW = "borrow"
    REPAY = "repay"
    STAKE = "stake"
    UNSTAKE = "unstake"
    REWARD_ACCRUED = "reward_accrued"
    REWARD_PAID = "reward_paid"
    MIGRATE = "migrate"


POSITION_KINDS = frozenset(EventKind) - {EventKind.TRANSFER}


@dataclass(frozen=True)
class LedgerEvent:
    """One normalized ledger event.

    `token` is the token's contract address; symbol and decimals live in
    the run configuration. For MIGRATE, `src` carries the share token
    being migrated away from and `token` the replacement share token.
    """

    kind: EventKind
    token: Address
    block: int
    log_index: int
    amount: int
    contract: Address | None = None
    src: Address | None = None
    dst: Address | None = None
    owner: Address | None = None

    def __post_init__(self):
        if self.amount < 0:
            raise ValueError("event amount must be non-negative raw units")
        if self.block < 0 or self.log_index < 0:
            raise ValueError("block and log_index must be non-negative")

    @property
    def sort_key(self) -> tuple[int, int, str]:
        return (self.block, self.log_index, self.kind.value)


def event_to_json(event: LedgerEvent) -> str:
    payload: dict[str, object] = {
        "kind": event.kind.value,
        "token": event.token,
        "amount": str(event.amount),
        "block": event.block,
        "log_index": event.log_index,
    }
    if event.contract is not None:
        payload["contract"] = event.contract
    if event.src is not None:
        payload["from"] = event.src
    if event.dst is not None:
        payload["to"] = event.dst
    if event.owner is not None:
        payload["owner"] = event.owner
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def event_from_obj(obj: Mapping[str, object]) -> LedgerEvent:
    kind = EventKind(str(obj["kind"]))
    amount_raw = obj["amount"]
    if isinstance(amount_raw, bool) or isinstance(amount_raw, float):
        raise ValueError("amount must be a decimal string of integer raw units")
    amount = int(amount_raw)

    def addr(key: str) -> Address | None:
        value = obj.get(key)
        return Address(value) if value is not None else None

    return LedgerEvent(
        kind=kind,
        token=Address(obj["token"]),
        block=int(obj["block"]),
        log_index=int(obj["log_index"]),
        amount=amount,
        contract=addr("contract"),
        src=addr("from"),
        dst=addr("to"),
        owner=addr("owner"),
    )


def load_events(path: str | Path) -> list[LedgerEvent]:
    """Parse a JSON Lines event file into a canonically ordered stream.

    Events are sorted by (block, log_index); an exact duplicate
    (block, log_index, kind) key is rejected.
    """
    events: list[LedgerEvent] = []
    with open(path, "r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                events.append(event_from_obj(obj))
            except (ValueError, KeyError, TypeError) as exc:
                raise ParseError(lineno, str(exc)) from exc
    return sort_events(events)


def sort_events(events: Iterable[LedgerEvent]) -> list[LedgerEvent]:
    ordered = sorted(events, key=lambda e: e.sort_key)
    seen: set[tuple[int, int, str]] = set()
    for event in ordered:
        key = event.sort_key
        if key in seen:
            raise DuplicateEvent(
                f"duplicate event at block {event.block} log {event.log_index} ({event.kind.value})"
            )
        seen.add(key)
    return ordered


@unique
class LabelClass(Enum):
    EOA = "eoa"
    BURNER = "burner"
    CEX = "cex"
    FTIA_VESTING = "ftia_vesting"
    MULTISIG = "multisig"
    CONTRACT = "contract"


@dataclass(frozen=True)
class LabelEntry:
    cls: LabelClass
    protocol: str | None = None
    note: str | None = None


class LabelRegistry:
    """Address labels plus a set of addresses known to carry bytecode.

    Unlisted addresses default to EOA unless flagged as bytecode-bearing,
    in which case they are generic contracts.
    """

    def __init__(
        self,
        entries: Mapping[Address, LabelEntry] | None = None,
        bytecode: Iterable[Address] = (),
    ):
        self.entries: dict[Address, LabelEntry] = {
            Address(a): e for a, e in (entries or {}).items()
        }
        self.bytecode: frozenset[Address] = frozenset(Address(a) for a in bytecode)

    def class_of(self, addr: Address) -> LabelClass:
        addr = Address(addr)
        entry = self.entries.get(addr)
        if entry is not None:
            return entry.cls
        return LabelClass.CONTRACT if addr in self.bytecode else LabelClass.EOA

    def get(self, addr: Address) -> LabelEntry | None:
        return self.entries.get(Address(addr))

    def with_bytecode(self, addrs: Iterable[Address]) -> "LabelRegistry":
        return LabelRegistry(self.entries, self.bytecode | set(addrs))

    def to_jsonable(self) -> dict[str, dict[str, str]]:
        out: dict[str, dict[str, str]] = {}
        for addr in sorted(self.entries):
            entry = self.entries[addr]
            item: dict[str, str] = {"class": entry.cls.value}
            if entry.protocol:
                item["protocol"] = entry.protocol
            if entry.note:
                item["note"] = entry.note
            out[addr] = item
        return out

    def __eq__(self, other) -> bool:
        if not isinstance(other, LabelRegistry):
            return NotImplemented
        return self.entries == other.entries and self.bytecode == other.bytecode


@unique
class ContractKind(Enum):
    LIQUIDITY_POOL = "liquidity_pool"
    LENDING_POOL = "lending_pool"
    STAKING = "staking"
    UNIQUE = "unique"
    EXCLUDED_CONTRACT = "excluded_contract"


MAPPABLE_KINDS = frozenset(
    {
        ContractKind.LIQUIDITY_POOL,
        ContractKind.LENDING_POOL,
        ContractKind.STAKING,
        ContractKind.UNIQUE,
    }
)


@dataclass(frozen=True)
class ContractEntry:
    kind: ContractKind
    protocol: str
    share_token: TokenId | None = None
    params: Mapping[str, str] = field(default_factory=dict)


class ContractRegistry:
    def __init__(self, entries: Mapping[Address, ContractEntry] | None = None):
        self.entries: dict[Address, ContractEntry] = {
            Address(a): e for a, e in (entries or {}).items()
        }

    def get(self, addr: Address) -> ContractEntry | None:
        return self.entries.get(Address(addr))

    def __contains__(self, addr: Address) -> bool:
        return Address(addr) in self.entries

    def addresses(self) -> list[Address]:
        return sorted(self.entries)

    def of_kind(self, kind: ContractKind) -> list[Address]:
        return sorted(a for a, e in self.entries.items() if e.kind == kind)

    def to_jsonable(self) -> dict[str, dict[str, object]]:
        out: dict[str, dict[str, object]] = {}
        for addr in sorted(self.entries):
            entry = self.entries[addr]
            item: dict[str, object] = {
                "kind": entry.kind.value,
                "protocol": entry.protocol,
            }
            if entry.share_token is not None:
                item["share_token"] = {
                    "address": entry.share_token.address,
                    "symbol": entry.share_token.symbol,
                    "decimals": entry.share_token.decimals,
                }
            if entry.params:
                item["params"] = dict(entry.params)
            out[addr] = item
        return out

    def __eq__(self, other) -> bool:
        if not isinstance(other, ContractRegistry):
            return NotImplemented
        return self.entries == other.entries


def _parse_share_token(addr: str, raw: object) -> TokenId:
    if isinstance(raw, str):
        share_addr = Address(raw)
        return TokenId(share_addr, symbol=share_addr[:10], decimals=18)
    if isinstance(raw, Mapping):
        return TokenId(
            Address(raw["address"]),
            symbol=str(raw.get("symbol") or Address(raw["address"])[:10]),
            decimals=int(raw.get("decimals", 18)),
        )
    raise SchemaError(addr, f"share_token must be an address or object, got {type(raw).__name__}")


def parse_labels(obj: Mapping[str, object]) -> LabelRegistry:
    entries: dict[Address, LabelEntry] = {}
    for addr_text, raw in obj.items():
        addr = Address(addr_text)
        if not isinstance(raw, Mapping):
            raise SchemaError(addr, "label entry must be an object")
        try:
            cls = LabelClass(str(raw["class"]))
        except (KeyError, ValueError) as exc:
            raise SchemaError(addr, f"bad label class: {raw.get('class')!r}") from exc
        entries[addr] = LabelEntry(
            cls=cls,
            protocol=raw.get("protocol"),
            note=raw.get("note"),
        )
    return LabelRegistry(entries)


def parse_contracts(obj: Mapping[str, object]) -> ContractRegistry:
    entries: dict[Address, ContractEntry] = {}
    for addr_text, raw in obj.items():
        addr = Address(addr_text)
        if not isinstance(raw, Mapping):
            raise SchemaError(addr, "contract entry must be an object")
        try:
            kind = ContractKind(str(raw["kind"]))
        except (KeyError, ValueError) as exc:
            raise SchemaError(addr, f"bad contract kind: {raw.get('kind')!r}") from exc
        protocol = raw.get("protocol")
        if not protocol:
            raise SchemaError(addr, "contract entry must declare a protocol")
        share_token = None
        if raw.get("share_token") is not None:
            share_token = _parse_share_token(addr, raw["share_token"])
        if kind in (ContractKind.LIQUIDITY_POOL, ContractKind.LENDING_POOL) and share_token is None:
            raise SchemaError(addr, f"{kind.value} entries must declare share_token")
        params = raw.get("params") or {}
        if not isinstance(params, Mapping):
            raise SchemaError(addr, "params must be an object")
        entries[addr] = ContractEntry(
            kind=kind,
            protocol=str(protocol),
            share_token=share_token,
            params={str(k): str(v) for k, v in params.items()},
        )
    return ContractRegistry(entries)


def load_registries(labels_path: str | Path, contracts_path: str | Path) -> tuple[LabelRegistry, ContractRegistry]:
    """Load and validate the two registry files."""
    with open(labels_path, "r", encoding="utf-8") as handle:
        labels_obj = json.load(handle)
    with open(contracts_path, "r", encoding="utf-8") as handle:
        contracts_obj = json.load(handle)
    if not isinstance(labels_obj, dict) or not isinstance(contracts_obj, dict):
        raise SchemaError("<file>", "registry files must be JSON objects keyed by address")
    return parse_labels(labels_obj), parse_contracts(contracts_obj)


def build_holder_table(
    events: Iterable[LedgerEvent],
    token: TokenId,
    at: Snapshot,
    burners: Iterable[Address] = (),
) -> HolderTable:
    """Fold transfer events of one token into net balances at a snapshot.

    Transfers from the zero address mint; transfers to the zero address
    or to a declared burn sink destroy supply. Zero balances are never
    stored.
    """
    burn_sinks = {ZERO_ADDRESS} | {Address(a) for a in burners}
    balances: dict[Address, int] = {}
    minted = 0
    burned = 0
    for event in events:
        if event.kind is not EventKind.TRANSFER or event.token != token.address:
            continue
        if event.block > at.block:
            continue
        src, dst = event.src, event.dst
        if src is None or dst is None:
            raise ValueError(f"transfer at block {event.block} missing from/to")
        amount = event.amount
        if src in burn_sinks and src != ZERO_ADDRESS:
            raise NegativeBalance(src, event.block)
        if src == ZERO_ADDRESS:
            minted += amount
        else:
            have = balances.get(src, 0)
            if amount > have:
                raise NegativeBalance(src, event.block)
            balances[src] = have - amount
        if dst in burn_sinks:
            burned += amount
        else:
            balances[dst] = balances.get(dst, 0) + amount
    entries = {addr: Fraction(value) for addr, value in balances.items() if value != 0}
    return HolderTable(
        token,
        at.block,
        entries=entries,
        minted=Fraction(minted),
        burned=Fraction(burned),
    )


@dataclass
class PositionLedger:
    """Event-sourced stake/debt/reward/deposit state of one contract, one token.

    `balance` is the contract's own raw transfer-fold balance of the
    token; `undistributed_reserve` = balance - stakes - accrued, clamped
    at zero with an audit note when events and balances disagree.
    """

    contract: Address
    token: Address
    stakes: dict[Address, Fraction] = field(default_factory=dict)
    debts: dict[Address, Fraction] = field(default_factory=dict)
    accrued_rewards: dict[Address, Fraction] = field(default_factory=dict)
    deposits: dict[Address, Fraction] = field(default_factory=dict)
    balance: Fraction = Fraction(0)
    undistributed_reserve: Fraction = Fraction(0)
    audit: list[str] = field(default_factory=list)

    def stakes_total(self) -> Fraction:
        return sum(self.stakes.values(), Fraction(0))

    def debts_total(self) -> Fraction:
        return sum(self.debts.values(), Fraction(0))

    def accrued_total(self) -> Fraction:
        return sum(self.accrued_rewards.values(), Fraction(0))

    def deposits_total(self) -> Fraction:
        return sum(self.deposits.values(), Fraction(0))

    def is_empty(self) -> bool:
        return not (self.stakes or self.debts or self.accrued_rewards or self.deposits) and self.balance == 0


def _bump(book: dict[Address, Fraction], owner: Address, delta: Fraction, *, what: str) -> None:
    value = book.get(owner, Fraction(0)) + delta
    if value < 0:
        raise NegativePosition(owner, what)
    if value == 0:
        book.pop(owner, None)
    else:
        book[owner] = value


def build_position_ledger(
    events: Iterable[LedgerEvent],
    contract: Address,
    token: Address,
    at: Snapshot,
) -> PositionLedger:
    """Replay position events targeting `contract` up to the snapshot.

    All of the contract's position events are folded (migrations cross
    share tokens), then the view for `token` is returned. A MIGRATE
    event converts the outstanding stake book of its `from` token into
    the new token pro-rata, preserving each staker's share exactly.
    """
    contract = Address(contract)
    token = Address(token)
    stakes: dict[Address, dict[Address, Fraction]] = {}
    debts: dict[Address, dict[Address, Fraction]] = {}
    accrued: dict[Address, dict[Address, Fraction]] = {}
    deposits: dict[Address, dict[Address, Fraction]] = {}
    balance = 0
    audit: list[str] = []

    def book(table: dict[Address, dict[Address, Fraction]], tok: Address) -> dict[Address, Fraction]:
        return table.setdefault(tok, {})

    for event in events:
        if event.block > at.block:
            continue
        if event.kind is EventKind.TRANSFER:
            if event.token != token:
                continue
            if event.src == contract:
                balance -= event.amount
            if event.dst == contract:
                balance += event.amount
            continue
        if event.contract != contract:
            continue
        amount = Fraction(event.amount)
        tok = event.token
        owner = event.owner
        if event.kind is EventKind.MIGRATE:
            if event.src is None:
                raise ValueError(f"migrate at block {event.block} missing source share token")
            old = stakes.pop(event.src, {})
            old_total = sum(old.values(), Fraction(0))
            if old_total == 0:
                audit.append(f"migrate at block {event.block}: no outstanding stakes in {event.src}")
                continue
            new_book = book(stakes, tok)
            for staker in sorted(old):
                _bump(new_book, staker, amount * old[staker] / old_total, what="migrate")
            continue
        if owner is None:
            raise ValueError(f"{event.kind.value} at block {event.block} missing owner")
        if event.kind is EventKind.STAKE:
            _bump(book(stakes, tok), owner, amount, what="stake")
        elif event.kind is EventKind.UNSTAKE:
            _bump(book(stakes, tok), owner, -amount, what="unstake")
        elif event.kind is EventKind.BORROW:
            _bump(book(debts, tok), owner, amount, what="borrow")
        elif event.kind is EventKind.REPAY:
            _bump(book(debts, tok), owner, -amount, what="repay")
        elif event.kind is EventKind.REWARD_ACCRUED:
            _bump(book(accrued, tok), owner, amount, what="reward accrual")
        elif event.kind is EventKind.REWARD_PAID:
            _bump(book(accrued, tok), owner, -amount, what="reward payout")
        elif event.kind is EventKind.DEPOSIT:
            _bump(book(deposits, tok), owner, amount, what="deposit")
        elif event.kind is EventKind.WITHDRAW:
            _bump(book(deposits, tok), owner, -amount, what="withdraw")

    ledger = PositionLedger(
        contract=contract,
        token=token,
        stakes=dict(sorted(stakes.get(token, {}).items())),
        debts=dict(sorted(debts.get(token, {}).items())),
        accrued_rewards=dict(sorted(accrued.get(token, {}).items())),
        deposits=dict(sorted(deposits.get(token, {}).items())),
        balance=Fraction(balance),
        audit=audit,
    )
    reserve = ledger.balance - ledger.stakes_total() - ledger.accrued_total()
    if reserve < 0:
        note = (
            f"contract {contract} holds {fraction_to_str(ledger.balance)} of {token} "
            f"but owes {fraction_to_str(ledger.stakes_total() + ledger.accrued_total())}; reserve clamped to 0"
        )
        ledger.audit.append(note)
        log.warning(note)
        reserve = Fraction(0)
    ledger.undistributed_reserve = reserve
    return ledger


def table_to_jsonable(table: HolderTable) -> dict[str, object]:
    return {
        "token": {
            "address": table.token.address,
            "symbol": table.token.symbol,
            "decimals": table.token.decimals,
        },
        "block": table.block,
        "entries": {addr: fraction_to_str(v) for addr, v in sorted(table.entries.items())},
        "excluded": [
            {"address": addr, "amount": fraction_to_str(amount), "reason": reason.value}
            for (addr, reason), amount in sorted(
                table.excluded.items(), key=lambda kv: (kv[0][0], kv[0][1].value)
            )
        ],
        "minted": fraction_to_str(table.minted),
        "burned": fraction_to_str(table.burned),
    }


def table_from_jsonable(obj: Mapping[str, object]) -> HolderTable:
    token_obj = obj["token"]
    token = TokenId(
        Address(token_obj["address"]),
        symbol=str(token_obj["symbol"]),
        decimals=int(token_obj["decimals"]),
    )
    excluded: dict[tuple[Address, ExclusionReason], Fraction] = {}
    for record in obj.get("excluded", []):
        key = (Address(record["address"]), ExclusionReason(record["reason"]))
        excluded[key] = excluded.get(key, Fraction(0)) + Fraction(record["amount"])
    return HolderTable(
        token,
        int(obj["block"]),
        entries={Address(a): Fraction(v) for a, v in obj.get("entries", {}).items()},
        excluded=excluded,
        minted=Fraction(str(obj.get("minted", 0))),
        burned=Fraction(str(obj.get("burned", 0))),
    )
