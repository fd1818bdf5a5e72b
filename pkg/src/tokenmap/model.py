"""Core domain types and exact arithmetic shared by every pipeline stage.

Balances are `fractions.Fraction` end to end: integer raw units at
ingestion, rationals after proportional splits. Floats appear only when
rendering reports; ledger state is never rounded.
"""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass
from enum import Enum, unique
from fractions import Fraction
from typing import Iterable, Iterator, Mapping

from .errors import ZeroDenominator

Amount = Fraction


class Address(str):
    """Lowercase 0x-prefixed 20-byte hex identifier.

    Checksummed casing is accepted on input and never emitted; two
    addresses are equal iff their bytes are equal.
    """

    __slots__ = ()

    def __new__(cls, value) -> "Address":
        if type(value) is Address:
            return value
        text = str(value).strip().lower()
        if text.startswith("0x"):
            text = text[2:]
        if len(text) != 40:
            raise ValueError(f"address must encode exactly 20 bytes: {value!r}")
        try:
            int(text, 16)
        except ValueError:
            raise ValueError(f"address is not hexadecimal: {value!r}") from None
        return super().__new__(cls, "0x" + text)


ZERO_ADDRESS = Address("0x" + "0" * 40)


@unique
class AdjustmentCategory(Enum):
    INTERNAL_STAKING = "internal_staking"
    EXTERNAL_STAKING = "external_staking"
    AMM_LIQUIDITY = "amm_liquidity"
    LENDING_BORROWING = "lending_borrowing"
    OTHER = "other"


@unique
class ExclusionReason(Enum):
    BURNER = "burner"
    CEX_CUSTODY = "cex_custody"
    FTIA_VESTING = "ftia_vesting"
    UNMAPPABLE_CONTRACT = "unmappable_contract"
    SELF_MAPPED_BURN = "self_mapped_burn"
    FUTURE_REWARDS = "future_rewards"
    NON_CIRCULATING = "non_circulating"


@dataclass(frozen=True)
class TokenId:
    address: Address
    symbol: str
    decimals: int = 18

    def __post_init__(self):
        object.__setattr__(self, "address", Address(self.address))
        if not self.symbol:
            raise ValueError("token symbol must be non-empty")
        if not 0 <= int(self.decimals) <= 18:
            raise ValueError(f"token decimals must be in 0..18, got {self.decimals}")


@dataclass(frozen=True, order=True)
class Snapshot:
    block: int
    date: dt.date

    def __post_init__(self):
        if isinstance(self.date, str):
            object.__setattr__(self, "date", dt.date.fromisoformat(self.date))
        if self.block < 0:
            raise ValueError("snapshot block must be non-negative")


def validate_snapshot_series(snapshots: Iterable[Snapshot]) -> None:
    """Blocks and dates must both be strictly increasing across a series."""
    prev: Snapshot | None = None
    for snap in snapshots:
        if prev is not None and (snap.block <= prev.block or snap.date <= prev.date):
            raise ValueError(
                f"snapshots out of order: block {prev.block} ({prev.date}) "
                f"followed by block {snap.block} ({snap.date})"
            )
        prev = snap


@dataclass(frozen=True)
class Adjustment:
    """One remap of an amount from a custodial address to a beneficiary."""

    token: TokenId
    source: Address
    beneficiary: Address
    amount: Amount
    category: AdjustmentCategory
    depth: int

    def __post_init__(self):
        object.__setattr__(self, "amount", Fraction(self.amount))
        if self.amount == 0:
            raise ValueError("adjustment amount must be non-zero")
        if self.source == self.beneficiary:
            raise ValueError("adjustment source and beneficiary must differ")
        if self.depth < 1:
            raise ValueError("adjustment depth is 1-based")


class HolderTable:
    """Signed net balances per address for one token at one block.

    `entries` never stores a zero: adding an exact negation removes the
    entry. `excluded` is the audited carve-out log, keyed by
    (address, reason) so one address may accumulate exclusions under
    distinct reasons. `minted`/`burned` track supply created and
    destroyed up to the snapshot block.
    """

    __slots__ = ("token", "block", "entries", "excluded", "minted", "burned")

    def __init__(
        self,
        token: TokenId,
        block: int,
        entries: Mapping[Address, Amount] | None = None,
        excluded: Mapping[tuple[Address, ExclusionReason], Amount] | None = None,
        minted: Amount = Fraction(0),
        burned: Amount = Fraction(0),
    ):
        self.token = token
        self.block = block
        self.entries: dict[Address, Fraction] = {}
        if entries:
            for addr, value in entries.items():
                self.add(addr, value)
        self.excluded: dict[tuple[Address, ExclusionReason], Fraction] = {
            (Address(a), r): Fraction(v) for (a, r), v in (excluded or {}).items()
        }
        self.minted = Fraction(minted)
        self.burned = Fraction(burned)

    def add(self, addr: Address, delta: Amount) -> None:
        delta = Fraction(delta)
        if delta == 0:
            return
        addr = Address(addr)
        value = self.entries.get(addr, Fraction(0)) + delta
        if value == 0:
            self.entries.pop(addr, None)
        else:
            self.entries[addr] = value

    def balance(self, addr: Address) -> Fraction:
        return self.entries.get(Address(addr), Fraction(0))

    def remove(self, addr: Address) -> Fraction:
        """Drop an entry and return the amount it held."""
        return self.entries.pop(Address(addr), Fraction(0))

    def record_exclusion(self, addr: Address, amount: Amount, reason: ExclusionReason) -> None:
        amount = Fraction(amount)
        if amount == 0:
            return
        key = (Address(addr), reason)
        self.excluded[key] = self.excluded.get(key, Fraction(0)) + amount

    def exclude_entry(self, addr: Address, reason: ExclusionReason) -> Fraction:
        """Move a live entry into the exclusion log; returns the amount moved."""
        amount = self.remove(addr)
        self.record_exclusion(addr, amount, reason)
        return amount

    def total(self) -> Fraction:
        return sum(self.entries.values(), Fraction(0))

    def excluded_total(self) -> Fraction:
        return sum(self.excluded.values(), Fraction(0))

    def ranked(self) -> list[tuple[Address, Fraction]]:
        """All entries sorted by (amount desc, address asc)."""
        return sorted(self.entries.items(), key=lambda kv: (-kv[1], kv[0]))

    def positive_ranked(self) -> list[tuple[Address, Fraction]]:
        return [(a, v) for a, v in self.ranked() if v > 0]

    def copy(self) -> "HolderTable":
        clone = HolderTable.__new__(HolderTable)
        clone.token = self.token
        clone.block = self.block
        clone.entries = dict(self.entries)
        clone.excluded = dict(self.excluded)
        clone.minted = self.minted
        clone.burned = self.burned
        return clone

    def __eq__(self, other) -> bool:
        if not isinstance(other, HolderTable):
            return NotImplemented
        return (
            self.token == other.token
            and self.block == other.block
            and self.entries == other.entries
            and self.excluded == other.excluded
        )

    def __repr__(self) -> str:
        return (
            f"HolderTable({self.token.symbol}@{self.block}, "
            f"{len(self.entries)} entries, {len(self.excluded)} exclusions)"
        )


def amount_add(a: Amount, b: Amount) -> Fraction:
    """Exact sum of two amounts."""
    return Fraction(a) + Fraction(b)


def amount_prorate(total: Amount, share_num: Amount, share_den: Amount) -> Fraction:
    """total * share_num / share_den, exactly.

    A full partition of shares reproduces the total with zero error.
    """
    share_den = Fraction(share_den)
    if share_den == 0:
        raise ZeroDenominator("share denominator is zero")
    share_num = Fraction(share_num)
    if not 0 <= share_num <= share_den:
        raise ValueError(f"share {share_num}/{share_den} outside [0, 1]")
    return Fraction(total) * share_num / share_den


def round_half_even(value: Fraction) -> int:
    """Round an exact rational to the nearest integer, ties to even."""
    q, r = divmod(value.numerator, value.denominator)
    twice = 2 * r
    if twice > value.denominator or (twice == value.denominator and q % 2):
        q += 1
    return q


def format_units(amount: Amount, decimals: int) -> str:
    """Render an amount of raw units as a token-unit decimal string.

    A raw amount is the fixed-point representation at `decimals` places,
    so integer raw values render exactly and round-trip; fractional raw
    amounts (from proportional splits) are rounded half-even to the
    nearest raw unit. Presentation only; never feeds back into ledger
    state.
    """
    value = Fraction(amount)
    raw = value.numerator if value.denominator == 1 else round_half_even(value)
    sign = "-" if raw < 0 else ""
    digits = str(abs(raw)).rjust(decimals + 1, "0")
    if decimals == 0:
        return sign + digits
    return f"{sign}{digits[:-decimals]}.{digits[-decimals:]}"


def parse_units(text: str, decimals: int) -> Fraction:
    """Parse a token-unit decimal string back into raw units."""
    text = text.strip()
    sign = 1
    if text.startswith(("-", "+")):
        sign = -1 if text[0] == "-" else 1
        text = text[1:]
    whole, _, frac = text.partition(".")
    if len(frac) > decimals:
        raise ValueError(f"more than {decimals} fractional digits: {text!r}")
    whole_val = int(whole or "0")
    frac_val = int(frac.ljust(decimals, "0") or "0") if decimals else 0
    return Fraction(sign * (whole_val * 10**decimals + frac_val))


def fraction_to_str(value: Amount) -> str:
    """Lossless text form of an exact amount ("15" or "15/7")."""
    value = Fraction(value)
    if value.denominator == 1:
        return str(value.numerator)
    return f"{value.numerator}/{value.denominator}"


def fraction_from_str(text: str) -> Fraction:
    return Fraction(text)
