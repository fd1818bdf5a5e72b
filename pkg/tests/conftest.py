"""Shared test helpers."""

from __future__ import annotations

from fractions import Fraction

import pytest

from tokenmap.ingest import EventKind, LedgerEvent
from tokenmap.model import Address, HolderTable, Snapshot, TokenId, ZERO_ADDRESS


def addr(n: int, prefix: str = "aa") -> Address:
    return Address("0x" + prefix + format(n, "x").rjust(40 - len(prefix), "0"))


def token(n: int = 1, symbol: str | None = None, decimals: int = 18) -> TokenId:
    return TokenId(addr(n, "ee"), symbol=symbol or f"TK{n}", decimals=decimals)


def table(entries: dict, tok: TokenId | None = None, block: int = 100) -> HolderTable:
    tok = tok or token()
    resolved = {a if isinstance(a, Address) else addr(a): Fraction(v) for a, v in entries.items()}
    minted = sum(resolved.values(), Fraction(0))
    return HolderTable(tok, block, entries=resolved, minted=minted)


def transfer(tok: TokenId, src, dst, amount: int, block: int, log_index: int = 0) -> LedgerEvent:
    return LedgerEvent(
        kind=EventKind.TRANSFER,
        token=tok.address,
        block=block,
        log_index=log_index,
        amount=amount,
        src=src,
        dst=dst,
    )


def mint(tok: TokenId, dst, amount: int, block: int, log_index: int = 0) -> LedgerEvent:
    return transfer(tok, ZERO_ADDRESS, dst, amount, block, log_index)


@pytest.fixture
def snapshot() -> Snapshot:
    return Snapshot(100, "2020-09-15")
