"""Categorization, inclusion logic, the map_* operations, and the
iterative run."""

from __future__ import annotations

import json
import random
from fractions import Fraction

import pytest

from tokenmap.errors import (
    CycleDetected,
    EmptyPool,
    InsolventPool,
    IterationLimitExceeded,
    OverAllocated,
    UnresolvedMajorHolder,
)
from tokenmap.ingest import (
    ContractEntry,
    ContractKind,
    ContractRegistry,
    LabelClass,
    LabelEntry,
    LabelRegistry,
    PositionLedger,
)
from tokenmap.mapper import (
    Action,
    Category,
    categorize,
    classify_adjustment,
    contract_adjustment_category,
    inclusion_decision,
    map_lending_pool,
    map_liquidity_pool,
    map_staking,
    map_unique,
    run_iterative_mapping,
)
from tokenmap.model import (
    Address,
    Adjustment,
    AdjustmentCategory,
    ExclusionReason,
    HolderTable,
)
from conftest import addr, table, token


def labels_of(**kwargs) -> LabelRegistry:
    entries = {}
    for name, cls in kwargs.items():
        n, prefix = name.split("_")
        entries[addr(int(n), prefix)] = LabelEntry(cls=LabelClass(cls))
    return LabelRegistry(entries)


def lp_entry(share_n: int, protocol="amm", params=None) -> ContractEntry:
    return ContractEntry(
        kind=ContractKind.LIQUIDITY_POOL,
        protocol=protocol,
        share_token=token(share_n, f"LP{share_n}"),
        params=params or {},
    )


class TestCategorize:
    def test_label_burner(self):
        labels = LabelRegistry({addr(1, "bb"): LabelEntry(cls=LabelClass.BURNER)})
        assert categorize(addr(1, "bb"), labels, ContractRegistry()) is Category.BURNER

    def test_contract_registry_wins_over_label(self):
        labels = LabelRegistry({addr(1, "cc"): LabelEntry(cls=LabelClass.CONTRACT)})
        contracts = ContractRegistry({addr(1, "cc"): lp_entry(9)})
        assert categorize(addr(1, "cc"), labels, contracts) is Category.LIQUIDITY_POOL

    def test_unlabeled_bytecode_is_unknown_contract(self):
        labels = LabelRegistry(bytecode=[addr(4, "cc")])
        assert categorize(addr(4, "cc"), labels, ContractRegistry()) is Category.UNKNOWN_CONTRACT

    def test_unlabeled_plain_address_is_eoa(self):
        assert categorize(addr(4), LabelRegistry(), ContractRegistry()) is Category.INCLUDED_EOA

    def test_random_combinations_match_rule_table(self):
        # independent truth table for (registry kind?, label class?, bytecode?)
        kind_to_cat = {
            ContractKind.LIQUIDITY_POOL: Category.LIQUIDITY_POOL,
            ContractKind.LENDING_POOL: Category.LENDING_POOL,
            ContractKind.STAKING: Category.STAKING,
            ContractKind.UNIQUE: Category.UNIQUE,
            ContractKind.EXCLUDED_CONTRACT: Category.EXCLUDED_CONTRACT,
        }
        label_to_cat = {
            LabelClass.EOA: Category.INCLUDED_EOA,
            LabelClass.BURNER: Category.BURNER,
            LabelClass.CEX: Category.CEX,
            LabelClass.FTIA_VESTING: Category.FTIA_VESTING,
            LabelClass.MULTISIG: Category.MULTISIG,
            LabelClass.CONTRACT: Category.UNKNOWN_CONTRACT,
        }
        rng = random.Random(77)
        for case in range(50):
            subject = addr(case + 1)
            kind = rng.choice([None] + list(ContractKind))
            label = rng.choice([None] + list(LabelClass))
            has_bytecode = rng.random() < 0.5
            contracts = ContractRegistry(
                {subject: ContractEntry(kind=kind, protocol="p", share_token=token(90))} if kind else {}
            )
            labels = LabelRegistry(
                {subject: LabelEntry(cls=label)} if label else {},
                bytecode=[subject] if has_bytecode else [],
            )
            if kind is not None:
                expected = kind_to_cat[kind]
            elif label is not None:
                expected = label_to_cat[label]
            elif has_bytecode:
                expected = Category.UNKNOWN_CONTRACT
            else:
                expected = Category.INCLUDED_EOA
            assert categorize(subject, labels, contracts) is expected


class TestInclusionDecision:
    @pytest.mark.parametrize(
        "category, action, reason",
        [
            (Category.INCLUDED_EOA, Action.INCLUDE, None),
            (Category.MULTISIG, Action.INCLUDE, None),
            (Category.UNKNOWN_CONTRACT, Action.INCLUDE, None),
            (Category.BURNER, Action.EXCLUDE, ExclusionReason.BURNER),
            (Category.CEX, Action.EXCLUDE, ExclusionReason.CEX_CUSTODY),
            (Category.FTIA_VESTING, Action.EXCLUDE, ExclusionReason.FTIA_VESTING),
            (Category.EXCLUDED_CONTRACT, Action.EXCLUDE, ExclusionReason.UNMAPPABLE_CONTRACT),
            (Category.LIQUIDITY_POOL, Action.MAP, None),
            (Category.LENDING_POOL, Action.MAP, None),
            (Category.STAKING, Action.MAP, None),
            (Category.UNIQUE, Action.MAP, None),
        ],
    )
    def test_full_decision_table(self, category, action, reason):
        decision = inclusion_decision(category)
        assert decision.action is action
        assert decision.reason == reason

    def test_covers_every_category(self):
        for category in Category:
            inclusion_decision(category)


class TestMapLiquidityPool:
    def test_simple_split(self):
        pool = addr(1, "cc")
        shares = table({addr(1): 60, addr(2): 40}, token(9, "LP9"))
        t = table({pool: 100})
        adjustments, out = map_liquidity_pool(pool, t, shares)
        assert out.entries == {addr(1): Fraction(60), addr(2): Fraction(40)}
        assert {(a.beneficiary, a.amount) for a in adjustments} == {(addr(1), 60), (addr(2), 40)}
        assert all(a.category is AdjustmentCategory.AMM_LIQUIDITY for a in adjustments)
        assert pool not in out.entries

    def test_self_held_shares_burned(self):
        pool = addr(1, "cc")
        shares = table({addr(1): 90, pool: 10}, token(9, "LP9"))
        t = table({pool: 100})
        adjustments, out = map_liquidity_pool(pool, t, shares)
        assert out.entries == {addr(1): Fraction(90)}
        assert out.excluded[(pool, ExclusionReason.SELF_MAPPED_BURN)] == 10
        assert len(adjustments) == 1

    def test_one_raw_unit_splits_exactly(self):
        pool = addr(1, "cc")
        shares = table({addr(1): 1, addr(2): 1}, token(9, "LP9"))
        t = table({pool: 1})
        _, out = map_liquidity_pool(pool, t, shares)
        assert out.entries == {addr(1): Fraction(1, 2), addr(2): Fraction(1, 2)}

    def test_empty_share_supply_raises_when_strict(self):
        pool = addr(1, "cc")
        shares = table({}, token(9, "LP9"))
        with pytest.raises(EmptyPool):
            map_liquidity_pool(pool, table({pool: 100}), shares)

    def test_conservation(self):
        pool = addr(1, "cc")
        shares = table({addr(1): 7, addr(2): 13, pool: 3}, token(9, "LP9"))
        t = table({pool: 101, addr(5): 9})
        _, out = map_liquidity_pool(pool, t, shares)
        assert out.total() + out.excluded_total() == 110


class TestMapLendingPool:
    def test_deposit_debt_and_reseller(self):
        pool = addr(1, "cc")
        receipts = table({addr(1): 100}, token(9, "CR9"))
        ledger = PositionLedger(pool, token().address, debts={addr(2): Fraction(30)})
        t = table({pool: 70, addr(3): 30})
        adjustments, out = map_lending_pool(pool, t, receipts, ledger)
        assert out.entries == {addr(1): Fraction(100), addr(2): Fraction(-30), addr(3): Fraction(30)}
        assert out.total() == 100
        amounts = sorted(a.amount for a in adjustments)
        assert amounts == [Fraction(-30), Fraction(100)]

    def test_single_depositor_no_borrows(self):
        pool = addr(1, "cc")
        receipts = table({addr(1): 55}, token(9, "CR9"))
        ledger = PositionLedger(pool, token().address)
        _, out = map_lending_pool(pool, table({pool: 80}), receipts, ledger)
        assert out.entries == {addr(1): Fraction(80)}

    def test_two_equal_depositors(self):
        pool = addr(1, "cc")
        receipts = table({addr(1): 10, addr(2): 10}, token(9, "CR9"))
        ledger = PositionLedger(pool, token().address)
        _, out = map_lending_pool(pool, table({pool: 100}), receipts, ledger)
        assert out.entries == {addr(1): Fraction(50), addr(2): Fraction(50)}

    def test_insolvent_pool_raises(self):
        pool = addr(1, "cc")
        receipts = table({addr(1): 100}, token(9, "CR9"))
        ledger = PositionLedger(pool, token().address, debts={addr(2): Fraction(30)})
        with pytest.raises(InsolventPool):
            map_lending_pool(pool, table({pool: -40, addr(9): 40}), receipts, ledger)


class TestMapStaking:
    def test_stakes_accruals_and_reserve(self):
        contract = addr(1, "cc")
        ledger = PositionLedger(
            contract,
            token().address,
            stakes={addr(1): Fraction(400), addr(2): Fraction(200)},
            accrued_rewards={addr(1): Fraction(10), addr(2): Fraction(5)},
        )
        adjustments, out = map_staking(contract, table({contract: 1000}), ledger)
        assert out.entries == {addr(1): Fraction(410), addr(2): Fraction(205)}
        assert out.excluded[(contract, ExclusionReason.FUTURE_REWARDS)] == 385
        assert len(adjustments) == 2

    def test_pure_reserve_fully_excluded(self):
        contract = addr(1, "cc")
        ledger = PositionLedger(contract, token().address)
        adjustments, out = map_staking(contract, table({contract: 777}), ledger)
        assert adjustments == []
        assert out.entries == {}
        assert out.excluded[(contract, ExclusionReason.FUTURE_REWARDS)] == 777

    def test_underfunded_books_raise(self):
        contract = addr(1, "cc")
        ledger = PositionLedger(contract, token().address, stakes={addr(1): Fraction(1000)})
        with pytest.raises(InsolventPool):
            map_staking(contract, table({contract: 999}), ledger)


class TestMapUnique:
    def test_explicit_owner_book(self):
        contract = addr(1, "cc")
        _, out = map_unique(contract, table({contract: 12}), {addr(1): 5, addr(2): 7})
        assert out.entries == {addr(1): Fraction(5), addr(2): Fraction(7)}

    def test_remainder_unmappable(self):
        contract = addr(1, "cc")
        adjustments, out = map_unique(contract, table({contract: 9}), {})
        assert adjustments == []
        assert out.excluded[(contract, ExclusionReason.UNMAPPABLE_CONTRACT)] == 9

    def test_over_allocated(self):
        contract = addr(1, "cc")
        with pytest.raises(OverAllocated):
            map_unique(contract, table({contract: 12}), {addr(1): 6, addr(2): 7})


class TestClassifyAdjustment:
    def make_adj(self, source) -> Adjustment:
        return Adjustment(token(), source, addr(5), Fraction(10), AdjustmentCategory.OTHER, 1)

    def test_same_protocol_staking_is_internal(self):
        contracts = ContractRegistry(
            {addr(1, "cc"): ContractEntry(kind=ContractKind.STAKING, protocol="cream")}
        )
        got = classify_adjustment(self.make_adj(addr(1, "cc")), contracts, "cream")
        assert got is AdjustmentCategory.INTERNAL_STAKING

    def test_other_protocol_staking_is_external(self):
        contracts = ContractRegistry(
            {addr(1, "cc"): ContractEntry(kind=ContractKind.STAKING, protocol="sushi")}
        )
        got = classify_adjustment(self.make_adj(addr(1, "cc")), contracts, "cream")
        assert got is AdjustmentCategory.EXTERNAL_STAKING

    @pytest.mark.parametrize(
        "kind, same_protocol, expected",
        [
            (ContractKind.STAKING, True, AdjustmentCategory.INTERNAL_STAKING),
            (ContractKind.STAKING, False, AdjustmentCategory.EXTERNAL_STAKING),
            (ContractKind.LIQUIDITY_POOL, True, AdjustmentCategory.AMM_LIQUIDITY),
            (ContractKind.LIQUIDITY_POOL, False, AdjustmentCategory.AMM_LIQUIDITY),
            (ContractKind.LENDING_POOL, True, AdjustmentCategory.LENDING_BORROWING),
            (ContractKind.LENDING_POOL, False, AdjustmentCategory.LENDING_BORROWING),
            (ContractKind.UNIQUE, True, AdjustmentCategory.OTHER),
            (ContractKind.UNIQUE, False, AdjustmentCategory.OTHER),
            (ContractKind.EXCLUDED_CONTRACT, True, AdjustmentCategory.OTHER),
            (ContractKind.EXCLUDED_CONTRACT, False, AdjustmentCategory.OTHER),
        ],
    )
    def test_kind_by_protocol_decision_table(self, kind, same_protocol, expected):
        share = token(9) if kind in (ContractKind.LIQUIDITY_POOL, ContractKind.LENDING_POOL) else None
        entry = ContractEntry(kind=kind, protocol="tok" if same_protocol else "other", share_token=share)
        assert contract_adjustment_category(entry, "tok") is expected

    def test_wrapper_category_override(self):
        entry = lp_entry(9, params={"category": "other"})
        assert contract_adjustment_category(entry, "amm") is AdjustmentCategory.OTHER

    def test_unregistered_source_rejected(self):
        with pytest.raises(ValueError):
            classify_adjustment(self.make_adj(addr(1, "cc")), ContractRegistry(), "x")


class TestRunIterativeMapping:
    def run(self, initial, labels=None, contracts=None, ledgers=None, shares=None, **kwargs):
        return run_iterative_mapping(
            initial,
            labels or LabelRegistry(),
            contracts or ContractRegistry(),
            ledgers or {},
            shares or {},
            **kwargs,
        )

    def test_eoa_only_table_is_a_fixpoint(self):
        t = table({1: 10, 2: 20})
        result = self.run(t)
        assert result.iterations == 1
        assert result.adjustments == ()
        assert result.table == t

    def test_exclusions_applied(self):
        labels = LabelRegistry(
            {
                addr(1, "bb"): LabelEntry(cls=LabelClass.CEX),
                addr(2, "bb"): LabelEntry(cls=LabelClass.BURNER),
                addr(3, "bb"): LabelEntry(cls=LabelClass.FTIA_VESTING),
            }
        )
        t = table({addr(1, "bb"): 10, addr(2, "bb"): 20, addr(3, "bb"): 30, addr(4): 40})
        result = self.run(t, labels=labels)
        assert result.table.entries == {addr(4): Fraction(40)}
        assert result.exclusions == {
            (addr(1, "bb"), ExclusionReason.CEX_CUSTODY): Fraction(10),
            (addr(2, "bb"), ExclusionReason.BURNER): Fraction(20),
            (addr(3, "bb"), ExclusionReason.FTIA_VESTING): Fraction(30),
        }

    def test_excluded_contract_reason_override(self):
        escrow = addr(1, "cc")
        contracts = ContractRegistry(
            {
                escrow: ContractEntry(
                    kind=ContractKind.EXCLUDED_CONTRACT,
                    protocol="p",
                    params={"reason": "non_circulating"},
                )
            }
        )
        result = self.run(table({escrow: 11, addr(2): 5}), contracts=contracts)
        assert result.exclusions == {(escrow, ExclusionReason.NON_CIRCULATING): Fraction(11)}

    def test_nested_chain_depths(self):
        # pool P's shares held by staking K; K's stakers are EOAs
        pool, staking = addr(1, "cc"), addr(2, "cc")
        share = token(9, "LP9")
        contracts = ContractRegistry(
            {
                pool: ContractEntry(ContractKind.LIQUIDITY_POOL, "amm", share),
                staking: ContractEntry(ContractKind.STAKING, "farm"),
            }
        )
        shares = {share.address: table({staking: 100}, share)}
        stakes = PositionLedger(staking, share.address, stakes={addr(5): Fraction(60), addr(6): Fraction(40)})

        def instrument_ledgers(contract, instrument):
            if contract == staking and instrument == share.address:
                return stakes
            return PositionLedger(contract, instrument)

        result = self.run(
            table({pool: 500}),
            contracts=contracts,
            shares=shares,
            instrument_ledgers=instrument_ledgers,
            token_protocol="tok",
        )
        assert result.table.entries == {addr(5): Fraction(300), addr(6): Fraction(200)}
        assert result.max_depth() == 2
        assert [a.depth for a in result.adjustments] == [1, 2, 2]

    def test_empty_pool_becomes_unmappable_with_audit(self):
        pool = addr(1, "cc")
        contracts = ContractRegistry({pool: lp_entry(9)})
        result = self.run(table({pool: 100, addr(2): 1}), contracts=contracts, shares={})
        assert result.exclusions == {(pool, ExclusionReason.UNMAPPABLE_CONTRACT): Fraction(100)}
        assert result.audit

    def test_cycle_detected(self):
        p1, p2 = addr(1, "cc"), addr(2, "cc")
        s1, s2 = token(11, "S1"), token(12, "S2")
        contracts = ContractRegistry(
            {
                p1: ContractEntry(ContractKind.LIQUIDITY_POOL, "a", s1),
                p2: ContractEntry(ContractKind.LIQUIDITY_POOL, "b", s2),
            }
        )
        shares = {s1.address: table({p2: 10}, s1), s2.address: table({p1: 10}, s2)}
        with pytest.raises(CycleDetected) as err:
            self.run(table({p1: 100}), contracts=contracts, shares=shares)
        assert err.value.path[0] == err.value.path[-1]

    def test_iteration_limit(self):
        # a straight custody chain longer than the cap, no cycle
        chain = [addr(i, "cc") for i in range(1, 8)]
        entries = {}
        ledgers = {}
        for i, contract in enumerate(chain):
            nxt = chain[i + 1] if i + 1 < len(chain) else addr(99)
            entries[contract] = ContractEntry(ContractKind.UNIQUE, "p")
            ledgers[contract] = PositionLedger(
                contract, token().address, deposits={nxt: Fraction(100)}
            )
        contracts = ContractRegistry(entries)
        with pytest.raises(IterationLimitExceeded):
            self.run(table({chain[0]: 100}), contracts=contracts, ledgers=ledgers, iteration_cap=3)
        result = self.run(table({chain[0]: 100}), contracts=contracts, ledgers=ledgers, iteration_cap=10)
        assert result.table.entries == {addr(99): Fraction(100)}

    def test_unknown_contract_above_threshold_fails(self):
        whale = addr(1, "ff")
        labels = LabelRegistry({whale: LabelEntry(cls=LabelClass.CONTRACT)})
        t = table({whale: 3, addr(2): 997})
        with pytest.raises(UnresolvedMajorHolder):
            self.run(t, labels=labels)

    def test_unknown_contract_dust_is_included(self):
        dust = addr(1, "ff")
        labels = LabelRegistry({dust: LabelEntry(cls=LabelClass.CONTRACT)})
        t = table({dust: 1, addr(2): 1999})
        result = self.run(t, labels=labels)
        assert result.table.entries[dust] == 1

    def test_window_leaves_small_rows_untouched(self):
        # rows beyond the window: unknown-contract dust and a CEX stay put,
        # a registered pool is still unwound
        labels = LabelRegistry(
            {
                addr(1, "ff"): LabelEntry(cls=LabelClass.CONTRACT),
                addr(2, "bb"): LabelEntry(cls=LabelClass.CEX),
            }
        )
        pool = addr(3, "cc")
        share = token(9, "LP9")
        contracts = ContractRegistry({pool: ContractEntry(ContractKind.LIQUIDITY_POOL, "amm", share)})
        shares = {share.address: table({addr(8): 10}, share)}
        entries = {addr(10 + i): 1000 + i for i in range(6)}
        entries[addr(1, "ff")] = 3
        entries[addr(2, "bb")] = 2
        entries[pool] = 1
        result = self.run(
            table(entries), labels=labels, contracts=contracts, shares=shares, top_window=5
        )
        assert result.table.entries[addr(1, "ff")] == 3  # unknown dust untouched
        assert result.table.entries[addr(2, "bb")] == 2  # sub-window CEX untouched
        assert pool not in result.table.entries  # mappable row still unwound
        assert result.table.entries[addr(8)] == 1

    def test_deferred_staking_waits_for_upstream_credits(self):
        # K's stake book is funded through two separate upstream contracts
        u1, u2, u3, staking = (addr(i, "cc") for i in range(1, 5))
        tok = token()
        contracts = ContractRegistry(
            {
                u1: ContractEntry(ContractKind.UNIQUE, "p"),
                u2: ContractEntry(ContractKind.UNIQUE, "p"),
                u3: ContractEntry(ContractKind.UNIQUE, "p"),
                staking: ContractEntry(ContractKind.STAKING, "p"),
            }
        )
        ledgers = {
            u1: PositionLedger(u1, tok.address, deposits={staking: Fraction(60)}),
            u2: PositionLedger(u2, tok.address, deposits={u3: Fraction(40)}),
            u3: PositionLedger(u3, tok.address, deposits={staking: Fraction(40)}),
            staking: PositionLedger(staking, tok.address, stakes={addr(9): Fraction(100)}),
        }
        result = self.run(table({u1: 60, u2: 40}), contracts=contracts, ledgers=ledgers)
        assert result.table.entries == {addr(9): Fraction(100)}

    def test_unfunded_staking_positions_fail_loudly(self):
        staking = addr(1, "cc")
        contracts = ContractRegistry({staking: ContractEntry(ContractKind.STAKING, "p")})
        ledgers = {staking: PositionLedger(staking, token().address, stakes={addr(9): Fraction(100)})}
        with pytest.raises(InsolventPool):
            self.run(table({staking: 60}), contracts=contracts, ledgers=ledgers)

    def test_forced_lending_visit_maps_fully_lent_pool(self):
        pool = addr(1, "cc")
        receipt = token(9, "CR9")
        contracts = ContractRegistry({pool: ContractEntry(ContractKind.LENDING_POOL, "p", receipt)})
        ledgers = {pool: PositionLedger(pool, token().address, debts={addr(2): Fraction(100)})}
        shares = {receipt.address: table({addr(1): 100}, receipt)}
        result = self.run(
            table({addr(3): 100}),  # borrower resold everything to addr(3)
            contracts=contracts,
            ledgers=ledgers,
            shares=shares,
            force_visit=[pool],
        )
        assert result.table.entries == {
            addr(1): Fraction(100),
            addr(2): Fraction(-100),
            addr(3): Fraction(100),
        }

    def test_idempotent_and_deterministic(self):
        pool, staking = addr(1, "cc"), addr(2, "cc")
        share = token(9, "LP9")
        labels = LabelRegistry({addr(7, "bb"): LabelEntry(cls=LabelClass.CEX)})
        contracts = ContractRegistry(
            {
                pool: ContractEntry(ContractKind.LIQUIDITY_POOL, "amm", share),
                staking: ContractEntry(ContractKind.STAKING, "farm"),
            }
        )
        shares = {share.address: table({staking: 70, addr(5): 30}, share)}
        stakes = PositionLedger(staking, share.address, stakes={addr(6): Fraction(70)})

        def instrument_ledgers(contract, instrument):
            if contract == staking and instrument == share.address:
                return stakes
            return PositionLedger(contract, instrument)

        initial = table({pool: 900, addr(7, "bb"): 50, addr(8): 50})
        run = lambda t: run_iterative_mapping(
            t, labels, contracts, {}, shares, instrument_ledgers=instrument_ledgers
        )
        first = run(initial)
        second = run(initial)
        assert json.dumps(first.to_jsonable(), sort_keys=True) == json.dumps(
            second.to_jsonable(), sort_keys=True
        )
        again = run(first.table)
        assert again.adjustments == ()
        assert again.exclusions == {}
        # conservation across the whole run, debts signed
        total_new_exclusions = sum(first.exclusions.values(), Fraction(0))
        assert first.table.total() + total_new_exclusions == initial.total()

    def test_adjustments_sorted_by_depth_source_beneficiary(self):
        pool = addr(1, "cc")
        share = token(9, "LP9")
        contracts = ContractRegistry({pool: ContractEntry(ContractKind.LIQUIDITY_POOL, "amm", share)})
        shares = {share.address: table({addr(5): 1, addr(3): 1, addr(4): 1}, share)}
        result = self.run(table({pool: 99}), contracts=contracts, shares=shares)
        keys = [(a.depth, a.source, a.beneficiary) for a in result.adjustments]
        assert keys == sorted(keys)
