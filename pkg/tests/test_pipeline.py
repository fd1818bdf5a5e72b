"""End-to-end pipeline runs on synthetic scenarios."""

from __future__ import annotations

import random
from fractions import Fraction

import pytest

from tokenmap.errors import UnresolvedMajorHolder
from tokenmap.ingest import (
    ContractEntry,
    ContractKind,
    ContractRegistry,
    EventKind,
    LabelRegistry,
    LedgerEvent,
    sort_events,
)
from tokenmap.mapper import MappingResult, run_iterative_mapping
from tokenmap.model import Address, ExclusionReason, Snapshot, TokenId, ZERO_ADDRESS
from tokenmap.pipeline import EventIndex, SnapshotContext, map_snapshot
from tokenmap.synth import (
    ScenarioSpec,
    complexity_chain_fixture,
    coverage_fixture,
    generate,
    paper_chain_fixture,
)
from conftest import addr, token


def assert_matches_truth(scenario, result_by_token):
    for tok in scenario.tokens:
        truth = scenario.truth[tok.address]
        result = result_by_token[tok.address]
        assert dict(result.table.entries) == truth.ownership, tok.symbol
        got_exclusions: dict[Address, Fraction] = {}
        for (a, _), v in result.exclusions.items():
            got_exclusions[a] = got_exclusions.get(a, Fraction(0)) + v
        assert got_exclusions == truth.exclusions, tok.symbol
        got_adjustments: dict = {}
        for adj in result.adjustments:
            got_adjustments[adj.category] = got_adjustments.get(adj.category, Fraction(0)) + abs(adj.amount)
        assert got_adjustments == truth.expected_adjustments, tok.symbol


def map_scenario(scenario) -> dict[Address, MappingResult]:
    return {
        tok.address: map_snapshot(
            scenario.events,
            scenario.labels,
            scenario.contracts,
            tok,
            scenario.snapshot,
            token_protocol=scenario.token_protocols[tok.address],
        )
        for tok in scenario.tokens
    }


class TestPaperChain:
    def test_three_mapping_layers_reach_stakers(self):
        scenario = paper_chain_fixture()
        tka = scenario.tokens[0]
        result = map_scenario(scenario)[tka.address]
        assert result.max_depth() == 3
        assert sorted(set(a.depth for a in result.adjustments)) == [1, 2, 3]
        assert_matches_truth(scenario, map_scenario(scenario))

    def test_reward_token_side(self):
        scenario = paper_chain_fixture()
        tkb = scenario.tokens[1]
        result = map_scenario(scenario)[tkb.address]
        reasons = {reason for (_, reason) in result.exclusions}
        assert reasons == {ExclusionReason.FUTURE_REWARDS}


class TestComplexityChain:
    def test_wrapping_complexity_is_four(self):
        from tokenmap.metrics import relevant_adjustments, relevant_supply, wrapping_complexity

        scenario = complexity_chain_fixture()
        result = map_scenario(scenario)[scenario.tokens[0].address]
        total, _ = wrapping_complexity(relevant_adjustments(result), relevant_supply(result.table))
        assert total == 4


class TestCoverage:
    def test_unregistered_contract_above_threshold_fails(self):
        scenario = coverage_fixture(Fraction(2, 1000))
        with pytest.raises(UnresolvedMajorHolder):
            map_scenario(scenario)

    def test_dust_contract_included(self):
        scenario = coverage_fixture(Fraction(5, 10000))
        result = map_scenario(scenario)[scenario.tokens[0].address]
        unknown = [a for a in result.table.entries if a.startswith("0xff")]
        assert len(unknown) == 1


class TestRandomScenarios:
    @pytest.mark.parametrize("seed", range(12))
    def test_oracle_equivalence(self, seed):
        spec = ScenarioSpec(
            seed=seed,
            n_eoas=10 + seed * 11,
            n_tokens=1 + seed % 3,
            max_depth=seed % 6,
            pool_mix={
                "liquidity_pool": 0.3,
                "lending_pool": 0.25,
                "staking": 0.2,
                "wrapper": 0.1,
                "unique": 0.15,
            },
        )
        scenario = generate(spec)
        assert_matches_truth(scenario, map_scenario(scenario))

    def test_shuffled_events_same_result(self):
        scenario = generate(ScenarioSpec(seed=5, n_eoas=40, n_tokens=1, max_depth=3))
        tok = scenario.tokens[0]
        shuffled = scenario.events[:]
        random.Random(99).shuffle(shuffled)
        a = map_snapshot(scenario.events, scenario.labels, scenario.contracts, tok,
                         scenario.snapshot, token_protocol=tok.symbol.lower())
        b = map_snapshot(sort_events(shuffled), scenario.labels, scenario.contracts, tok,
                         scenario.snapshot, token_protocol=tok.symbol.lower())
        assert a.to_jsonable() == b.to_jsonable()

    def test_rerun_on_output_is_identity(self):
        scenario = generate(ScenarioSpec(seed=8, n_eoas=35, n_tokens=1, max_depth=4))
        tok = scenario.tokens[0]
        context = SnapshotContext(scenario.events, scenario.labels, scenario.contracts, scenario.snapshot)
        first = map_snapshot(scenario.events, scenario.labels, scenario.contracts, tok,
                             scenario.snapshot, token_protocol=tok.symbol.lower(), context=context)
        again = run_iterative_mapping(
            first.table,
            context.labels,
            context.contracts,
            {},
            context.share_table,
            instrument_ledgers=context.position_ledger,
            token_protocol=tok.symbol.lower(),
        )
        assert again.adjustments == ()
        assert again.exclusions == {}


class TestMigration:
    def test_staked_share_migration_is_honored(self):
        tok = token(1, "TKM")
        lp1 = token(11, "LP1")
        lp2 = token(12, "LP2")
        e1 = addr(1)
        p1, p2, farm = addr(1, "cc"), addr(2, "cc"), addr(3, "cc")
        seq = [
            # deposit underlying into pool 1, receive LP1
            (EventKind.TRANSFER, tok.address, 1000, dict(src=ZERO_ADDRESS, dst=e1)),
            (EventKind.TRANSFER, tok.address, 1000, dict(src=e1, dst=p1)),
            (EventKind.TRANSFER, lp1.address, 1000, dict(src=ZERO_ADDRESS, dst=e1)),
            # stake LP1
            (EventKind.TRANSFER, lp1.address, 1000, dict(src=e1, dst=farm)),
            (EventKind.STAKE, lp1.address, 1000, dict(contract=farm, owner=e1)),
            # migrate: LP1 burned, liquidity moves to pool 2, LP2 minted to the farm 1:2
            (EventKind.TRANSFER, lp1.address, 1000, dict(src=farm, dst=ZERO_ADDRESS)),
            (EventKind.TRANSFER, tok.address, 1000, dict(src=p1, dst=p2)),
            (EventKind.TRANSFER, lp2.address, 2000, dict(src=ZERO_ADDRESS, dst=farm)),
            (EventKind.MIGRATE, lp2.address, 2000, dict(contract=farm, src=lp1.address)),
        ]
        events = [
            LedgerEvent(kind=kind, token=t, block=i + 1, log_index=0, amount=amount, **fields)
            for i, (kind, t, amount, fields) in enumerate(seq)
        ]
        contracts = ContractRegistry(
            {
                p1: ContractEntry(ContractKind.LIQUIDITY_POOL, "old-amm", lp1),
                p2: ContractEntry(ContractKind.LIQUIDITY_POOL, "new-amm", lp2),
                farm: ContractEntry(
                    ContractKind.STAKING,
                    "farm",
                    params={"staked_token": lp1.address, "migrated_share_token": lp2.address},
                ),
            }
        )
        result = map_snapshot(events, LabelRegistry(), contracts, tok, Snapshot(100, "2020-09-15"))
        assert result.table.entries == {e1: Fraction(1000)}
        assert result.max_depth() == 2


class TestEventIndex:
    def test_partitions_cover_stream(self):
        scenario = generate(ScenarioSpec(seed=3, n_eoas=20, max_depth=3))
        index = EventIndex(scenario.events)
        partitioned = sum(len(v) for v in index.transfers.values()) + sum(
            len(v) for v in index.positions.values()
        )
        assert partitioned == len(scenario.events)

    def test_ledger_merge_is_sorted(self):
        scenario = generate(ScenarioSpec(seed=4, n_eoas=20, max_depth=3))
        index = EventIndex(scenario.events)
        for contract in scenario.contracts.addresses():
            merged = index.events_for_ledger(contract, scenario.tokens[0].address)
            keys = [e.sort_key for e in merged]
            assert keys == sorted(keys)
