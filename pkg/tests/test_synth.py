"""Scenario generation: determinism, conservation, and the dual-path
metric oracle."""

from __future__ import annotations

from fractions import Fraction

import pytest

from tokenmap.ingest import event_to_json
from tokenmap.metrics import (
    concentration_report,
    gini_500,
    relevant_supply,
    shorted_pct,
    top_n_share,
    top_pct_count,
)
from tokenmap.model import HolderTable
from tokenmap.synth import (
    GroundTruth,
    ScenarioSpec,
    complexity_chain_fixture,
    coverage_fixture,
    generate,
    oracle_metrics,
    paper_chain_fixture,
)

ALL_KINDS_MIX = {
    "liquidity_pool": 0.3,
    "lending_pool": 0.25,
    "staking": 0.2,
    "wrapper": 0.1,
    "unique": 0.15,
}


class TestSpecValidation:
    def test_mix_must_sum_to_one(self):
        with pytest.raises(ValueError):
            ScenarioSpec(seed=1, pool_mix={"liquidity_pool": 0.5})

    def test_unknown_mix_key_rejected(self):
        with pytest.raises(ValueError):
            ScenarioSpec(seed=1, pool_mix={"liquidity_pool": 0.5, "casino": 0.5})

    def test_bounds(self):
        with pytest.raises(ValueError):
            ScenarioSpec(seed=1, n_eoas=0)
        with pytest.raises(ValueError):
            ScenarioSpec(seed=1, max_depth=-1)


class TestGeneration:
    def test_same_seed_identical_bytes(self):
        spec = ScenarioSpec(seed=42, n_eoas=30, n_tokens=2, max_depth=3, pool_mix=ALL_KINDS_MIX)
        a, b = generate(spec), generate(spec)
        assert [event_to_json(e) for e in a.events] == [event_to_json(e) for e in b.events]
        assert a.labels == b.labels and a.contracts == b.contracts
        assert {k: v.ownership for k, v in a.truth.items()} == {k: v.ownership for k, v in b.truth.items()}

    def test_different_seeds_differ(self):
        a = generate(ScenarioSpec(seed=1, n_eoas=30, max_depth=2))
        b = generate(ScenarioSpec(seed=2, n_eoas=30, max_depth=2))
        assert [event_to_json(e) for e in a.events] != [event_to_json(e) for e in b.events]

    def test_depth_zero_truth_is_direct_balances(self):
        scenario = generate(ScenarioSpec(seed=7, n_eoas=3, n_tokens=1, max_depth=0))
        token = scenario.tokens[0]
        truth = scenario.truth[token.address]
        # replay balances independently from the emitted transfer events
        balances: dict = {}
        for event in scenario.events:
            if event.kind.value != "transfer" or event.token != token.address:
                continue
            if int(event.src, 16) != 0:
                balances[event.src] = balances.get(event.src, 0) - event.amount
            if int(event.dst, 16) != 0:
                balances[event.dst] = balances.get(event.dst, 0) + event.amount
        expected_included = {
            a: Fraction(v)
            for a, v in balances.items()
            if v and a not in truth.exclusions
        }
        assert truth.ownership == expected_included

    def test_truth_conserves_minted_supply(self):
        for seed in range(8):
            scenario = generate(
                ScenarioSpec(seed=seed, n_eoas=25, n_tokens=2, max_depth=4, pool_mix=ALL_KINDS_MIX)
            )
            for token in scenario.tokens:
                truth = scenario.truth[token.address]
                total = (
                    sum(truth.ownership.values(), Fraction(0))
                    + sum(truth.exclusions.values(), Fraction(0))
                    + truth.burned
                )
                assert total == truth.minted

    def test_checkpoints_are_increasing(self):
        scenario = generate(ScenarioSpec(seed=9, n_eoas=20, max_depth=3))
        assert scenario.checkpoints == sorted(scenario.checkpoints)
        assert scenario.checkpoints[-1] <= scenario.snapshot.block


class TestFixtures:
    def test_paper_chain_truth(self):
        scenario = paper_chain_fixture()
        tka = scenario.tokens[0]
        truth = scenario.truth[tka.address]
        owners = sorted(truth.ownership.values())
        assert owners == [Fraction(400), Fraction(600)]
        assert sum(truth.expected_adjustments.values(), Fraction(0)) == 3000

    def test_complexity_chain_truth(self):
        scenario = complexity_chain_fixture()
        truth = scenario.truth[scenario.tokens[0].address]
        assert sum(truth.relevant_adjustments.values(), Fraction(0)) == 4 * truth.relevant_supply()

    def test_coverage_fixture_share(self):
        scenario = coverage_fixture(Fraction(2, 1000))
        truth = scenario.truth[scenario.tokens[0].address]
        assert truth.relevant_supply() == 1_000_000


class TestOracleMetrics:
    def to_table(self, truth: GroundTruth) -> HolderTable:
        return HolderTable(truth.token, 1, entries=dict(truth.ownership))

    def test_uniform_truth_gini_zero(self):
        truth = generate(ScenarioSpec(seed=3, n_eoas=500, max_depth=0)).truth
        gt = next(iter(truth.values()))
        gt.ownership = {a: Fraction(10) for a in list(gt.ownership)[:500]}
        concentration, _ = oracle_metrics(gt)
        if len(gt.ownership) == 500:
            assert concentration.gini_500 == 0

    def test_single_owner_top5_everything(self):
        scenario = generate(ScenarioSpec(seed=5, n_eoas=1, max_depth=0))
        gt = scenario.truth[scenario.tokens[0].address]
        concentration, _ = oracle_metrics(gt)
        assert concentration.top_n_share[5] == 1

    def test_dual_implementation_agreement(self):
        for seed in (11, 12, 13):
            scenario = generate(
                ScenarioSpec(seed=seed, n_eoas=40, n_tokens=1, max_depth=3, pool_mix=ALL_KINDS_MIX)
            )
            gt = scenario.truth[scenario.tokens[0].address]
            t = self.to_table(gt)
            concentration, integration = oracle_metrics(gt)
            assert concentration.owner_count == len(t.positive_ranked())
            for n in (5, 10, 50, 100, 500):
                assert concentration.top_n_share[n] == top_n_share(t, n)
            assert concentration.top_pct_count[50] == top_pct_count(t, Fraction(1, 2))
            assert concentration.top_pct_count[99] == top_pct_count(t, Fraction(99, 100))
            assert concentration.gini_500 == gini_500(t)
            assert integration.shorted_pct == shorted_pct(t)
            assert integration.relevant_supply == relevant_supply(t)

    def test_scenario_write_round_trips(self, tmp_path):
        scenario = generate(ScenarioSpec(seed=21, n_eoas=10, max_depth=2))
        paths = scenario.write(tmp_path)
        assert all(p.exists() for p in paths.values())
        from tokenmap.ingest import load_events, load_registries

        events = load_events(paths["events"])
        assert [event_to_json(e) for e in events] == [event_to_json(e) for e in scenario.events]
        labels, contracts = load_registries(paths["labels"], paths["contracts"])
        assert contracts == scenario.contracts
