import math

import numpy as np
import pytest

from ftllb.protocols import (
    BoundaryLog,
    ConsensusConfig,
    CountingResult,
    InvalidDensity,
    SetGraphConfig,
    ae_counting,
    check_agreement_persistence,
    consensus_crash,
    consensus_omission,
    decide_threshold,
    set_graph,
    set_graph_probability,
)
from ftllb.simnet import (
    ScriptedCrash,
    SimContext,
    crash_adversary,
    omission_adversary,
)


class TestSetGraphProbability:
    def test_solves_quadratic(self):
        q, p = set_graph_probability(256, 8.0)
        assert 2 * p - p * p == pytest.approx(q, abs=1e-12)
        assert 0 < p < 1

    def test_q_above_one_rejected(self):
        with pytest.raises(InvalidDensity):
            set_graph_probability(64, 8.0)

    def test_theory_constants_refused_at_desk_scale(self):
        with pytest.raises(InvalidDensity):
            set_graph_probability(1024, 2**15)

    def test_config_helper(self):
        cfg = SetGraphConfig.for_n(256, 8.0)
        assert cfg.q == pytest.approx(8 * math.log(256) * math.log(math.log(256)) ** 2 / 255)


class TestSetGraph:
    def test_p_one_gives_complete_union(self):
        ctx = SimContext(12, seed=0)
        res = set_graph(ctx, p=1.0)
        expect = ~np.eye(12, dtype=bool)
        assert np.array_equal(res.union, expect)
        assert np.array_equal(res.sends, expect)
        g = res.union_graph()
        assert g.num_edges == 12 * 11 // 2

    def test_fault_free_union_is_symmetric_and_fair(self):
        # aggregate edge frequency across seeds within 3 sigma of q
        n, c2, seeds = 256, 8.0, 60
        q, p = set_graph_probability(n, c2)
        pairs = n * (n - 1) // 2
        total = 0
        for seed in range(seeds):
            ctx = SimContext(n, seed=seed)
            res = set_graph(ctx, p)
            assert np.array_equal(res.union, res.union.T)
            assert np.array_equal(res.sends, res.sends.T)  # fault-free reciprocity
            total += int(np.triu(res.union, 1).sum())
        freq = total / (pairs * seeds)
        sigma = math.sqrt(q * (1 - q) / (pairs * seeds))
        assert abs(freq - q) <= 3 * sigma

    def test_crashed_node_has_no_links(self):
        # crash during the handshake with empty delivered subset
        ctx = SimContext(16, seed=1, adversary=ScriptedCrash({1: [5]}))
        res = set_graph(ctx, p=0.5)
        assert not res.union[5].any()
        assert not res.union[:, 5].any()
        assert not res.sends[5].any()
        assert ctx.faulted == {5}

    def test_costs_one_round_plus_picks(self):
        ctx = SimContext(32, seed=2)
        res = set_graph(ctx, p=0.3)
        assert ctx.metrics.rounds == 1
        assert ctx.metrics.messages_sent == res.picks


class TestDecideThreshold:
    def test_extremes(self):
        rng = np.random.default_rng(0)
        assert decide_threshold(0.0, 0.1, rng) == 0
        assert decide_threshold(1.0, 0.1, rng) == 1

    def test_band_edges_are_strict(self):
        rng = np.random.default_rng(0)
        assert decide_threshold(0.5 - 0.02, 0.01, rng) == 0
        assert decide_threshold(0.5 + 0.02, 0.01, rng) == 1

    def test_middle_band_replays_the_stream(self):
        a = decide_threshold(0.5, 0.01, np.random.default_rng(77))
        b = decide_threshold(0.5, 0.01, np.random.default_rng(77))
        assert a == b
        assert a in (0, 1)


class TestAgreementPersistence:
    @staticmethod
    def log_from(mask_rows, value_rows):
        log = BoundaryLog()
        for mask, vals in zip(mask_rows, value_rows):
            log.append(np.array(mask, dtype=bool), np.array(vals, dtype=float))
        return log

    def test_persistent_agreement_passes(self):
        log = self.log_from(
            [[1, 1, 1], [1, 1, 1], [1, 1, 0]],
            [[0, 1, 0], [1, 1, 1], [1, 1, 0]],
        )
        assert check_agreement_persistence(log)

    def test_broken_agreement_detected(self):
        log = self.log_from(
            [[1, 1, 1], [1, 1, 1]],
            [[1, 1, 1], [1, 0, 1]],
        )
        assert not check_agreement_persistence(log)

    def test_value_flip_detected(self):
        log = self.log_from(
            [[1, 1], [1, 1]],
            [[1, 1], [0, 0]],
        )
        assert not check_agreement_persistence(log)


class TestCounting:
    def test_all_zero_flags(self):
        res = ae_counting([0] * 128, c2=8.0, seed=0)
        assert all(e == 0 for e in res.estimates)
        assert res.range_violations == 0

    def test_all_one_flags(self):
        res = ae_counting([1] * 128, c2=8.0, seed=0)
        assert all(e == 128 for e in res.estimates)

    def test_fault_free_split_is_exact(self):
        flags = [1] * 40 + [0] * 88
        res = ae_counting(flags, c2=8.0, seed=3)
        assert res.returned() == 128
        assert all(abs(e - 40) <= 1 for e in res.estimates)

    def test_crash_adversary_counting(self):
        n, t = 128, 4
        flags = np.zeros(n, dtype=int)
        flags[:32] = 1
        for seed in range(3):
            res = ae_counting(
                flags, c2=8.0, seed=seed, adversary=crash_adversary("random", t)
            )
            assert res.returned() >= n - 3 * t
            assert res.range_violations == 0
            assert len(res.faulted) <= t


def crash_cfg(n=64, t=0, **kw):
    return ConsensusConfig.crash(n, t, c1=4.0, c2=4.0, **kw)


def omission_cfg(n=128, t=0):
    return ConsensusConfig.omission(n, t, c1=4.0, c2=4.0)


class TestConsensusConfig:
    def test_crash_fields(self):
        cfg = ConsensusConfig.crash(128, 16)
        ln = math.log(128)
        assert cfg.iterations == math.ceil(4 * math.sqrt(128 * ln))
        assert cfg.dissemination_rounds == 40 * math.ceil(ln) + 1
        assert cfg.threshold_margin == pytest.approx(math.sqrt(ln / 128) / 40)
        assert cfg.inquiry_count == math.ceil(10 * ln)

    def test_omission_fields(self):
        cfg = ConsensusConfig.omission(256, 4)
        ln = math.log(256)
        assert cfg.iterations == math.ceil(8 * max(4 * ln / 16, ln))
        assert cfg.threshold_margin == pytest.approx(math.sqrt(ln / 256) / 12)
        assert cfg.inquiry_count == math.ceil(11 * 8 * ln * math.log(ln) ** 2 * 4) + 1

    def test_omission_zero_budget_inquiry(self):
        assert ConsensusConfig.omission(256, 0).inquiry_count == 1


class TestConsensusCrash:
    def test_unanimous_inputs_never_flip_coins(self):
        cfg = crash_cfg(64, t=8)
        for value in (0, 1):
            res = consensus_crash(
                [value] * 64, cfg, seed=1, adversary=crash_adversary("random", 8)
            )
            assert res.agreed and res.valid
            assert res.decided_value == value
            assert res.coin_iterations == 0
            assert res.persistence_ok
            assert res.range_violations == 0

    def test_fault_free_split_agrees(self):
        cfg = crash_cfg(64, t=0)
        inputs = [v % 2 for v in range(64)]
        for seed in range(3):
            res = consensus_crash(inputs, cfg, seed=seed)
            assert res.agreed and res.valid
            assert res.decided_value in (0, 1)
            assert res.persistence_ok
            assert all(d is not None for d in res.decisions)

    @pytest.mark.parametrize("strategy", ["random", "targeted_extreme", "eclipse"])
    def test_adversarial_split(self, strategy):
        cfg = crash_cfg(64, t=8)
        inputs = [v % 2 for v in range(64)]
        for seed in range(2):
            res = consensus_crash(
                inputs, cfg, seed=seed, adversary=crash_adversary(strategy, 8)
            )
            assert res.agreed and res.valid
            assert res.persistence_ok
            assert res.range_violations == 0
            assert len(res.faulted) <= 8
            # crashed nodes return nothing; correct nodes all decide
            for v, d in enumerate(res.decisions):
                if v not in res.faulted:
                    assert d == res.decided_value


class TestConsensusOmission:
    def test_unanimous_inputs(self):
        cfg = omission_cfg(128, t=4)
        res = consensus_omission(
            [1] * 128, cfg, seed=0, adversary=omission_adversary("random_drops", 4)
        )
        assert res.agreed and res.valid
        assert res.decided_value == 1
        assert res.coin_iterations == 0
        assert res.range_violations == 0

    def test_fault_free_split_agrees(self):
        cfg = omission_cfg(128, t=0)
        inputs = [v % 2 for v in range(128)]
        for seed in range(2):
            res = consensus_omission(inputs, cfg, seed=seed)
            assert res.agreed and res.valid
            assert res.suspected_count == 0
            assert res.persistence_ok

    @pytest.mark.parametrize(
        "strategy", ["random_drops", "partition_flicker", "silence_inbound"]
    )
    def test_adversarial_split(self, strategy):
        cfg = omission_cfg(128, t=2)
        inputs = [v % 2 for v in range(128)]
        res = consensus_omission(
            inputs, cfg, seed=5, adversary=omission_adversary(strategy, 2)
        )
        assert res.agreed and res.valid
        assert res.persistence_ok
        assert res.range_violations == 0
        # every node decides in the omission model (nobody halts)
        assert all(d is not None for d in res.decisions)
        vals = {d for v, d in enumerate(res.decisions) if v not in res.faulted}
        assert vals == {res.decided_value}
