import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ftllb.graph import Graph, sample_gnp
from ftllb.llb import (
    ACTIVE,
    SILENT,
    InvalidRatio,
    LLBProtocol,
    config_with_fallback,
    derive_config,
    fallback_tau2,
    fault_tolerant_llb,
    fix_outliers,
    llb_update,
    median_of,
    run_llb,
)
from ftllb.simnet import (
    RoundEngine,
    ScriptedCrash,
    ScriptedOmission,
    crash_adversary,
    omission_adversary,
)


class TestLLBUpdate:
    def test_equal_inputs_are_fixed(self):
        assert llb_update(0.7, [0.7, 0.7, 0.7], d_max=3) == pytest.approx(0.7, abs=1e-15)

    def test_hand_evaluated_example(self):
        # one zero received at d_max = 2: 0/4 + (3/4) * 1
        assert llb_update(1.0, [0.0], d_max=2) == 0.75

    def test_empty_inbox_keeps_self(self):
        assert llb_update(0.5, [], d_max=7) == 0.5
        assert llb_update(0.5, [], d_max=1) == 0.5

    @settings(max_examples=60, deadline=None)
    @given(
        st.floats(min_value=0, max_value=1),
        st.lists(st.floats(min_value=0, max_value=1), max_size=12),
        st.integers(min_value=6, max_value=200),
    )
    def test_coefficients_sum_to_one(self, x_self, received, d_max):
        # feeding all-ones measures the coefficient sum directly
        total = llb_update(1.0, [1.0] * len(received), d_max)
        assert abs(total - 1.0) <= 1e-12

    @settings(max_examples=60, deadline=None)
    @given(
        st.floats(min_value=0, max_value=1),
        st.lists(st.floats(min_value=0, max_value=1), min_size=1, max_size=12),
    )
    def test_stays_in_hull(self, x_self, received):
        out = llb_update(x_self, received, d_max=len(received) + 3)
        lo = min([x_self] + received)
        hi = max([x_self] + received)
        assert lo - 1e-12 <= out <= hi + 1e-12


class TestMedian:
    def test_odd(self):
        assert median_of([3.0, 1.0, 2.0]) == 2.0

    def test_even_uses_mean_of_middles(self):
        assert median_of([4.0, 1.0, 2.0, 3.0]) == 2.5

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.floats(min_value=-5, max_value=5), min_size=1, max_size=15))
    def test_within_hull(self, values):
        assert min(values) <= median_of(values) <= max(values)


class TestDeriveConfig:
    def test_regular_at_e32(self):
        cfg = derive_config(5, 5, math.exp(32))
        assert cfg.tau1 == 1024
        from ftllb.llb import shrink_factor

        assert shrink_factor(5, 5) == pytest.approx(14 / 15)

    def test_loose_ratio_rejected(self):
        with pytest.raises(InvalidRatio):
            derive_config(9, 10, 64)

    def test_tau2_at_n2(self):
        cfg = derive_config(3, 3, 2)
        assert cfg.tau2 == math.ceil(math.log(2) / math.log(15 / 14)) == 11

    def test_fallback_uses_14_15(self):
        cfg = config_with_fallback(4, 5, 256)
        assert cfg.tau2 == fallback_tau2(256)
        assert cfg.tau1 == math.ceil(32 * (5 / 4) ** 2 * math.log(256))

    def test_explicit_overrides(self):
        cfg = derive_config(4, 5, 64, tau1=10, tau2=7)
        assert (cfg.tau1, cfg.tau2) == (10, 7)


class TestFaultFreeRuns:
    def test_k8_indicator_converges(self):
        g = Graph.complete(8)
        cfg = derive_config(7, 7, 8)
        b = [1.0] + [0.0] * 7
        run = fault_tolerant_llb(g, b, cfg)
        assert all(o is not None and o.type == ACTIVE for o in run.outcomes())
        # after tau1 averaging rounds the loads sit within 1/n of the mean
        assert np.max(np.abs(run.x_main[cfg.tau1] - 1 / 8)) <= 1 / 8
        assert np.max(np.abs(run.x_final - 1 / 8)) <= 1 / 8

    def test_constant_inputs_are_fixed_point(self):
        g = Graph.complete(6)
        cfg = derive_config(5, 5, 6)
        run = fault_tolerant_llb(g, [0.25] * 6, cfg)
        assert np.all(run.x_main == 0.25)
        assert np.all(run.x_fix == 0.25)
        assert all(o.type == ACTIVE for o in run.outcomes())

    def test_mass_is_conserved_fault_free(self):
        g = Graph.complete(16)
        cfg = derive_config(15, 15, 16)
        rng = np.random.default_rng(5)
        b = rng.random(16)
        run = fault_tolerant_llb(g, b, cfg)
        sums = run.x_main.sum(axis=1)
        assert np.allclose(sums, sums[0], atol=1e-9)


class TestFixOutliers:
    def test_in_range_inputs_stay_in_range(self):
        g = Graph.complete(10)
        cfg = derive_config(9, 9, 10)
        x0 = np.linspace(0.45, 0.55, 10)
        run = fix_outliers(g, x0, cfg)
        assert run.active.all()
        assert np.all(run.x_final >= 0.45 - 1e-12)
        assert np.all(run.x_final <= 0.55 + 1e-12)

    def test_single_outlier_snaps_to_median(self):
        g = Graph.complete(16)
        cfg = derive_config(15, 15, 16)
        x0 = np.zeros(16)
        x0[3] = 1.0
        run = fix_outliers(g, x0, cfg)
        # after one median round the outlier reads fifteen zeros
        assert np.all(run.x_fix[1] == 0.0)
        assert np.all(run.x_final == 0.0)
        assert run.active.all()

    def test_starved_node_turns_silent(self):
        # drop 4 of node 0's 9 inbound links every fixing round: 5 < (2/3) * 9
        g = Graph.complete(10)
        cfg = derive_config(9, 9, 10)
        drops = {
            r: [(u, 0) for u in (1, 2, 3, 4)] for r in range(1, cfg.tau2 + 1)
        }
        adv = ScriptedOmission([0], drops)
        run = fix_outliers(g, np.linspace(0, 1, 10), cfg, adversary=adv)
        assert run.silent[0]
        assert not run.silent[1:].any()
        out = run.outcomes()
        assert out[0].type == SILENT
        assert all(o.type == ACTIVE for o in out[1:])


class TestCrashRuns:
    def test_active_set_bound_on_k16(self):
        # Lemma-3.6-style precondition holds comfortably on K_16 for t = 2
        g = Graph.complete(16)
        cfg = derive_config(15, 15, 16)
        b = np.array([v % 2 for v in range(16)], dtype=float)
        for seed in range(5):
            adv = crash_adversary("random", budget=2)
            run = fault_tolerant_llb(g, b, cfg, adversary=adv, seed=seed)
            assert int(run.active.sum()) >= 16 - 3
            assert run.range_report.violations == 0

    def test_crashed_node_freezes(self):
        g = Graph.complete(8)
        cfg = derive_config(7, 7, 8)
        adv = ScriptedCrash({3: [2]})
        run = fault_tolerant_llb(g, np.linspace(0, 1, 8), cfg, adversary=adv)
        assert not run.live[2]
        assert run.outcomes()[2] is None
        # frozen at the value computed in its crash round
        assert run.x_final[2] == run.x_main[2][2]
        assert np.all(run.x_main[3:, 2] == run.x_main[2, 2])


class TestValueRange:
    @pytest.mark.parametrize(
        "maker",
        [
            lambda: crash_adversary("random", 3),
            lambda: crash_adversary("targeted_extreme", 3),
            lambda: crash_adversary("eclipse", 3),
            lambda: omission_adversary("random_drops", 3),
            lambda: omission_adversary("partition_flicker", 3),
            lambda: omission_adversary("silence_inbound", 3),
        ],
    )
    def test_no_violations_under_any_adversary(self, maker):
        g = sample_gnp(24, 0.7, rng=1)
        degs = g.degrees()
        cfg = config_with_fallback(float(degs.min()), float(degs.max()), 24)
        rng = np.random.default_rng(0)
        b = rng.random(24)
        for seed in range(3):
            run = fault_tolerant_llb(g, b, cfg, adversary=maker(), seed=seed)
            assert run.range_report.violations == 0
            lo, hi = b.min(), b.max()
            assert np.all(run.x_final >= lo - 1e-9)
            assert np.all(run.x_final <= hi + 1e-9)


def reference_run(graph, inputs, cfg, adversary, seed):
    proto = LLBProtocol(cfg, inputs)
    eng = RoundEngine(graph, proto, adversary=adversary, seed=seed)
    states = eng.run(cfg.rounds)
    return eng, np.array([s.x for s in states]), np.array(
        [s.type == SILENT for s in states]
    )


class TestEngineEquivalence:
    """The vectorized runner and the per-message reference engine must agree."""

    @pytest.mark.parametrize(
        "adv_maker",
        [
            lambda: None,
            lambda: crash_adversary("random", 3),
            lambda: crash_adversary("targeted_extreme", 2),
            lambda: crash_adversary("eclipse", 3),
            lambda: omission_adversary("random_drops", 3),
            lambda: omission_adversary("partition_flicker", 2),
            lambda: omission_adversary("silence_inbound", 2),
        ],
    )
    def test_same_trace_both_engines(self, adv_maker):
        g = sample_gnp(20, 0.6, rng=9)
        degs = g.degrees()
        cfg = config_with_fallback(float(degs.min()), float(degs.max()), 20)
        rng = np.random.default_rng(2)
        b = rng.random(20)
        for seed in (0, 1):
            eng, x_ref, silent_ref = reference_run(g, b, cfg, adv_maker(), seed)
            run = fault_tolerant_llb(g, b, cfg, adversary=adv_maker(), seed=seed)
            assert eng.ctx.faulted == run.faulted
            np.testing.assert_array_equal(np.array(eng.ctx.live), run.live)
            live = run.live
            np.testing.assert_array_equal(silent_ref[live], run.silent[live])
            np.testing.assert_allclose(x_ref[live], run.x_final[live], atol=1e-12)
            assert eng.ctx.metrics.messages_sent == run.metrics.messages_sent
            assert eng.ctx.metrics.messages_dropped == run.metrics.messages_dropped


class TestDeterminism:
    def test_identical_seed_identical_run(self):
        g = sample_gnp(32, 0.5, rng=4)
        degs = g.degrees()
        cfg = config_with_fallback(float(degs.min()), float(degs.max()), 32)
        b = np.random.default_rng(1).random(32)
        a = fault_tolerant_llb(g, b, cfg, adversary=crash_adversary("random", 4), seed=11)
        c = fault_tolerant_llb(g, b, cfg, adversary=crash_adversary("random", 4), seed=11)
        assert a.x_final.tobytes() == c.x_final.tobytes()
        assert np.array_equal(a.silent, c.silent)
        assert np.array_equal(a.live, c.live)
