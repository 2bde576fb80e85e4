"""Consensus engine: round updates, conservation, termination, determinism."""

import dataclasses

import numpy as np
import pytest

from cemasim import (
    ConsumerParams,
    GeneratorParams,
    InvalidScenarioError,
    Scenario,
    build_uniform_weights,
    implied_prices,
    lambda_init,
    lambda_step,
    mismatch,
    power_step,
    run,
    solve_centralized,
    surplus_step,
)
from cemasim.engine import (
    TERMINATED_BY_MAX_ITERS,
    TERMINATED_BY_TOLERANCE,
    TERMINATED_DIVERGED,
)
from cemasim.presets import random_scenario, ring_digraph, table1_scenario


def _scenario(gens, cons, **kw):
    graph = ring_digraph(len(gens), len(cons))
    return Scenario(
        generators=tuple(gens),
        consumers=tuple(cons),
        graph=graph,
        weights=build_uniform_weights(graph),
        eta=kw.get("eta", 0.002),
        eps_m=kw.get("eps_m", 1e-8),
        eps_l=kw.get("eps_l", 1e-8),
        max_iters=kw.get("max_iters", 200000),
    )


class TestLambdaStep:
    def test_consensus_is_fixed_point(self):
        W = np.full((3, 3), 1.0 / 3.0)
        lam = np.array([4.2, 4.2, 4.2])
        out = lambda_step(lam, np.zeros(3), W, 0.5)
        np.testing.assert_allclose(out, lam, atol=1e-15)

    def test_two_node_arithmetic(self):
        W = np.full((2, 2), 0.5)
        out = lambda_step(np.array([0.0, 2.0]), np.array([1.0, 0.0]), W, 0.5)
        np.testing.assert_array_equal(out, [1.5, 1.0])

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            lambda_step(np.zeros(3), np.zeros(2), np.eye(3), 0.1)


class TestPowerStep:
    def test_zero_loss_variants_coincide(self):
        gens = [GeneratorParams(a=0.004, b=3.0, c=1.0, B=0.0, p_min=10.0, p_max=200.0),
                GeneratorParams(a=0.002, b=4.0, c=1.0, B=0.0, p_min=20.0, p_max=300.0)]
        cons = [ConsumerParams(w=12.0, alpha=0.05, p_min=10.0, p_max=100.0),
                ConsumerParams(w=9.0, alpha=0.08, p_min=10.0, p_max=80.0)]
        s = _scenario(gens, cons)
        lams = np.array([4.4, 5.1, 3.2, 6.0])
        np.testing.assert_array_equal(
            power_step(s, "original", lams), power_step(s, "corrected", lams)
        )

    def test_lower_clip_both_variants(self, table1):
        lams = np.full(4, 5.56)
        for variant in ("original", "corrected"):
            assert power_step(table1, variant, lams)[0] == 60.0

    def test_consumers_at_moderate_price(self, table1):
        out = power_step(table1, "corrected", np.full(4, 6.2))
        np.testing.assert_array_equal(out[2:], [100.34, 100.0])

    def test_unknown_variant(self, table1):
        with pytest.raises(ValueError):
            power_step(table1, "fixed", np.zeros(4))


class TestSurplusStep:
    def test_pure_mixing_conserves_sum(self, table1):
        rng = np.random.default_rng(5)
        Q = table1.weights.Q
        for _ in range(50):
            xi = rng.normal(size=4) * 10
            P = rng.uniform(60, 100, size=4)
            out = surplus_step(table1, Q, xi, P, P)
            assert out.sum() == pytest.approx(xi.sum(), abs=1e-12)

    def test_first_round_sum_equals_mismatch(self, table1):
        # xi(0) = 0 and P(0) = 0, so the first surplus vector must sum to the
        # round-1 power mismatch
        lam1 = lambda_step(
            np.array([5.999179318834632, 4.672422549517522, 7.49294, 0.0]),
            np.zeros(4), table1.weights.W, table1.eta,
        )
        P1 = power_step(table1, "corrected", lam1)
        xi1 = surplus_step(table1, table1.weights.Q, np.zeros(4), np.zeros(4), P1)
        assert xi1.sum() == pytest.approx(mismatch(P1, table1), abs=1e-12)

    def test_dimension_mismatch(self, table1):
        with pytest.raises(ValueError):
            surplus_step(table1, table1.weights.Q, np.zeros(3), np.zeros(4), np.zeros(4))


class TestRoundOneRegression:
    """Round-1 state of the benchmark run, generated once and pinned."""

    def test_corrected_round_one(self, table1):
        rec = run(table1, "corrected").trace[1]
        assert rec.k == 1
        np.testing.assert_array_equal(
            rec.lam,
            [3.5572006227840514, 6.054847289450718, 4.055120849839174, 4.497373106278211],
        )
        np.testing.assert_array_equal(rec.P, [60.0, 116.01221561645325, 100.34, 100.0])
        np.testing.assert_array_equal(
            rec.xi, [-59.244, -111.83997702305933, 100.34, 100.0]
        )
        assert rec.mismatch == 29.25602297694067
        assert rec.lambda_spread == 2.497646666666667

    def test_original_round_one(self, table1):
        rec = run(table1, "original").trace[1]
        np.testing.assert_array_equal(
            rec.lam,
            [3.5572006227840514, 6.054847289450718, 4.055120849839174, 4.497373106278211],
        )
        np.testing.assert_array_equal(rec.P, [60.0, 154.89707941524267, 100.34, 100.0])
        np.testing.assert_array_equal(
            rec.xi, [-59.244, -147.45921679971735, 100.34, 100.0]
        )

    def test_step_composition_reproduces_round_one(self, table1):
        # chaining the three step operations by hand must yield the same
        # round-1 row the engine records
        lam0 = np.array([lambda_init(table1.node_params(i)) for i in range(4)])
        lam1 = lambda_step(lam0, np.zeros(4), table1.weights.W, table1.eta)
        P1 = power_step(table1, "corrected", lam1)
        xi1 = surplus_step(table1, table1.weights.Q, np.zeros(4), np.zeros(4), P1)
        rec = run(table1, "corrected").trace[1]
        np.testing.assert_array_equal(lam1, rec.lam)
        np.testing.assert_array_equal(P1, rec.P)
        np.testing.assert_array_equal(xi1, rec.xi)


class TestRun:
    def test_corrected_reaches_oracle_optimum(self, table1):
        result = run(table1, "corrected")
        sol = solve_centralized(table1)
        assert result.terminated == TERMINATED_BY_TOLERANCE
        np.testing.assert_allclose(result.final_P, sol.P, atol=1e-3)
        lam = result.final_lambda
        assert abs(lam.mean() - sol.lam) <= 1e-6
        assert lam.max() - lam.min() <= 1e-6

    def test_original_misses_oracle_optimum(self, table1):
        result = run(table1, "original")
        sol = solve_centralized(table1)
        assert result.terminated == TERMINATED_BY_TOLERANCE
        gen_nodes = table1.generator_nodes
        for i in gen_nodes:
            assert abs(result.final_P[i] - sol.P[i]) > 1.0

    def test_pinned_scenario_exact_balance(self):
        # boxes force P = (128, 126) with net injection exactly matching
        B = 2.0 ** -13
        gen = GeneratorParams(a=0.01, b=1.0, c=0.0, B=B, p_min=128.0, p_max=128.0)
        con = ConsumerParams(w=10.0, alpha=0.05, p_min=126.0, p_max=126.0)
        s = _scenario([gen], [con], eta=0.01)
        result = run(s, "corrected")
        assert result.terminated == TERMINATED_BY_TOLERANCE
        np.testing.assert_array_equal(result.final_P, [128.0, 126.0])
        assert mismatch(result.final_P, s) == 0.0

    def test_large_gain_fails_to_converge(self, table1):
        s = dataclasses.replace(table1, eta=0.9, max_iters=3000)
        result = run(s, "corrected", trace_stride=500)
        assert result.terminated in (TERMINATED_BY_MAX_ITERS, TERMINATED_DIVERGED)

    def test_divergence_guard_on_overflowing_state(self):
        # valid parameters whose net injection overflows float range as soon
        # as the generator is pushed to its cap
        gen = GeneratorParams(a=1e-170, b=1.0, c=0.0, B=1e-170, p_min=1.0, p_max=1e160)
        con = ConsumerParams(w=1e155, alpha=1e-10, p_min=1e150, p_max=1e155)
        s = _scenario([gen], [con], max_iters=50)
        result = run(s, "original", trace_stride=1)
        assert result.terminated == TERMINATED_DIVERGED

    def test_invalid_scenario_rejected(self, table1):
        s = dataclasses.replace(table1, eta=2.0)
        with pytest.raises(InvalidScenarioError):
            run(s, "corrected")

    def test_trace_stride_keeps_endpoints(self, table1):
        result = run(table1, "corrected", trace_stride=100)
        ks = [rec.k for rec in result.trace]
        assert ks[0] == 0
        assert ks[-1] == result.rounds
        assert all(k % 100 == 0 or k == result.rounds for k in ks)

    def test_interleaved_node_kinds_reach_same_optimum(self, table1):
        # same four agents on an alternating ring: node indices change, the
        # per-agent dispatch must not
        kinds = ["generator", "consumer", "generator", "consumer"]
        edges = sorted({(i, i) for i in range(4)}
                       | {(i, (i + 1) % 4) for i in range(4)}
                       | {(i, (i - 1) % 4) for i in range(4)})
        from cemasim import Digraph

        graph = Digraph(n=4, edges=edges, node_kind=kinds)
        s = Scenario(generators=table1.generators, consumers=table1.consumers,
                     graph=graph, weights=build_uniform_weights(graph),
                     eta=table1.eta, eps_m=table1.eps_m, eps_l=table1.eps_l,
                     max_iters=table1.max_iters)
        result = run(s, "corrected")
        assert result.terminated == TERMINATED_BY_TOLERANCE
        sol = solve_centralized(table1)
        # interleaved node order: generators at 0, 2 and consumers at 1, 3
        np.testing.assert_allclose(
            result.final_P[[0, 2, 1, 3]], sol.P, atol=1e-6
        )

    def test_determinism_bit_identical(self, table1):
        r1 = run(table1, "corrected")
        r2 = run(table1, "corrected")
        assert r1.rounds == r2.rounds
        for a, b in zip(r1.trace, r2.trace):
            np.testing.assert_array_equal(a.lam, b.lam)
            np.testing.assert_array_equal(a.P, b.P)
            np.testing.assert_array_equal(a.xi, b.xi)


class TestConservationAndTermination:
    def test_surplus_tracks_mismatch_every_round(self, table1):
        for variant in ("original", "corrected"):
            result = run(table1, variant)
            assert result.max_conservation_gap <= 1e-9
            for rec in result.trace[1:]:
                assert abs(rec.xi.sum() - rec.mismatch) <= 1e-9

    def test_conservation_on_random_scenarios(self):
        for seed in range(8):
            s = random_scenario(seed)
            result = run(s, "corrected", trace_stride=10)
            assert result.terminated == TERMINATED_BY_TOLERANCE
            assert result.max_conservation_gap <= 1e-9

    def test_tolerance_bounds_final_mismatch(self, table1):
        result = run(table1, "corrected")
        n = table1.n_nodes
        assert abs(mismatch(result.final_P, table1)) <= n * table1.eps_m

    def test_by_tolerance_state_meets_both_thresholds(self, table1):
        result = run(table1, "corrected")
        assert result.terminated == TERMINATED_BY_TOLERANCE
        assert np.abs(result.final_xi).max() <= table1.eps_m
        # stride 1 keeps the second-to-last round for the lambda-change test
        assert np.abs(result.trace[-1].lam - result.trace[-2].lam).max() <= table1.eps_l

    def test_record_mismatch_matches_operation(self, table1):
        result = run(table1, "corrected", trace_stride=25)
        for rec in result.trace:
            assert rec.mismatch == mismatch(rec.P, table1)

    def test_consensus_spread_at_termination(self, table1):
        for variant in ("original", "corrected"):
            result = run(table1, variant)
            lam = result.final_lambda
            assert lam.max() - lam.min() <= 10 * table1.eps_l

    def test_fixed_point_prices_agree(self, table1):
        price_formula = {"original": "original", "corrected": "corrected"}
        for variant, formula in price_formula.items():
            result = run(table1, variant)
            gen_P = np.array([result.final_P[i] for i in table1.generator_nodes])
            prices = implied_prices(gen_P, table1, formula)
            assert prices.max() - prices.min() <= 1e-4


class TestTraceSerialization:
    def test_trace_csv_format_and_round_trip(self, table1, tmp_path):
        from cemasim.engine import write_trace_csv

        result = run(table1, "corrected", trace_stride=50)
        path = tmp_path / "trace.csv"
        write_trace_csv(result, table1, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "k,node_id,kind,lambda,P,xi"
        assert len(lines) == 1 + 4 * len(result.trace)
        # 17 significant digits round-trip the exact float
        k, node, kind, lam, P, xi = lines[5].split(",")
        assert (int(k), int(node), kind) == (result.trace[1].k, 0, "generator")
        assert float(lam) == result.trace[1].lam[0]
        assert float(P) == result.trace[1].P[0]
        assert float(xi) == result.trace[1].xi[0]

    def test_round_summary_csv(self, table1, tmp_path):
        from cemasim.engine import write_round_summary_csv

        result = run(table1, "corrected", trace_stride=50)
        path = tmp_path / "rounds.csv"
        write_round_summary_csv(result, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "k,mismatch,lambda_spread,max_abs_xi"
        assert len(lines) == 1 + len(result.trace)
        last = lines[-1].split(",")
        assert int(last[0]) == result.rounds
        assert abs(float(last[3])) <= table1.eps_m


class TestMismatch:
    def test_all_zero_power(self, table1):
        assert mismatch(np.zeros(4), table1) == 0.0

    def test_reference_dispatch_gap(self, table1):
        # the two-decimal reference dispatch oversupplies by about 0.2 MW
        value = mismatch(np.array([81.98, 124.80, 100.34, 100.0]), table1)
        assert value == pytest.approx(-0.20038631599999235, abs=1e-12)

    def test_balanced_state(self):
        B = 2.0 ** -13
        gen = GeneratorParams(a=0.01, b=1.0, c=0.0, B=B, p_min=128.0, p_max=128.0)
        con = ConsumerParams(w=10.0, alpha=0.05, p_min=126.0, p_max=126.0)
        s = _scenario([gen], [con])
        assert mismatch(np.array([128.0, 126.0]), s) == 0.0
