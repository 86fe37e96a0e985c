import math
from functools import partial

import numpy as np
import pytest

from enforcers import CostModel
from fairness_core import DomainError, Interval, MeasureKind, ResourceCapError, Trace, UnsupportedDynamicsError
from monitors import Mode, StaticCoinMonitor
from oracle import (
    ConstantTruth,
    CoverageResult,
    MeasureTruth,
    RuntimeTruth,
    binomial_margin,
    empirical_coverage,
    enforced_reach_probability,
    enumerate_optimal_cost,
    enumerate_reach_probability,
    exact_runtime_fairness,
)
from process_sim import AdditiveDynamics, ConstantCoin, MarkovKernel, ScriptedBiases, simulate


class TestEnforcementOracles:

    def test_reach_probability_by_hand(self):
        assert enumerate_reach_probability(0.5, 2, Interval(0.5, 1.0)) == pytest.approx(0.75)
        assert enumerate_reach_probability(0.3, 3, Interval(1.0, 1.0)) == pytest.approx(0.027)
        assert enumerate_reach_probability(0.3, 3, Interval(1.0, 1.0), t=2, h=2) == pytest.approx(0.3)

    def test_reach_probability_is_a_binomial_tail(self):
        p, T = 0.35, 16
        expected = sum(math.comb(T, k) * p ** k * (1 - p) ** (T - k) for k in range(6, 11))
        assert enumerate_reach_probability(p, T, Interval(6 / 16, 10 / 16)) == pytest.approx(expected, abs=1e-12)

    def test_optimal_cost_by_hand(self):
        assert enumerate_optimal_cost(lambda t, h: 0.5, 2, Interval(0.5, 1.0), CostModel.unit()) == pytest.approx(0.25)
        assert enumerate_optimal_cost(lambda t, h: 0.2, 3, Interval(0.0, 0.0), CostModel.unit()) == pytest.approx(0.6)

    def test_unenforced_mass_propagation(self):
        keep = lambda t, h, x: x
        for p in (0.1, 0.5, 0.77):
            assert enforced_reach_probability(keep, p, 12, Interval(0.25, 0.5)) == pytest.approx(
                enumerate_reach_probability(p, 12, Interval(0.25, 0.5)), abs=1e-12)

    def test_caps(self):
        with pytest.raises(ResourceCapError):
            enumerate_reach_probability(0.5, 30, Interval(0.5, 1.0))
        with pytest.raises(ResourceCapError):
            enumerate_optimal_cost(lambda t, h: 0.5, 13, Interval(0.5, 1.0), CostModel.unit())


class TestExactRuntimeFairness:

    def test_horizon_zero_is_the_measure_itself(self):
        prefix = Trace.from_pairs([(0.2, 1), (0.6, 0)])
        for measure in MeasureKind:
            assert exact_runtime_fairness(ConstantCoin(0.4), prefix, 0, measure) == measure.evaluate(prefix)

    def test_constant_coin(self):
        prefix = Trace.from_pairs([(0.4, 1), (0.4, 1), (0.4, 0)])
        assert exact_runtime_fairness(ConstantCoin(0.4), prefix, 3, MeasureKind.OUTCOME) == pytest.approx((2 + 1.2) / 6)
        assert exact_runtime_fairness(ConstantCoin(0.4), prefix, 3, MeasureKind.BIAS) == pytest.approx(0.4)
        assert exact_runtime_fairness(ConstantCoin(0.4), prefix, 3, MeasureKind.CURRENT) == pytest.approx(0.4)

    def test_scripted_biases(self):
        script = ScriptedBiases((0.1, 0.2, 0.3, 0.9, 0.5))
        prefix = Trace.from_pairs([(0.1, 0), (0.2, 1)])
        assert exact_runtime_fairness(script, prefix, 2, MeasureKind.CURRENT) == pytest.approx(0.9)
        assert exact_runtime_fairness(script, prefix, 2, MeasureKind.BIAS) == pytest.approx(1.5 / 4)
        assert exact_runtime_fairness(script, prefix, 2, MeasureKind.OUTCOME) == pytest.approx(2.2 / 4)

    def test_additive_dynamics(self):
        dynamics = AdditiveDynamics(0.5, -0.1, 0.1)
        prefix = Trace.from_pairs([(0.5, 1), (0.6, 1)])
        assert exact_runtime_fairness(dynamics, prefix, 1, MeasureKind.CURRENT) == pytest.approx(0.7)
        # next bias 0.7, then 0.8 or 0.6
        assert exact_runtime_fairness(dynamics, prefix, 2, MeasureKind.CURRENT) == pytest.approx(0.7 * 0.8 + 0.3 * 0.6)

    def test_alternating_markov_chain(self):
        kernel = np.array([[[0.0, 1.0], [0.0, 1.0]], [[1.0, 0.0], [1.0, 0.0]]])
        dynamics = MarkovKernel((0.2, 0.7), kernel, np.array([1.0, 0.0]))
        prefix = Trace.from_pairs([(0.2, 0), (0.7, 1), (0.2, 1)])
        assert exact_runtime_fairness(dynamics, prefix, 1, MeasureKind.CURRENT) == pytest.approx(0.7)
        assert exact_runtime_fairness(dynamics, prefix, 2, MeasureKind.CURRENT) == pytest.approx(0.2)
        assert exact_runtime_fairness(dynamics, prefix, 2, MeasureKind.BIAS) == pytest.approx(2.0 / 5)

    def test_horizon_cap(self):
        with pytest.raises(ResourceCapError):
            exact_runtime_fairness(ConstantCoin(0.5), Trace.from_pairs([(0.5, 1)]), 9, MeasureKind.OUTCOME)

    def test_unknown_dynamics(self):
        with pytest.raises(UnsupportedDynamicsError):
            exact_runtime_fairness(object(), Trace.from_pairs([(0.5, 1)]), 1, MeasureKind.OUTCOME)


class TestTruths:

    def test_series_match_pointwise_calls(self):
        trace = simulate(AdditiveDynamics(0.5, -0.05, 0.05), 40, 2)
        for measure in MeasureKind:
            truth = MeasureTruth(measure)
            np.testing.assert_allclose(truth.series(trace), [truth(trace, t) for t in range(1, 41)], atol=1e-12)
        runtime = RuntimeTruth(ConstantCoin(0.3), MeasureKind.OUTCOME, 2)
        assert runtime.series(trace)[0] == pytest.approx((trace.outcomes[0] + 0.6) / 3)
        assert ConstantTruth(0.3).series(trace).tolist() == [0.3] * 40


class TestEmpiricalCoverage:

    def test_margin(self):
        assert binomial_margin(0.05, 1000) == pytest.approx(3 * math.sqrt(0.05 * 0.95 / 1000))

    def test_static_coin_pointwise_coverage(self):
        builder = partial(StaticCoinMonitor, MeasureKind.BIAS, 0, 0.05, Mode.POINTWISE)
        result = empirical_coverage(builder, ConstantCoin(0.3), ConstantTruth(0.3), T=200, trials=300,
                                    delta=0.05, mode=Mode.POINTWISE, seed=42)
        assert result.trials == 300
        assert result.rate >= 0.95 - result.margin

    def test_static_coin_uniform_coverage(self):
        builder = partial(StaticCoinMonitor, MeasureKind.BIAS, 0, 0.05, Mode.UNIFORM)
        result = empirical_coverage(builder, ConstantCoin(0.6), ConstantTruth(0.6), T=300, trials=200,
                                    delta=0.05, mode=Mode.UNIFORM, seed=42)
        assert result.rate >= 0.95 - result.margin

    def test_workers_do_not_change_the_result(self):
        builder = partial(StaticCoinMonitor, MeasureKind.BIAS, 0, 0.2, Mode.POINTWISE)
        args = dict(T=50, trials=24, delta=0.2, mode=Mode.POINTWISE, seed=7)
        serial = empirical_coverage(builder, ConstantCoin(0.5), ConstantTruth(0.5), jobs=1, **args)
        parallel = empirical_coverage(builder, ConstantCoin(0.5), ConstantTruth(0.5), jobs=2, **args)
        assert serial == parallel

    def test_needs_trials(self):
        with pytest.raises(DomainError):
            empirical_coverage(StaticCoinMonitor, ConstantCoin(0.5), ConstantTruth(0.5), T=5, trials=0,
                               delta=0.05, mode=Mode.POINTWISE, seed=0)

    def test_result_dict(self):
        assert CoverageResult(10, 9, 0.9, 0.1).to_dict() == {"trials": 10, "hits": 9, "rate": 0.9, "margin": 0.1}
