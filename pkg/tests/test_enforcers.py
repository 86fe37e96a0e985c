import itertools
import logging
import math

import numpy as np
import pytest

from enforcers import (
    ConstantBiasEnforcer,
    CostModel,
    DeltaEnforcer,
    PeriodicShield,
    Shield,
    ThresholdOutcomeEnforcer,
    ValueTable,
    dynamic_shield,
    reach_probability_table,
    synthesize_value_table,
)
from fairness_core import (
    BiasOutcomePair,
    ConfigError,
    InfeasibleError,
    Interval,
    TargetIntervalSchedule,
    Trace,
    UnsupportedDynamicsError,
    WindowClosedError,
)
from oracle import enforced_reach_probability, enumerate_optimal_cost, enumerate_reach_probability
from process_sim import AdditiveBiasMap, AdditiveDynamics, ConstantCoin, simulate, switching_kernel

UNIT = CostModel.unit()


def outcome_trace(outcomes, p=0.5) -> Trace:
    return Trace.from_pairs([(p, x) for x in outcomes])


def expected_closed_loop_cost(decide, cost: CostModel, bias_map, T: int) -> float:
    """Exact expected flip cost of an outcome enforcer when the bias follows the enforced counts."""

    def walk(t: int, h: int) -> float:
        if t == T:
            return 0.0
        p = bias_map(t, h)
        total = 0.0
        for x, px in ((1, p), (0, 1.0 - p)):
            if px == 0:
                continue
            y = decide(t, h, x, p)
            total += px * (float(cost.flip_cost(p, x, y)) + walk(t + 1, h + y))
        return total

    return walk(0, 0)


class TestCostModel:

    def test_parse(self):
        assert CostModel.parse("unit") == UNIT
        assert CostModel.parse(" bias_weighted ") == CostModel.bias_weighted()
        assert CostModel.parse("asymmetric:2,0.5") == CostModel.asymmetric(2.0, 0.5)

    @pytest.mark.parametrize("text", ["bogus", "asymmetric:x", "asymmetric:1,2,3"])
    def test_parse_errors(self, text):
        with pytest.raises(ConfigError):
            CostModel.parse(text)

    def test_flip_costs(self):
        assert CostModel.bias_weighted().flip_cost(0.3, 1, 0) == pytest.approx(0.3)
        assert CostModel.bias_weighted().flip_cost(0.3, 0, 1) == pytest.approx(0.7)
        assert CostModel.asymmetric(2.0, 0.5).flip_cost(0.9, 0, 1) == 0.5
        assert UNIT.flip_cost(0.9, 1, 1) == 0.0
        np.testing.assert_allclose(UNIT.flip_cost(np.array([0.1, 0.2]), 1, 0), [1.0, 1.0])

    def test_negative_costs_are_rejected(self):
        with pytest.raises(ConfigError):
            CostModel.asymmetric(-1.0, 1.0)


class TestConstantBiasEnforcer:

    def test_midpoint_of_the_intersection(self):
        rows = [(t, 0.3, 0.6) if t % 2 else (t, 0.4, 0.7) for t in range(1, 9)]
        enforcer = ConstantBiasEnforcer(TargetIntervalSchedule.from_rows(rows))
        assert enforcer.p_cap == pytest.approx(0.5)
        pair = enforcer.enforce(BiasOutcomePair(0.3, 1))
        assert pair == BiasOutcomePair(enforcer.p_cap, 1)
        assert enforcer.incurred_cost == 1.0 and enforcer.interventions == 1

    def test_empty_intersection(self):
        schedule = TargetIntervalSchedule.from_rows([(1, 0.0, 0.2), (2, 0.5, 1.0)])
        with pytest.raises(InfeasibleError):
            ConstantBiasEnforcer(schedule)

    def test_every_emitted_bias_is_inside_every_target(self):
        schedule = TargetIntervalSchedule.periodic(3, Interval(0.2, 0.45))
        enforced = ConstantBiasEnforcer(schedule).run(simulate(switching_kernel((0.9, 0.1), 0.3), 60, 1))
        assert np.all((enforced.biases >= 0.2) & (enforced.biases <= 0.45))


class TestThresholdOutcomeEnforcer:

    def test_all_tails_stream(self):
        enforced = ThresholdOutcomeEnforcer(0.5).run(outcome_trace([0, 0, 0, 0]))
        assert enforced.outcomes.tolist() == [1, 1, 0, 1]

    def test_fixed_point_stream_is_unchanged(self):
        enforcer = ThresholdOutcomeEnforcer(1.0)
        assert enforcer.run(outcome_trace([1] * 6)).outcomes.tolist() == [1] * 6
        assert enforcer.interventions == 0

    @pytest.mark.parametrize("p", [0.3, 0.5, 0.9])
    def test_band_holds_for_every_raw_stream(self, p):
        T = 14
        enforcer = ThresholdOutcomeEnforcer(p)
        violations = 0
        for raw in itertools.product((0, 1), repeat=T):
            h = 0
            for t, x in enumerate(raw):
                h += enforcer.decide(t, h, x)
                violations += abs(h / (t + 1) - p) > 1.0 / (t + 1) + 1e-12
        assert violations == 0

    def test_schedule_containing_the_band(self):
        ThresholdOutcomeEnforcer(0.5, TargetIntervalSchedule.periodic(10, Interval(0.3, 0.7)))
        with pytest.raises(InfeasibleError):
            ThresholdOutcomeEnforcer(0.5, TargetIntervalSchedule.periodic(2, Interval(0.3, 0.7)))
        with pytest.raises(InfeasibleError):
            ThresholdOutcomeEnforcer(0.5, TargetIntervalSchedule.finite_window(5, Interval(0.45, 0.55)))


class TestReachTable:

    def test_fair_coin_two_tosses(self):
        table = reach_probability_table(0.5, 2, Interval(0.5, 1.0))
        assert table(0, 0) == pytest.approx(0.75)
        assert table(1, 0) == pytest.approx(0.5)
        assert table(2, 0) == 0.0

    @pytest.mark.parametrize("p,interval", [(0.5, Interval(0.4, 0.6)), (0.3, Interval(0.5, 1.0)),
                                            (0.85, Interval(0.0, 0.7))])
    def test_matches_suffix_enumeration(self, p, interval):
        T = 10
        table = reach_probability_table(p, T, interval)
        for t in range(T + 1):
            for h in range(t + 1):
                assert table(t, h) == pytest.approx(enumerate_reach_probability(p, T, interval, t, h), abs=1e-12)


class TestDeltaEnforcer:

    def test_trivial_target_never_intervenes(self):
        enforcer = DeltaEnforcer.build(0.3, 12, Interval(0.0, 1.0), 0.05)
        raw = simulate(ConstantCoin(0.3), 12, 9)
        assert enforcer.run(raw) == raw
        assert enforcer.interventions == 0

    @pytest.mark.parametrize("p,interval", [(0.5, Interval(0.4, 0.6)), (0.2, Interval(0.5, 0.7)),
                                            (0.9, Interval(0.3, 0.6))])
    @pytest.mark.parametrize("delta", [1e-9, 0.01, 0.1, 0.3])
    def test_guarantee_and_dominance(self, p, interval, delta):
        T = 10
        enforcer = DeltaEnforcer.build(p, T, interval, delta)
        enforced = enforced_reach_probability(enforcer.decide, p, T, interval)
        assert enforced >= 1.0 - delta - 1e-12
        assert enforced >= enforcer.table(0, 0) - 1e-12

    def test_vanishing_delta_always_lands(self):
        enforcer = DeltaEnforcer.build(0.5, 10, Interval(0.4, 0.6), 1e-12)
        assert enforced_reach_probability(enforcer.decide, 0.5, 10, Interval(0.4, 0.6)) == pytest.approx(1.0)

    def test_sampled_runs_land_often_enough(self):
        T, delta, interval = 20, 0.1, Interval(0.4, 0.6)
        hits = 0
        for seed in range(500):
            enforced = DeltaEnforcer.build(0.3, T, interval, delta).run(simulate(ConstantCoin(0.3), T, seed))
            hits += interval.contains(enforced.heads / T)
        assert hits / 500 >= 1.0 - delta - 3 * math.sqrt(delta * (1 - delta) / 500)

    def test_window_closes(self):
        enforcer = DeltaEnforcer.build(0.5, 2, Interval(0.5, 1.0), 0.1)
        with pytest.raises(WindowClosedError):
            enforcer.decide(2, 1, 0)


class TestValueTable:

    def test_fair_coin_two_tosses(self):
        table = synthesize_value_table(0.5, 2, Interval(0.5, 1.0), UNIT)
        assert table.start_value == pytest.approx(0.25)
        assert table(1, 0) == pytest.approx(0.5)
        assert table(2, 0) == math.inf

    def test_trivial_target_costs_nothing(self):
        table = synthesize_value_table(0.3, 8, Interval(0.0, 1.0), UNIT)
        assert np.all(table.values[np.tril_indices(9)] == 0.0)

    @pytest.mark.parametrize("p", [0.0, 0.3, 0.5, 1.0])
    def test_all_heads_target(self, p):
        assert synthesize_value_table(p, 5, Interval(1.0, 1.0), UNIT).start_value == pytest.approx((1 - p) * 5)
        asymmetric = synthesize_value_table(p, 5, Interval(1.0, 1.0), CostModel.asymmetric(1.0, 2.0))
        assert asymmetric.start_value == pytest.approx(2 * (1 - p) * 5)

    def test_unreachable_target(self):
        table = synthesize_value_table(0.5, 3, Interval(0.5, 0.5), UNIT)
        assert not table.feasible

    @pytest.mark.parametrize("bias_map,cost", [
        (lambda t, h: 0.5, UNIT),
        (lambda t, h: 0.3, CostModel.asymmetric(0.5, 2.0)),
        (AdditiveBiasMap(0.5, -0.1, 0.1), UNIT),
        (AdditiveBiasMap(0.4, 0.05, -0.08), CostModel.bias_weighted()),
        (lambda t, h: (h + 1) / (t + 2), UNIT),
    ])
    def test_matches_history_tree_search(self, bias_map, cost):
        for interval in (Interval(0.5, 1.0), Interval(0.4, 0.6), Interval(0.0, 0.25)):
            table = synthesize_value_table(bias_map, 8, interval, cost)
            assert table.start_value == pytest.approx(enumerate_optimal_cost(bias_map, 8, interval, cost), abs=1e-12)

    def test_recurrence_spot_check(self):
        p, T = 0.4, 6
        table = synthesize_value_table(p, T, Interval(0.5, 0.8), UNIT)
        t, h = 3, 1
        up, down = table(t + 1, h + 1), table(t + 1, h)
        expected = p * min(up, 1 + down) + (1 - p) * min(down, 1 + up)
        assert table(t, h) == pytest.approx(expected)

    def test_csv_round_trip(self, tmp_path):
        table = synthesize_value_table(0.5, 6, Interval(0.5, 0.5), CostModel.asymmetric(1.5, 0.25))
        path = tmp_path / "table.csv"
        table.to_csv(str(path), "abc123")
        assert path.read_text(encoding="utf-8").splitlines()[3] == f"0,0,{table.start_value:.17g},abc123"
        loaded = ValueTable.from_csv(str(path))
        assert loaded.T == 6 and loaded.interval == table.interval
        assert loaded.cost_descriptor == "asymmetric:1.5,0.25"
        for t, h, v in table.rows():
            assert loaded(t, h) == v

    def test_unknown_version(self, tmp_path):
        path = tmp_path / "table.csv"
        path.write_text("version,T,lo,hi,bias_map,cost\n9,1,0,1,constant,unit\nt,h,v\n", encoding="utf-8")
        with pytest.raises(ConfigError):
            ValueTable.from_csv(str(path))


class TestShield:

    def test_decisions_on_the_fair_coin_table(self):
        shield = Shield(synthesize_value_table(0.5, 2, Interval(0.5, 1.0), UNIT), UNIT)
        assert shield.decide(0, 0, 0) == 0
        assert shield.decide(1, 0, 0) == 1
        assert shield.decide(1, 1, 0) == 0
        assert shield.decide(5, 3, 0) == 0

    @pytest.mark.parametrize("p", [0.3, 0.5, 0.8])
    @pytest.mark.parametrize("interval", [Interval(0.5, 1.0), Interval(0.25, 0.5), Interval(0.4, 0.6)])
    def test_every_enforced_run_lands(self, p, interval):
        T = 8
        shield = Shield(synthesize_value_table(p, T, interval, UNIT), UNIT)
        for raw in itertools.product((0, 1), repeat=T):
            h = 0
            for t, x in enumerate(raw):
                h += shield.decide(t, h, x, p)
            assert interval.contains(h / T)
        assert enforced_reach_probability(shield.decide, p, T, interval) == pytest.approx(1.0)

    @pytest.mark.parametrize("cost", [UNIT, CostModel.asymmetric(3.0, 0.5), CostModel.bias_weighted()])
    def test_expected_cost_equals_start_value(self, cost):
        bias_map = AdditiveBiasMap(0.5, -0.1, 0.1)
        table = synthesize_value_table(bias_map, 7, Interval(0.4, 0.6), cost)
        shield = Shield(table, cost)
        assert expected_closed_loop_cost(shield.decide, cost, bias_map, 7) == pytest.approx(table.start_value)

    def test_infeasible_state(self):
        shield = Shield(synthesize_value_table(0.5, 3, Interval(0.5, 0.5), UNIT), UNIT)
        with pytest.raises(InfeasibleError):
            shield.decide(0, 0, 1)

    def test_costs_are_accounted(self):
        shield = Shield(synthesize_value_table(0.5, 4, Interval(1.0, 1.0), CostModel.asymmetric(1.0, 2.5)),
                        CostModel.asymmetric(1.0, 2.5))
        enforced = shield.run(outcome_trace([0, 1, 0, 0, 0]))
        assert enforced.outcomes.tolist() == [1, 1, 1, 1, 0]
        assert shield.incurred_cost == pytest.approx(7.5)
        assert shield.interventions == 3


class TestPeriodicShield:

    def test_window_target_shifts_with_accumulated_heads(self):
        shield = PeriodicShield(0.5, 8, Interval(0.5, 0.75), UNIT)
        assert shield.window_target(8, 6) == (2, 6)
        assert shield.window_target(8, 4) == (4, 8)

    def test_trivial_target_is_the_identity(self):
        raw = simulate(ConstantCoin(0.2), 200, 3)
        shield = PeriodicShield(0.2, 7, Interval(0.0, 1.0), UNIT)
        assert shield.run(raw) == raw

    def test_every_window_end_lands(self):
        T, interval = 4, Interval(0.5, 1.0)
        for raw in itertools.product((0, 1), repeat=12):
            shield = PeriodicShield(0.5, T, interval, UNIT)
            enforced = shield.run(outcome_trace(raw))
            for end in (4, 8, 12):
                assert interval.contains(int(enforced.outcomes[:end].sum()) / end)

    def test_infeasible_window_policies(self, caplog):
        raw = outcome_trace([0] * 6)
        with pytest.raises(InfeasibleError):
            PeriodicShield(0.5, 3, Interval(0.5, 0.5), UNIT).run(raw)
        shield = PeriodicShield(0.5, 3, Interval(0.5, 0.5), UNIT, policy="saturate")
        with caplog.at_level(logging.WARNING):
            enforced = shield.run(raw)
        assert shield.saturated_windows == 1
        assert int(enforced.outcomes[:3].sum()) == 1
        assert int(enforced.outcomes.sum()) == 3
        assert "infeasible" in caplog.text

    def test_unknown_policy(self):
        with pytest.raises(ConfigError):
            PeriodicShield(0.5, 3, Interval(0.5, 1.0), UNIT, policy="ignore")


class TestDynamicShield:

    def test_static_additive_dynamics_match_the_constant_table(self):
        table, _ = dynamic_shield(AdditiveDynamics(0.5, 0.0, 0.0), 6, Interval(0.5, 1.0), UNIT)
        constant = synthesize_value_table(0.5, 6, Interval(0.5, 1.0), UNIT)
        np.testing.assert_array_equal(table.values, constant.values)

    def test_shield_lands_under_feedback(self):
        dynamics = AdditiveDynamics(0.5, -0.1, 0.1)
        table, shield = dynamic_shield(dynamics, 6, Interval(0.4, 0.6), UNIT)
        assert table.feasible
        bias_map = AdditiveBiasMap(0.5, -0.1, 0.1)
        assert enforced_reach_probability(shield.decide, bias_map, 6, Interval(0.4, 0.6)) == pytest.approx(1.0)

    def test_clamping_is_reported(self, caplog):
        with caplog.at_level(logging.WARNING):
            dynamic_shield(AdditiveDynamics(0.5, -0.2, 0.2), 6, Interval(0.4, 0.6), UNIT)
        assert "clamping" in caplog.text

    def test_markov_dynamics_are_not_count_determined(self):
        with pytest.raises(UnsupportedDynamicsError):
            dynamic_shield(switching_kernel((0.9, 0.1), 0.05), 6, Interval(0.4, 0.6), UNIT)
