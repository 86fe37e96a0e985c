"""
Fairness enforcers. A process-agnostic bias enforcer and threshold outcome enforcer, the
delta-enforcer over a reach-probability table, and cost-optimal shields (finite, periodic and
count-determined dynamic) driven by a value table over (tosses, heads) states.
"""
import csv
import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from fairness_core import (
    HEADS_TOL,
    BiasOutcomePair,
    ConfigError,
    DomainError,
    InfeasibleError,
    Interval,
    TargetIntervalSchedule,
    Trace,
    WindowClosedError,
    heads_range,
)
from process_sim import (
    AdditiveBiasMap,
    BiasMap,
    ConstantBiasMap,
    Dynamics,
    as_bias_map,
    count_bias_map,
)

VALUE_TABLE_VERSION = "2"
INFEASIBLE_POLICIES = ("error", "saturate")


# =========================
#  Costs
# =========================
@dataclass(frozen=True)
class CostModel:
    """
    Cost c(p, x, y) of emitting outcome y when the coin with bias p showed x.
    Keeping the outcome is free.
    """
    kind: str = "unit"
    heads_to_tails: float = 1.0
    tails_to_heads: float = 1.0

    def __post_init__(self):
        if self.kind not in ("unit", "asymmetric", "bias_weighted"):
            raise ConfigError(f"unknown cost model {self.kind!r}")
        if self.heads_to_tails < 0 or self.tails_to_heads < 0:
            raise ConfigError("flip costs must be non-negative")

    @classmethod
    def unit(cls) -> "CostModel":
        return cls("unit")

    @classmethod
    def asymmetric(cls, heads_to_tails: float, tails_to_heads: float) -> "CostModel":
        return cls("asymmetric", heads_to_tails, tails_to_heads)

    @classmethod
    def bias_weighted(cls) -> "CostModel":
        return cls("bias_weighted")

    @classmethod
    def parse(cls, text: str) -> "CostModel":
        """`unit`, `bias_weighted` or `asymmetric:<heads_to_tails>,<tails_to_heads>`."""
        text = text.strip()
        if text in ("unit", "bias_weighted"):
            return cls(text)
        if text.startswith("asymmetric:"):
            try:
                a, b = (float(v) for v in text.split(":", 1)[1].split(","))
            except ValueError as e:
                raise ConfigError(f"bad asymmetric cost {text!r}: {e}")
            return cls.asymmetric(a, b)
        raise ConfigError(f"unknown cost model {text!r}")

    def flip_cost(self, p, x: int, y: int):
        """Works on scalar biases and on numpy arrays of biases."""
        if x == y:
            return p * 0.0
        if self.kind == "bias_weighted":
            return p if x == 1 else 1.0 - p
        if self.kind == "asymmetric":
            return p * 0.0 + (self.heads_to_tails if x == 1 else self.tails_to_heads)
        return p * 0.0 + 1.0

    def describe(self) -> str:
        if self.kind == "asymmetric":
            return f"asymmetric:{self.heads_to_tails!r},{self.tails_to_heads!r}"
        return self.kind


def _expect(p, heads_value, tails_value):
    """p * a + (1 - p) * b where a zero-probability branch contributes 0 even if it is inf."""
    with np.errstate(invalid="ignore"):
        return (np.where(p > 0, p * heads_value, 0.0)
                + np.where(p < 1, (1.0 - p) * tails_value, 0.0))


def _bias_row(bias_map: BiasMap, t: int) -> np.ndarray:
    return np.array([bias_map(t, h) for h in range(t + 1)], dtype=float)


# =========================
#  Tables
# =========================
@dataclass(frozen=True, eq=False)
class ValueTable:
    """
    Expected remaining enforcement cost v(t, h) for 0 <= h <= t <= T; inf marks states from which
    no outcome enforcer can reach the target. Entries with h > t are inf and never read.
    """
    T: int
    interval: Interval
    values: np.ndarray
    bias_descriptor: str = "custom"
    cost_descriptor: str = "unit"

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.shape != (self.T + 1, self.T + 1):
            raise DomainError(f"value table must be {self.T + 1}x{self.T + 1}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def __call__(self, t: int, h: int) -> float:
        return float(self.values[t, h])

    @property
    def start_value(self) -> float:
        return float(self.values[0, 0])

    @property
    def feasible(self) -> bool:
        return math.isfinite(self.start_value)

    def rows(self):
        for t in range(self.T + 1):
            for h in range(t + 1):
                yield t, h, float(self.values[t, h])

    def to_csv(self, path: str, config_hash: str = "") -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["version", "T", "lo", "hi", "bias_map", "cost"])
            writer.writerow([VALUE_TABLE_VERSION, self.T, f"{self.interval.lo:.17g}",
                             f"{self.interval.hi:.17g}", self.bias_descriptor, self.cost_descriptor])
            writer.writerow(["t", "h", "v", "config_hash"])
            for t, h, v in self.rows():
                writer.writerow([t, h, f"{v:.17g}", config_hash])

    @classmethod
    def from_csv(cls, path: str) -> "ValueTable":
        with open(path, newline="", encoding="utf-8") as f:
            reader = csv.reader(f)
            next(reader)
            meta = next(reader)
            if not meta or meta[0] != VALUE_TABLE_VERSION:
                raise ConfigError(f"unsupported value table version {meta[0] if meta else ''!r}")
            _, T, lo, hi, bias_descriptor, cost_descriptor = meta
            next(reader)
            T = int(T)
            values = np.full((T + 1, T + 1), math.inf)
            for t, h, v, _ in reader:
                values[int(t), int(h)] = float(v)
        return cls(T, Interval(float(lo), float(hi)), values, bias_descriptor, cost_descriptor)


@dataclass(frozen=True, eq=False)
class ReachTable:
    """P(t, h): probability that the unenforced process ends the window inside the target."""
    T: int
    interval: Interval
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def __call__(self, t: int, h: int) -> float:
        return float(self.values[t, h])


def _terminal_row(T: int, lo_h: int, hi_h: int, hit: float, miss: float) -> np.ndarray:
    row = np.full(T + 1, miss)
    if lo_h <= hi_h:
        row[lo_h:hi_h + 1] = hit
    return row


def _synthesize_heads(bias_map: BiasMap, T: int, lo_h: int, hi_h: int, cost: CostModel) -> np.ndarray:
    values = np.full((T + 1, T + 1), math.inf)
    values[T] = _terminal_row(T, lo_h, hi_h, 0.0, math.inf)
    for t in range(T - 1, -1, -1):
        p = _bias_row(bias_map, t)
        up = values[t + 1, 1:t + 2]
        down = values[t + 1, :t + 1]
        heads_branch = np.minimum(up, cost.flip_cost(p, 1, 0) + down)
        tails_branch = np.minimum(down, cost.flip_cost(p, 0, 1) + up)
        values[t, :t + 1] = _expect(p, heads_branch, tails_branch)
    return values


def synthesize_value_table(bias_map, T: int, interval: Interval, cost: CostModel) -> ValueTable:
    """Backward induction of the optimal expected flip cost over (t, h) states."""
    if T < 1:
        raise DomainError("window length T must be >= 1")
    bias_map = as_bias_map(bias_map)
    lo_h, hi_h = heads_range(T, interval)
    values = _synthesize_heads(bias_map, T, lo_h, hi_h, cost)
    logging.info(f"Synthesized value table T={T} target={interval} v(0,0)={values[0, 0]:.6g}")
    return ValueTable(T, interval, values, bias_map.describe(), cost.describe())


def reach_probability_table(bias, T: int, interval: Interval) -> ReachTable:
    if T < 1:
        raise DomainError("window length T must be >= 1")
    bias_map = as_bias_map(bias)
    lo_h, hi_h = heads_range(T, interval)
    values = np.zeros((T + 1, T + 1))
    values[T] = _terminal_row(T, lo_h, hi_h, 1.0, 0.0)
    for t in range(T - 1, -1, -1):
        p = _bias_row(bias_map, t)
        values[t, :t + 1] = p * values[t + 1, 1:t + 2] + (1.0 - p) * values[t + 1, :t + 1]
    return ReachTable(T, interval, values)


# =========================
#  Enforcers
# =========================
class Enforcer(ABC):
    """Sequential enforcer: maps each raw pair to an enforced pair given the enforced history."""

    def __init__(self):
        self.t = 0
        self.h = 0
        self.incurred_cost = 0.0
        self.interventions = 0

    @abstractmethod
    def enforce(self, raw: BiasOutcomePair) -> BiasOutcomePair:
        ...

    def _advance(self, raw: BiasOutcomePair, enforced: BiasOutcomePair, cost: float = 0.0) -> BiasOutcomePair:
        self.t += 1
        self.h += enforced.outcome
        self.incurred_cost += cost
        if enforced != raw:
            self.interventions += 1
        return enforced

    def run(self, trace: Trace) -> Trace:
        """Open-loop replay of a recorded raw trace."""
        return Trace.from_pairs([self.enforce(pair) for pair in trace])


class OutcomeEnforcer(Enforcer):
    """Enforcers that overwrite outcomes only; the choice is a function of (t, h, raw outcome)."""

    @abstractmethod
    def decide(self, t: int, h: int, x: int, p: float = 0.5) -> int:
        ...

    def step_cost(self, p: float, x: int, y: int) -> float:
        return 0.0 if x == y else 1.0

    def enforce(self, raw: BiasOutcomePair) -> BiasOutcomePair:
        y = self.decide(self.t, self.h, raw.outcome, raw.bias)
        return self._advance(raw, BiasOutcomePair(raw.bias, y), self.step_cost(raw.bias, raw.outcome, y))


class ConstantBiasEnforcer(Enforcer):
    """
    Replaces every coin by one with bias p_cap, the midpoint of the intersection of all target
    intervals. The outcome of the emitted pair is the raw one; closed-loop runs redraw it from
    p_cap with the same uniform.
    """

    def __init__(self, schedule: TargetIntervalSchedule):
        super().__init__()
        common = schedule.intersection()
        if common is None:
            raise InfeasibleError("target intervals have an empty intersection; no constant bias satisfies them all")
        self.p_cap = common.midpoint

    def enforce(self, raw: BiasOutcomePair) -> BiasOutcomePair:
        enforced = BiasOutcomePair(self.p_cap, raw.outcome)
        return self._advance(raw, enforced, 0.0 if raw.bias == self.p_cap else 1.0)


class ThresholdOutcomeEnforcer(OutcomeEnforcer):
    """
    Emits heads exactly when the outcome fairness with the raw outcome appended is at most p,
    which keeps the enforced outcome fairness inside [p - 1/t, p + 1/t] at every t.
    """

    def __init__(self, p: float, schedule: Optional[TargetIntervalSchedule] = None):
        super().__init__()
        if not 0.0 <= p <= 1.0:
            raise DomainError(f"threshold p must lie in [0,1], got {p}")
        self.p = p
        if schedule is not None:
            self._check_band(schedule)

    def band(self, t: int) -> Interval:
        return Interval(max(0.0, self.p - 1.0 / t), min(1.0, self.p + 1.0 / t))

    def _check_band(self, schedule: TargetIntervalSchedule):
        # the band shrinks with t, so the first periodic time is the binding one
        times = schedule.constrained_times()
        if schedule.period is not None:
            times.append(schedule.period)
        for t in times:
            if not schedule.at(t).includes(self.band(t)):
                raise InfeasibleError(
                    f"band {self.band(t)} of threshold p={self.p} is not inside I_{t} = {schedule.at(t)}")

    def decide(self, t: int, h: int, x: int, p: float = 0.5) -> int:
        return 1 if (h + x) <= self.p * (t + 1) + HEADS_TOL else 0


class DeltaEnforcer(OutcomeEnforcer):
    """
    Intervenes only when keeping the raw outcome would drop the probability of ending the
    window inside the target below 1 - delta; it then moves to the better successor.
    """

    def __init__(self, table: ReachTable, delta: float):
        super().__init__()
        if not 0.0 < delta < 1.0:
            raise DomainError(f"delta must lie in (0,1), got {delta}")
        self.table = table
        self.delta = delta

    @classmethod
    def build(cls, bias, T: int, interval: Interval, delta: float) -> "DeltaEnforcer":
        return cls(reach_probability_table(bias, T, interval), delta)

    def decide(self, t: int, h: int, x: int, p: float = 0.5) -> int:
        if t >= self.table.T:
            raise WindowClosedError(f"the delta-enforcer window ended at T={self.table.T}")
        successors = self.table.values[t + 1]
        if successors[h + x] >= 1.0 - self.delta:
            return x
        return 1 if successors[h + 1] >= successors[h] else 0


class Shield(OutcomeEnforcer):
    """
    Cost-optimal outcome shield. Keeps x iff v(t+1, h+x) <= c(p, x, 1-x) + v(t+1, h+1-x);
    passes outcomes through once the window is over.
    """

    def __init__(self, table: ValueTable, cost: CostModel):
        super().__init__()
        self.table = table
        self.cost = cost

    def decide(self, t: int, h: int, x: int, p: float = 0.5) -> int:
        if t >= self.table.T:
            return x
        keep = self.table.values[t + 1, h + x]
        flip = self.table.values[t + 1, h + 1 - x]
        if math.isinf(keep) and math.isinf(flip):
            raise InfeasibleError(f"no outcome reaches the target from t={t}, h={h}")
        if keep <= float(self.cost.flip_cost(p, x, 1 - x)) + flip:
            return x
        return 1 - x

    def step_cost(self, p: float, x: int, y: int) -> float:
        return float(self.cost.flip_cost(p, x, y))


class PeriodicShield(OutcomeEnforcer):
    """
    Shield for targets checked at every multiple of T. Each window gets a fresh value table
    whose head target accounts for the heads H accumulated before the window starts.
    """

    def __init__(self, bias_map, T: int, interval: Interval, cost: CostModel, policy: str = "error"):
        super().__init__()
        if T < 1:
            raise DomainError("window length T must be >= 1")
        if policy not in INFEASIBLE_POLICIES:
            raise ConfigError(f"infeasible_policy must be one of {INFEASIBLE_POLICIES}, got {policy!r}")
        self.bias_map = as_bias_map(bias_map)
        self.T = T
        self.interval = interval
        self.cost = cost
        self.policy = policy
        self.window_start = 0
        self.base_heads = 0
        self.table: Optional[np.ndarray] = None
        self._cache: Dict[Tuple[int, int], np.ndarray] = {}
        self.saturated_windows = 0

    def window_target(self, k: int, accumulated: int) -> Tuple[int, int]:
        """Raw head range for the window [k, k+T), before clipping to [0, T]."""
        end = k + self.T
        lo = math.ceil(end * self.interval.lo - HEADS_TOL) - accumulated
        hi = math.floor(end * self.interval.hi + HEADS_TOL) - accumulated
        return lo, hi

    def _open_window(self, k: int, accumulated: int):
        lo, hi = self.window_target(k, accumulated)
        clipped = (max(lo, 0), min(hi, self.T))
        if clipped[0] > clipped[1]:
            if self.policy == "error":
                raise InfeasibleError(
                    f"window starting at t={k} cannot reach the target: needs {lo}..{hi} heads out of {self.T}")
            nearest = self.T if lo > self.T else min(max(hi, 0), self.T)
            clipped = (nearest, nearest)
            self.saturated_windows += 1
            logging.warning(f"Window at t={k} infeasible (needs {lo}..{hi} heads); saturating toward {clipped[0]}")
        self.window_start, self.base_heads = k, accumulated
        cacheable = isinstance(self.bias_map, ConstantBiasMap)
        if cacheable and clipped in self._cache:
            self.table = self._cache[clipped]
            return
        self.table = _synthesize_heads(self.bias_map.shifted(k, accumulated), self.T, *clipped, self.cost)
        if cacheable:
            self._cache[clipped] = self.table

    def decide(self, t: int, h: int, x: int, p: float = 0.5) -> int:
        if t % self.T == 0 and (self.table is None or t != self.window_start):
            self._open_window(t, h)
        s, wh = t - self.window_start, h - self.base_heads
        keep = self.table[s + 1, wh + x]
        flip = self.table[s + 1, wh + 1 - x]
        if math.isinf(keep) and math.isinf(flip):
            raise InfeasibleError(f"no outcome reaches the window target from t={t}, h={h}")
        return x if keep <= float(self.cost.flip_cost(p, x, 1 - x)) + flip else 1 - x

    def step_cost(self, p: float, x: int, y: int) -> float:
        return float(self.cost.flip_cost(p, x, y))


def dynamic_shield(dynamics: Dynamics, T: int, interval: Interval, cost: CostModel) -> Tuple[ValueTable, Shield]:
    """Shield for count-determined dynamics (bias a function of tosses and heads)."""
    bias_map = count_bias_map(dynamics)
    if isinstance(bias_map, AdditiveBiasMap) and bias_map.leaves_unit_interval(T):
        logging.warning(f"Additive bias {bias_map.describe()} leaves [0,1] inside the window; clamping")
    table = synthesize_value_table(bias_map, T, interval, cost)
    return table, Shield(table, cost)
