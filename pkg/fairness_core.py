"""
Coin/outcome domain, fairness measures over finite prefixes, target-interval schedules,
and the error hierarchy shared by every fairwatch module.
"""
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

# Slack used when mapping fractions like 10 * 0.4 to integer head counts.
HEADS_TOL = 1e-9
# Slack used when testing whether a fairness value lies inside an interval.
CONTAINS_TOL = 1e-12


# =========================
#  Errors
# =========================
class FairwatchError(Exception):
    """Base error; carries the CLI exit status and a short machine code."""
    exit_code = 1
    code = "fairwatch_error"


class DomainError(FairwatchError, ValueError):
    exit_code = 2
    code = "domain_error"


class ConfigError(FairwatchError):
    exit_code = 2
    code = "config_error"


class InfeasibleError(FairwatchError):
    exit_code = 3
    code = "infeasible"


class ResourceCapError(FairwatchError):
    exit_code = 4
    code = "resource_cap"


class UnsupportedDynamicsError(FairwatchError, TypeError):
    exit_code = 2
    code = "unsupported_dynamics"


class UnmonitorableError(FairwatchError):
    exit_code = 2
    code = "unmonitorable"


class WindowClosedError(FairwatchError):
    code = "window_closed"


# =========================
#  Domain types
# =========================
@dataclass(frozen=True)
class BiasOutcomePair:
    """One coin toss: the head-probability of the coin and the observed outcome (1 = heads)."""
    bias: float
    outcome: int

    def __post_init__(self):
        if not 0.0 <= self.bias <= 1.0:
            raise DomainError(f"bias must lie in [0,1], got {self.bias}")
        if self.outcome not in (0, 1):
            raise DomainError(f"outcome must be 0 or 1, got {self.outcome}")


@dataclass(frozen=True, eq=False)
class Trace:
    """
    Realized process history, stored column-wise so that long simulations stay cheap.
    Iterating yields BiasOutcomePair objects in time order.
    """
    biases: np.ndarray
    outcomes: np.ndarray

    def __post_init__(self):
        biases = np.asarray(self.biases, dtype=float).reshape(-1)
        outcomes = np.asarray(self.outcomes, dtype=np.int8).reshape(-1)
        if biases.shape != outcomes.shape:
            raise DomainError("biases and outcomes must have the same length")
        if biases.size and (biases.min() < 0.0 or biases.max() > 1.0):
            raise DomainError("every bias must lie in [0,1]")
        if outcomes.size and not np.isin(outcomes, (0, 1)).all():
            raise DomainError("every outcome must be 0 or 1")
        biases.setflags(write=False)
        outcomes.setflags(write=False)
        object.__setattr__(self, "biases", biases)
        object.__setattr__(self, "outcomes", outcomes)

    @classmethod
    def empty(cls) -> "Trace":
        return cls(np.zeros(0), np.zeros(0, dtype=np.int8))

    @classmethod
    def from_pairs(cls, pairs: Sequence) -> "Trace":
        """Build a trace from BiasOutcomePair objects or plain (bias, outcome) tuples."""
        rows = [(p.bias, p.outcome) if isinstance(p, BiasOutcomePair) else tuple(p) for p in pairs]
        if not rows:
            return cls.empty()
        biases, outcomes = zip(*rows)
        return cls(np.array(biases, dtype=float), np.array(outcomes, dtype=np.int8))

    def __len__(self) -> int:
        return int(self.biases.shape[0])

    def __iter__(self) -> Iterator[BiasOutcomePair]:
        for bias, outcome in zip(self.biases.tolist(), self.outcomes.tolist()):
            yield BiasOutcomePair(bias, outcome)

    def __getitem__(self, index: int) -> BiasOutcomePair:
        return BiasOutcomePair(float(self.biases[index]), int(self.outcomes[index]))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Trace):
            return NotImplemented
        return np.array_equal(self.biases, other.biases) and np.array_equal(self.outcomes, other.outcomes)

    def prefix(self, m: int) -> "Trace":
        if not 0 <= m <= len(self):
            raise DomainError(f"prefix length {m} outside [0, {len(self)}]")
        return Trace(self.biases[:m], self.outcomes[:m])

    def append(self, pair: BiasOutcomePair) -> "Trace":
        return Trace(np.append(self.biases, pair.bias), np.append(self.outcomes, pair.outcome))

    @property
    def heads(self) -> int:
        return int(self.outcomes.sum())


@dataclass(frozen=True)
class Interval:
    """Closed subinterval [lo, hi] of [0, 1]."""
    lo: float = 0.0
    hi: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.lo <= self.hi <= 1.0:
            raise DomainError(f"invalid interval [{self.lo}, {self.hi}]")

    @classmethod
    def clamped(cls, lo: float, hi: float) -> "Interval":
        """Clip arbitrary bounds into [0,1]; bounds entirely outside collapse onto the nearest end."""
        lo = min(max(lo, 0.0), 1.0)
        hi = min(max(hi, 0.0), 1.0)
        return cls(lo, max(lo, hi))

    @property
    def midpoint(self) -> float:
        return (self.lo + self.hi) / 2

    def is_trivial(self) -> bool:
        return self.lo == 0.0 and self.hi == 1.0

    def contains(self, value: float, tol: float = CONTAINS_TOL) -> bool:
        return self.lo - tol <= value <= self.hi + tol

    def includes(self, other: "Interval", tol: float = CONTAINS_TOL) -> bool:
        return self.lo - tol <= other.lo and other.hi <= self.hi + tol

    def intersect(self, other: "Interval") -> Optional["Interval"]:
        lo, hi = max(self.lo, other.lo), min(self.hi, other.hi)
        return Interval(lo, hi) if lo <= hi else None

    def __str__(self) -> str:
        return f"[{self.lo}, {self.hi}]"


UNIT_INTERVAL = Interval(0.0, 1.0)


def heads_range(total: int, interval: Interval) -> Tuple[int, int]:
    """
    Integer head counts h in [0, total] with h/total inside the interval.
    Returns (lo, hi); the range is empty when lo > hi.
    """
    if total <= 0:
        return 0, 0
    lo = max(0, math.ceil(total * interval.lo - HEADS_TOL))
    hi = min(total, math.floor(total * interval.hi + HEADS_TOL))
    return lo, hi


@dataclass(frozen=True)
class TargetIntervalSchedule:
    """
    Sequence of target intervals I_t for t >= 1. Explicit overrides win; otherwise a periodic
    interval applies at multiples of `period`; every other time yields [0,1].
    """
    overrides: Mapping[int, Interval] = field(default_factory=dict)
    period: Optional[int] = None
    periodic_interval: Optional[Interval] = None

    def __post_init__(self):
        if any(t < 1 for t in self.overrides):
            raise DomainError("schedule times start at t = 1")
        if (self.period is None) != (self.periodic_interval is None):
            raise DomainError("period and periodic_interval must be given together")
        if self.period is not None and self.period < 1:
            raise DomainError("period must be >= 1")

    @classmethod
    def finite_window(cls, window: int, interval: Interval) -> "TargetIntervalSchedule":
        return cls(overrides={window: interval})

    @classmethod
    def periodic(cls, window: int, interval: Interval) -> "TargetIntervalSchedule":
        return cls(period=window, periodic_interval=interval)

    @classmethod
    def from_rows(cls, rows: Sequence[Tuple[int, float, float]]) -> "TargetIntervalSchedule":
        return cls(overrides={int(t): Interval(float(lo), float(hi)) for t, lo, hi in rows})

    def at(self, t: int) -> Interval:
        if t in self.overrides:
            return self.overrides[t]
        if self.period is not None and t % self.period == 0:
            return self.periodic_interval
        return UNIT_INTERVAL

    def constrained_times(self) -> List[int]:
        return sorted(self.overrides)

    def intersection(self) -> Optional[Interval]:
        """Intersection of every I_t, or None when it is empty."""
        result = UNIT_INTERVAL
        intervals = list(self.overrides.values())
        if self.periodic_interval is not None:
            intervals.append(self.periodic_interval)
        for interval in intervals:
            result = result.intersect(interval)
            if result is None:
                return None
        return result


class MeasureKind(str, Enum):
    OUTCOME = "outcome"
    BIAS = "bias"
    CURRENT = "current"

    def evaluate(self, prefix: Trace) -> float:
        return MEASURES[self](prefix)


# =========================
#  Fairness measures
# =========================
def _require_nonempty(prefix: Trace, name: str):
    if len(prefix) == 0:
        raise DomainError(f"{name} is undefined on the empty prefix")


def outcome_fairness(prefix: Trace) -> float:
    """Average of the toss outcomes of the prefix."""
    _require_nonempty(prefix, "outcome fairness")
    return prefix.heads / len(prefix)


def bias_fairness(prefix: Trace) -> float:
    """Average of the coin biases of the prefix."""
    _require_nonempty(prefix, "bias fairness")
    return math.fsum(prefix.biases.tolist()) / len(prefix)


def current_fairness(prefix: Trace) -> float:
    """Bias of the most recent coin."""
    _require_nonempty(prefix, "current fairness")
    return float(prefix.biases[-1])


MEASURES: Dict[MeasureKind, Callable[[Trace], float]] = {
    MeasureKind.OUTCOME: outcome_fairness,
    MeasureKind.BIAS: bias_fairness,
    MeasureKind.CURRENT: current_fairness,
}


class RunningMeasures:
    """
    Incremental evaluation of all three measures: running sums, never recomputed averages.
    """

    def __init__(self):
        self.t = 0
        self.heads = 0
        self.bias_sum = 0.0
        self.last_bias: Optional[float] = None

    def push(self, pair: BiasOutcomePair) -> None:
        self.t += 1
        self.heads += pair.outcome
        self.bias_sum += pair.bias
        self.last_bias = pair.bias

    def value(self, measure: MeasureKind) -> float:
        if self.t == 0:
            raise DomainError(f"{measure.value} fairness is undefined on the empty prefix")
        if measure is MeasureKind.OUTCOME:
            return self.heads / self.t
        if measure is MeasureKind.BIAS:
            return self.bias_sum / self.t
        return self.last_bias
