"""
Runtime fairness monitors. Each monitor reads outcomes one at a time (plus the coin label when
the process is an observed Markov chain) and emits a confidence interval for a fairness
quantity that is pointwise or uniformly sound under the monitor's assumption on the dynamics.
"""
import logging
import math
from abc import ABC, abstractmethod
from collections import deque
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from fairness_core import (
    CONTAINS_TOL,
    DomainError,
    Interval,
    MeasureKind,
    ResourceCapError,
    UnmonitorableError,
)
from process_sim import (
    AdditiveDynamics,
    ConstantCoin,
    Dynamics,
    MarkovKernel,
    ScriptedBiases,
    coin_marginals,
    estimate_mixing_time,
    hidden_chain,
)

Bounds = Tuple[float, float]

MAX_PSI_HORIZON = 6
MAX_PSI_COINS = 8


class Mode(str, Enum):
    POINTWISE = "pointwise"
    UNIFORM = "uniform"


@dataclass(frozen=True)
class ConfidenceInterval:
    lo: float
    hi: float
    delta: float
    mode: Mode
    estimate: float = math.nan

    def __post_init__(self):
        if not 0.0 <= self.lo <= self.hi <= 1.0:
            raise DomainError(f"invalid confidence interval [{self.lo}, {self.hi}]")

    @classmethod
    def around(cls, lo: float, hi: float, delta: float, mode: Mode, estimate: float = math.nan) -> "ConfidenceInterval":
        """Clamp raw bounds into [0,1]."""
        clipped = Interval.clamped(lo, hi)
        return cls(clipped.lo, clipped.hi, delta, mode, estimate)

    @classmethod
    def trivial(cls, delta: float, mode: Mode, estimate: float = math.nan) -> "ConfidenceInterval":
        return cls(0.0, 1.0, delta, mode, estimate)

    def contains(self, value: float, tol: float = CONTAINS_TOL) -> bool:
        return self.lo - tol <= value <= self.hi + tol


def _check_delta(delta: float):
    if not 0.0 < delta < 1.0:
        raise DomainError(f"delta must lie in (0,1), got {delta}")


def _check_horizon(horizon: float):
    if horizon != math.inf and (horizon < 0 or int(horizon) != horizon):
        raise DomainError(f"horizon must be a natural number or inf, got {horizon}")


# =========================
#  Concentration bounds
# =========================
def hoeffding_pointwise_eps(t: int, delta: float) -> float:
    """sqrt(log(2/delta) / 2t): Hoeffding half-width at a fixed time."""
    _check_delta(delta)
    if t < 1:
        raise DomainError("the pointwise bound needs t >= 1")
    return math.sqrt(math.log(2.0 / delta) / (2.0 * t))


def stitched_uniform_eps(t: int, delta: float) -> float:
    """
    Time-uniform half-width sqrt(1.1 (2 log(pi log t / sqrt 6) + log(2/delta)) / t).
    For t < 2 the bound is undefined and the half-width is inf (trivial interval).
    """
    _check_delta(delta)
    if t < 2:
        return math.inf
    inner = 2.0 * math.log(math.pi * math.log(t) / math.sqrt(6.0)) + math.log(2.0 / delta)
    return math.sqrt(1.1 * max(inner, 0.0) / t)


def error_bound(t: int, delta: float, mode: Mode) -> float:
    if t < 1:
        return math.inf
    if mode is Mode.UNIFORM:
        return stitched_uniform_eps(t, delta)
    return hoeffding_pointwise_eps(t, delta)


def error_bounds(t: np.ndarray, delta: float, mode: Mode) -> np.ndarray:
    """Vectorized error_bound over an array of counts."""
    _check_delta(delta)
    t = np.asarray(t, dtype=float)
    safe = np.maximum(t, 2.0)
    if mode is Mode.UNIFORM:
        inner = 2.0 * np.log(math.pi * np.log(safe) / math.sqrt(6.0)) + math.log(2.0 / delta)
        eps = np.sqrt(1.1 * np.maximum(inner, 0.0) / safe)
        return np.where(t < 2, np.inf, eps)
    eps = np.sqrt(math.log(2.0 / delta) / (2.0 * np.maximum(t, 1.0)))
    return np.where(t < 1, np.inf, eps)


# =========================
#  Monitor base
# =========================
class Monitor(ABC):
    """Single-owner sequential state machine: update in observation order, query anytime."""

    def __init__(self, delta: float, mode: Mode):
        _check_delta(delta)
        self.delta = delta
        self.mode = Mode(mode)
        self.t = 0

    @abstractmethod
    def update(self, outcome: int, label: Optional[int] = None) -> None:
        ...

    @abstractmethod
    def interval(self) -> ConfidenceInterval:
        ...

    def feed(self, outcome: int, label: Optional[int] = None) -> ConfidenceInterval:
        self.update(outcome, label)
        return self.interval()

    def observe_all(self, outcomes: np.ndarray, labels: Optional[np.ndarray] = None) -> ConfidenceInterval:
        """Feed a whole block of observations and return the final verdict."""
        outcomes = np.asarray(outcomes).tolist()
        if labels is None:
            for x in outcomes:
                self.update(x)
        else:
            for x, k in zip(outcomes, np.asarray(labels).tolist()):
                self.update(x, k)
        return self.interval()

    def trajectory(self, outcomes: np.ndarray, labels: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
        """Interval bounds after every observation of the block, as (lo, hi) arrays."""
        los, his = [], []
        label_list = [None] * len(outcomes) if labels is None else np.asarray(labels).tolist()
        for x, k in zip(np.asarray(outcomes).tolist(), label_list):
            verdict = self.feed(x, k)
            los.append(verdict.lo)
            his.append(verdict.hi)
        return np.array(los), np.array(his)


# =========================
#  Exact outcome monitor
# =========================
class ExactOutcomeMonitor(Monitor):
    """Outcome fairness at horizon 0 is observable: the interval collapses onto the running mean."""

    def __init__(self, delta: float = 0.05, mode: Mode = Mode.POINTWISE):
        super().__init__(delta, mode)
        self.heads = 0

    @property
    def register(self) -> float:
        return self.heads / self.t if self.t else 0.0

    def update(self, outcome: int, label: Optional[int] = None) -> None:
        self.t += 1
        self.heads += outcome

    def interval(self) -> ConfidenceInterval:
        if self.t == 0:
            return ConfidenceInterval.trivial(self.delta, self.mode)
        r = self.register
        return ConfidenceInterval(r, r, self.delta, self.mode, r)

    def step(self, outcome: int) -> ConfidenceInterval:
        if outcome not in (0, 1):
            raise DomainError(f"outcome must be 0 or 1, got {outcome}")
        return self.feed(outcome)

    def observe_all(self, outcomes, labels=None) -> ConfidenceInterval:
        outcomes = np.asarray(outcomes)
        self.t += int(outcomes.size)
        self.heads += int(outcomes.sum())
        return self.interval()

    def trajectory(self, outcomes, labels=None):
        outcomes = np.asarray(outcomes)
        t = self.t + np.arange(1, outcomes.size + 1)
        r = (self.heads + np.cumsum(outcomes)) / t
        self.observe_all(outcomes)
        return r, r.copy()


# =========================
#  Static coin monitor
# =========================
def _static_bounds(r, eps, t, measure: MeasureKind, horizon: float):
    """Interval around the running mean; outcome fairness at finite horizon extrapolates."""
    if measure is MeasureKind.OUTCOME and horizon != math.inf:
        if horizon == 0:
            return r, r
        return (t * r + horizon * (r - eps)) / (t + horizon), (t * r + horizon * (r + eps)) / (t + horizon)
    return r - eps, r + eps


class StaticCoinMonitor(Monitor):
    """
    Monitor for a single unknown coin. All measures share the estimate R_t of the coin's bias;
    only outcome fairness at a finite horizon mixes the realized mean with the estimate.
    """

    def __init__(self, measure: MeasureKind = MeasureKind.BIAS, horizon: float = 0,
                 delta: float = 0.05, mode: Mode = Mode.POINTWISE):
        super().__init__(delta, mode)
        _check_horizon(horizon)
        self.measure = MeasureKind(measure)
        self.horizon = horizon
        self.heads = 0

    @property
    def register(self) -> float:
        return self.heads / self.t if self.t else 0.0

    def update(self, outcome: int, label: Optional[int] = None) -> None:
        self.t += 1
        self.heads += outcome

    def interval(self) -> ConfidenceInterval:
        if self.t == 0:
            return ConfidenceInterval.trivial(self.delta, self.mode)
        r = self.register
        eps = error_bound(self.t, self.delta, self.mode)
        lo, hi = _static_bounds(r, eps, self.t, self.measure, self.horizon)
        estimate = r
        return ConfidenceInterval.around(lo, hi, self.delta, self.mode, estimate)

    def step(self, outcome: int) -> ConfidenceInterval:
        if outcome not in (0, 1):
            raise DomainError(f"outcome must be 0 or 1, got {outcome}")
        return self.feed(outcome)

    def observe_all(self, outcomes, labels=None) -> ConfidenceInterval:
        outcomes = np.asarray(outcomes)
        self.t += int(outcomes.size)
        self.heads += int(outcomes.sum())
        return self.interval()

    def trajectory(self, outcomes, labels=None):
        outcomes = np.asarray(outcomes)
        t = self.t + np.arange(1, outcomes.size + 1)
        r = (self.heads + np.cumsum(outcomes)) / t
        eps = error_bounds(t, self.delta, self.mode)
        lo, hi = _static_bounds(r, eps, t, self.measure, self.horizon)
        self.observe_all(outcomes)
        lo = np.clip(np.broadcast_to(lo, r.shape), 0.0, 1.0)
        hi = np.clip(np.broadcast_to(hi, r.shape), 0.0, 1.0)
        return lo, np.maximum(lo, hi)


# =========================
#  Interval arithmetic over transition probabilities
# =========================
def mixture_bounds(weights: Sequence[Bounds], values: Sequence[Bounds]) -> Bounds:
    """
    Bounds on sum_j w_j v_j when w is a probability vector inside the weight box and each v_j lies
    in its interval. The weight box is intersected with the simplex (greedy allocation of the
    free mass); an empty intersection falls back to plain interval arithmetic.
    """
    lo_w = [w[0] for w in weights]
    hi_w = [w[1] for w in weights]
    base = math.fsum(lo_w)
    if base > 1.0 + 1e-12 or math.fsum(hi_w) < 1.0 - 1e-12:
        lower = sum(min(w[0] * v[0], w[1] * v[0]) for w, v in zip(weights, values))
        upper = sum(max(w[0] * v[1], w[1] * v[1]) for w, v in zip(weights, values))
        return lower, upper

    def extreme(key: int, reverse: bool) -> float:
        mass = 1.0 - base
        total = sum(lo_w[j] * values[j][key] for j in range(len(values)))
        for j in sorted(range(len(values)), key=lambda j: values[j][key], reverse=reverse):
            if mass <= 0.0:
                break
            add = min(hi_w[j] - lo_w[j], mass)
            total += add * values[j][key]
            mass -= add
        return total

    return extreme(0, False), extreme(1, True)


def _clip(bounds: Bounds) -> Bounds:
    lo = min(max(bounds[0], 0.0), 1.0)
    hi = min(max(bounds[1], 0.0), 1.0)
    return lo, max(lo, hi)


def _outcome_weights(bias: Bounds) -> List[Bounds]:
    return [(1.0 - bias[1], 1.0 - bias[0]), bias]


def horizon_biases(bias: Sequence[Bounds], rows: Sequence[Sequence[Sequence[Bounds]]],
                   coin: int, outcome: int, horizon: int) -> List[Bounds]:
    """
    Bounds on E(P_{t+j} | W_t = (coin, outcome)) for j = 0..horizon, from bounds on the coin
    biases and on the rows rows[k][x][k'] of the coin kernel. Every intermediate quantity is a
    probability, so clipping to [0,1] keeps the result sound.
    """
    n = len(bias)
    if horizon > MAX_PSI_HORIZON or n > MAX_PSI_COINS:
        raise ResourceCapError(
            f"horizon expressions are capped at h <= {MAX_PSI_HORIZON} and n <= {MAX_PSI_COINS} coins")
    result = [bias[coin]]
    ahead = list(bias)
    for _ in range(1, horizon + 1):
        result.append(_clip(mixture_bounds(rows[coin][outcome], ahead)))
        ahead = [
            _clip(mixture_bounds(_outcome_weights(bias[k]),
                                 [_clip(mixture_bounds(rows[k][x], ahead)) for x in (0, 1)]))
            for k in range(n)
        ]
    return result


# =========================
#  Observed Markov monitor
# =========================
@dataclass(frozen=True)
class MarkovVerdict:
    transitions: Dict[Tuple[tuple, tuple], ConfidenceInterval]
    current: ConfidenceInterval
    bias: ConfidenceInterval
    outcome: ConfidenceInterval

    def select(self, measure: MeasureKind) -> ConfidenceInterval:
        return {MeasureKind.CURRENT: self.current, MeasureKind.BIAS: self.bias,
                MeasureKind.OUTCOME: self.outcome}[MeasureKind(measure)]


class MarkovMonitor(Monitor):
    """
    Monitor for an irreducible Markov chain over finitely many coins whose labels are observed.
    The numeric biases are not known: each bias p^(k) is the transition probability from coin
    state k to pair state (k, 1) and is estimated from counts like every other transition.
    """

    def __init__(self, n: int, measure: MeasureKind = MeasureKind.CURRENT, horizon: int = 0,
                 delta: float = 0.05, mode: Mode = Mode.POINTWISE):
        super().__init__(delta, mode)
        if n < 1:
            raise DomainError("need at least one coin")
        if horizon == math.inf:
            raise UnmonitorableError("the observed-Markov monitor handles finite horizons only")
        _check_horizon(horizon)
        if horizon > MAX_PSI_HORIZON or n > MAX_PSI_COINS:
            raise ResourceCapError(
                f"horizon expressions are capped at h <= {MAX_PSI_HORIZON} and n <= {MAX_PSI_COINS} coins")
        self.n = n
        self.measure = MeasureKind(measure)
        self.horizon = int(horizon)
        self.visits = [0] * n
        self.coin_heads = [0] * n
        self.row_visits = [[0, 0] for _ in range(n)]
        self.row_counts = [[[0] * n for _ in (0, 1)] for _ in range(n)]
        self.heads = 0
        self.last: Optional[Tuple[int, int]] = None

    @property
    def quantities(self) -> int:
        """Monitored transition probabilities: n biases plus n-1 free entries of 2n rows."""
        return self.n + 2 * self.n * (self.n - 1)

    @property
    def budgets(self) -> List[float]:
        q = self.quantities
        return [self.delta / q] * q

    @property
    def quantity_delta(self) -> float:
        return self.delta / self.quantities

    def update(self, outcome: int, label: Optional[int] = None) -> None:
        if label is None or not 0 <= label < self.n:
            raise DomainError(f"the Markov monitor needs a coin label in [0, {self.n}), got {label}")
        if outcome not in (0, 1):
            raise DomainError(f"outcome must be 0 or 1, got {outcome}")
        if self.last is not None:
            k, x = self.last
            self.row_visits[k][x] += 1
            self.row_counts[k][x][label] += 1
        self.t += 1
        self.visits[label] += 1
        self.coin_heads[label] += outcome
        self.heads += outcome
        self.last = (label, outcome)

    def _mean_bounds(self, hits: int, count: int) -> Bounds:
        if count == 0:
            return 0.0, 1.0
        eps = error_bound(count, self.quantity_delta, self.mode)
        mean = hits / count
        return _clip((mean - eps, mean + eps))

    def bias_bounds(self) -> List[Bounds]:
        return [self._mean_bounds(self.coin_heads[k], self.visits[k]) for k in range(self.n)]

    def row_bounds(self) -> List[List[List[Bounds]]]:
        rows = []
        for k in range(self.n):
            per_outcome = []
            for x in (0, 1):
                count = self.row_visits[k][x]
                free = [self._mean_bounds(self.row_counts[k][x][j], count) for j in range(self.n - 1)]
                last = _clip((1.0 - sum(b[1] for b in free), 1.0 - sum(b[0] for b in free)))
                per_outcome.append(free + [last])
            rows.append(per_outcome)
        return rows

    def _point_inputs(self) -> Tuple[List[Bounds], List[List[List[Bounds]]]]:
        bias = [(h / c, h / c) if c else (0.5, 0.5) for h, c in zip(self.coin_heads, self.visits)]
        rows = []
        for k in range(self.n):
            per_outcome = []
            for x in (0, 1):
                count = self.row_visits[k][x]
                probs = ([c / count for c in self.row_counts[k][x]] if count
                         else [1.0 / self.n] * self.n)
                per_outcome.append([(p, p) for p in probs])
            rows.append(per_outcome)
        return bias, rows

    def _combine(self, bias: List[Bounds], rows, coin: int, outcome: int) -> Tuple[Bounds, Bounds, Bounds]:
        ahead = horizon_biases(bias, rows, coin, outcome, self.horizon)
        future_lo = sum(b[0] for b in ahead[1:])
        future_hi = sum(b[1] for b in ahead[1:])
        span = self.t + self.horizon
        realized_lo = sum(c * b[0] for c, b in zip(self.visits, bias))
        realized_hi = sum(c * b[1] for c, b in zip(self.visits, bias))
        bias_bounds = ((realized_lo + future_lo) / span, (realized_hi + future_hi) / span)
        outcome_bounds = ((self.heads + future_lo) / span, (self.heads + future_hi) / span)
        return ahead[-1], bias_bounds, outcome_bounds

    def verdict(self) -> MarkovVerdict:
        dq = self.quantity_delta
        bias = self.bias_bounds()
        rows = self.row_bounds()
        transitions: Dict[Tuple[tuple, tuple], ConfidenceInterval] = {}
        for k in range(self.n):
            transitions[((k,), (k, 1))] = ConfidenceInterval.around(*bias[k], dq, self.mode)
            transitions[((k,), (k, 0))] = ConfidenceInterval.around(1.0 - bias[k][1], 1.0 - bias[k][0], dq, self.mode)
            for x in (0, 1):
                for j in range(self.n):
                    transitions[((k, x), (j,))] = ConfidenceInterval.around(*rows[k][x][j], dq, self.mode)
        if self.last is None:
            trivial = ConfidenceInterval.trivial(self.delta, self.mode)
            return MarkovVerdict(transitions, trivial, trivial, trivial)
        coin, outcome = self.last
        current, bias_f, outcome_f = self._combine(bias, rows, coin, outcome)
        p_bias, p_rows = self._point_inputs()
        est_current, est_bias, est_outcome = self._combine(p_bias, p_rows, coin, outcome)
        return MarkovVerdict(
            transitions,
            ConfidenceInterval.around(*current, self.delta, self.mode, est_current[0]),
            ConfidenceInterval.around(*bias_f, self.delta, self.mode, est_bias[0]),
            ConfidenceInterval.around(*outcome_f, self.delta, self.mode, est_outcome[0]),
        )

    def interval(self) -> ConfidenceInterval:
        return self.verdict().select(self.measure)

    def step(self, label: int, outcome: int) -> MarkovVerdict:
        self.update(outcome, label)
        return self.verdict()

    def observe_all(self, outcomes, labels=None) -> ConfidenceInterval:
        if labels is None:
            raise DomainError("the Markov monitor needs coin labels")
        for x, k in zip(np.asarray(outcomes).tolist(), np.asarray(labels).tolist()):
            self.update(x, k)
        return self.interval()


# =========================
#  Hidden Markov monitor
# =========================
def heads_indicator(window: Tuple[int, ...]) -> float:
    return float(window[-1])


class HiddenMarkovMonitor(Monitor):
    """
    Monitor for limit properties of a stationary, aperiodic, irreducible chain whose coins are
    hidden. Estimates E_pi(f(X_1..X_n)) for f with values in [a, b] from a sliding window; the
    error bound inflates with the mixing-time bound tau.
    """

    def __init__(self, tau: int, delta: float = 0.05, mode: Mode = Mode.POINTWISE,
                 f: Callable[[Tuple[int, ...]], float] = heads_indicator,
                 arity: int = 1, a: float = 0.0, b: float = 1.0,
                 measure: MeasureKind = MeasureKind.OUTCOME, horizon: float = math.inf):
        super().__init__(delta, mode)
        if horizon != math.inf:
            raise UnmonitorableError(
                "the hidden-Markov monitor only covers limit properties (horizon = inf)")
        if tau < 1:
            raise DomainError("mixing-time bound must be >= 1")
        if arity < 1 or not 0.0 <= a <= b <= 1.0:
            raise DomainError("need arity >= 1 and 0 <= a <= b <= 1")
        self.tau = int(tau)
        self.f = f
        self.arity = arity
        self.a, self.b = a, b
        self.measure = MeasureKind(measure)
        self.window: deque = deque(maxlen=arity)
        self.register = 0.0

    def update(self, outcome: int, label: Optional[int] = None) -> None:
        self.t += 1
        self.window.append(outcome)
        if self.t >= self.arity:
            m = self.t - self.arity + 1
            self.register = (self.register * (m - 1) + self.f(tuple(self.window))) / m

    def error(self, t: int) -> float:
        if self.mode is Mode.UNIFORM:
            k = math.log(math.pi ** 2 * t ** 2 / (3.0 * self.delta))
        else:
            k = math.log(2.0 / self.delta)
        n = self.arity
        return math.sqrt(9.0 * t * n ** 2 * (self.b - self.a) ** 2 * self.tau * k / (2.0 * (t - (n - 1)) ** 2))

    def interval(self) -> ConfidenceInterval:
        if self.t < self.arity:
            return ConfidenceInterval.trivial(self.delta, self.mode)
        e = self.error(self.t)
        return ConfidenceInterval.around(self.register - e, self.register + e, self.delta, self.mode, self.register)

    def step(self, outcome: int) -> ConfidenceInterval:
        if outcome not in (0, 1):
            raise DomainError(f"outcome must be 0 or 1, got {outcome}")
        return self.feed(outcome)

    def observe_all(self, outcomes, labels=None) -> ConfidenceInterval:
        outcomes = np.asarray(outcomes)
        if self.f is not heads_indicator or self.arity != 1:
            return super().observe_all(outcomes)
        total = self.register * self.t + float(outcomes.sum())
        self.t += int(outcomes.size)
        if outcomes.size:
            self.window.append(int(outcomes[-1]))
        self.register = total / self.t if self.t else 0.0
        return self.interval()


# =========================
#  Additive dynamics monitor
# =========================
@dataclass(frozen=True)
class AdditiveVerdict:
    current: ConfidenceInterval
    bias: ConfidenceInterval
    next_bias: ConfidenceInterval


class AdditiveMonitor(Monitor):
    """
    Monitor for p_{t+1} = p_t + beta(x_t) with known beta and unknown p_1. R estimates p_1,
    C accumulates the shift and A accumulates the shifts seen by every toss so far.
    """

    def __init__(self, beta0: float, beta1: float, delta: float = 0.05, mode: Mode = Mode.POINTWISE,
                 measure: MeasureKind = MeasureKind.CURRENT, horizon: float = 0):
        super().__init__(delta, mode)
        measure = MeasureKind(measure)
        if measure is MeasureKind.OUTCOME or horizon != 0:
            raise UnmonitorableError(
                "the additive-dynamics monitor covers bias and current fairness at horizon 0")
        self.beta0, self.beta1 = beta0, beta1
        self.measure = measure
        self.r = 0.0
        self.c = 0.0
        self.c_before = 0.0
        self.a = 0.0

    def beta(self, x: int) -> float:
        return self.beta1 if x == 1 else self.beta0

    def update(self, outcome: int, label: Optional[int] = None) -> None:
        self.t += 1
        self.c_before = self.c
        self.r = (self.r * (self.t - 1) + (outcome - self.c_before)) / self.t
        self.a += self.c_before
        self.c = self.c_before + self.beta(outcome)

    def verdict(self) -> AdditiveVerdict:
        if self.t == 0:
            trivial = ConfidenceInterval.trivial(self.delta, self.mode)
            return AdditiveVerdict(trivial, trivial, trivial)
        eps = error_bound(self.t, self.delta, self.mode)

        def around(center: float) -> ConfidenceInterval:
            return ConfidenceInterval.around(center - eps, center + eps, self.delta, self.mode, center)

        return AdditiveVerdict(
            around(self.r + self.c_before),
            around(self.r + self.a / self.t),
            around(self.r + self.c),
        )

    def interval(self) -> ConfidenceInterval:
        verdict = self.verdict()
        return verdict.current if self.measure is MeasureKind.CURRENT else verdict.bias

    def step(self, outcome: int) -> AdditiveVerdict:
        if outcome not in (0, 1):
            raise DomainError(f"outcome must be 0 or 1, got {outcome}")
        self.update(outcome)
        return self.verdict()


# =========================
#  Problem-class dispatch
# =========================
def monitor_for(dynamics: Dynamics, measure: MeasureKind, horizon: float,
                delta: float, mode: Mode, tau: Optional[int] = None) -> Monitor:
    """Monitor whose assumption covers the dynamics class, or UnmonitorableError."""
    measure = MeasureKind(measure)
    _check_horizon(horizon)
    if measure is MeasureKind.OUTCOME and horizon == 0:
        return ExactOutcomeMonitor(delta, mode)
    if isinstance(dynamics, ScriptedBiases):
        if measure is MeasureKind.OUTCOME and horizon == math.inf:
            raise UnmonitorableError(
                "limit outcome fairness cannot be monitored under unrestricted dynamics: "
                "no finite prefix tells whether the limit is 0 or 1")
        raise UnmonitorableError(
            f"no sound monitor for {measure.value} fairness at horizon {horizon} under unrestricted dynamics")
    if isinstance(dynamics, ConstantCoin):
        return StaticCoinMonitor(measure, horizon, delta, mode)
    if isinstance(dynamics, AdditiveDynamics):
        if dynamics.is_static():
            return StaticCoinMonitor(measure, horizon, delta, mode)
        return AdditiveMonitor(dynamics.beta0, dynamics.beta1, delta, mode, measure, horizon)
    if isinstance(dynamics, MarkovKernel):
        if horizon != math.inf:
            return MarkovMonitor(dynamics.n, measure, int(horizon), delta, mode)
        if not np.allclose(dynamics.initial, coin_marginals(dynamics), atol=1e-6):
            logging.warning("Markov dynamics do not start in their stationary distribution; "
                            "the hidden-Markov guarantee assumes they do")
        if tau is None:
            tau = estimate_mixing_time(hidden_chain(dynamics))
        return HiddenMarkovMonitor(tau, delta, mode, measure=measure)
    raise UnmonitorableError(f"unknown dynamics {type(dynamics).__name__}")
