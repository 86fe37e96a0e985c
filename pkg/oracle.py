"""
Brute-force reference implementations. Exponential in the instance size and kept small on
purpose; none of this shares arithmetic with the DP or monitor code it is used to check.
"""
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from tqdm import tqdm

from fairness_core import (
    DomainError,
    MeasureKind,
    ResourceCapError,
    Trace,
    UnsupportedDynamicsError,
)
from monitors import Mode, Monitor
from process_sim import (
    AdditiveDynamics,
    ConstantCoin,
    Dynamics,
    MarkovKernel,
    ScriptedBiases,
    coin_labels,
    simulate,
)

MAX_REACH_SUFFIX = 24
MAX_TREE_WINDOW = 12
MAX_RUNTIME_HORIZON = 8
_POPCOUNT = np.array([bin(i).count("1") for i in range(256)], dtype=np.int64)
_ENUMERATION_CHUNK = 1 << 16


def _lands(heads: int, T: int, lo: float, hi: float) -> bool:
    return lo * T - 1e-9 <= heads <= hi * T + 1e-9


def _popcount(ids: np.ndarray) -> np.ndarray:
    total = np.zeros_like(ids)
    for shift in range(0, 32, 8):
        total += _POPCOUNT[(ids >> shift) & 0xFF]
    return total


# =========================
#  Enforcement oracles
# =========================
def enumerate_reach_probability(p: float, T: int, interval, t: int = 0, h: int = 0) -> float:
    """Probability that the unenforced coin lands in the interval at T, summed suffix by suffix."""
    n = T - t
    if n > MAX_REACH_SUFFIX:
        raise ResourceCapError(f"suffix enumeration is capped at {MAX_REACH_SUFFIX} tosses, got {n}")
    total = 0.0
    for start in range(0, 1 << n, _ENUMERATION_CHUNK):
        ids = np.arange(start, min(start + _ENUMERATION_CHUNK, 1 << n), dtype=np.int64)
        k = _popcount(ids)
        weights = np.power(p, k) * np.power(1.0 - p, n - k)
        hits = (h + k >= interval.lo * T - 1e-9) & (h + k <= interval.hi * T + 1e-9)
        total += float(weights[hits].sum())
    return total


def enumerate_optimal_cost(bias_map: Callable[[int, int], float], T: int, interval, cost) -> float:
    """
    Optimal expected flip cost by backward induction over the full binary history tree: every
    enforced history is its own node, with no merging of histories sharing (t, h).
    """
    if T > MAX_TREE_WINDOW:
        raise ResourceCapError(f"history-tree search is capped at T <= {MAX_TREE_WINDOW}")

    def solve(history: Tuple[int, ...]) -> float:
        t = len(history)
        heads = sum(history)
        if t == T:
            return 0.0 if _lands(heads, T, interval.lo, interval.hi) else math.inf
        p = bias_map(t, heads)
        outcome_values = {}
        for y in (0, 1):
            outcome_values[y] = solve(history + (y,))
        expected = 0.0
        for x, weight in ((1, p), (0, 1.0 - p)):
            if weight == 0:
                continue
            best = min(outcome_values[x], float(cost.flip_cost(p, x, 1 - x)) + outcome_values[1 - x])
            expected += weight * best
        return expected

    return solve(())


def enforced_reach_probability(decide: Callable[[int, int, int], int], bias, T: int, interval) -> float:
    """
    Exact probability that the enforced process lands in the interval at T, by pushing the
    distribution over head counts forward through the enforcer's decisions.
    """
    bias_at = bias if callable(bias) else (lambda t, h: bias)
    mass: Dict[int, float] = {0: 1.0}
    for t in range(T):
        nxt: Dict[int, float] = {}
        for h, weight in mass.items():
            p = bias_at(t, h)
            for x, px in ((1, p), (0, 1.0 - p)):
                if px == 0:
                    continue
                y = decide(t, h, x)
                nxt[h + y] = nxt.get(h + y, 0.0) + weight * px
        mass = nxt
    return math.fsum(w for h, w in mass.items() if _lands(h, T, interval.lo, interval.hi))


# =========================
#  Runtime fairness by enumeration
# =========================
def _continuations(dynamics: Dynamics, prefix: Trace, label: Optional[int]):
    """Returns (start state, coins, after): coins(state) lists (probability, bias, coin state) for the
    next toss and after(coin state, outcome) is the state once that toss is seen."""
    t = len(prefix)
    last_bias = float(prefix.biases[-1]) if t else None
    last_outcome = int(prefix.outcomes[-1]) if t else None

    if isinstance(dynamics, ConstantCoin):
        def coins(state):
            return [(1.0, dynamics.p, state)]
        return None, coins, lambda state, x: state

    if isinstance(dynamics, ScriptedBiases):
        def coins(state):
            return [(1.0, dynamics.biases[state], state)]
        return t, coins, lambda state, x: state + 1

    if isinstance(dynamics, AdditiveDynamics):
        def coins(state):
            return [(1.0, state, state)]

        def after(state, x):
            return min(max(state + (dynamics.beta1 if x == 1 else dynamics.beta0), 0.0), 1.0)
        start = dynamics.p1 if t == 0 else after(last_bias, last_outcome)
        return start, coins, after

    if isinstance(dynamics, MarkovKernel):
        if t and label is None:
            label = dynamics.label_of(last_bias)

        def coins(state):
            k, x = state
            row = dynamics.initial if k is None else dynamics.kernel[k, x]
            return [(float(row[j]), float(dynamics.biases[j]), j) for j in range(dynamics.n) if row[j] > 0]

        return (label, last_outcome) if t else (None, None), coins, lambda state, x: (state, x)

    raise UnsupportedDynamicsError(f"no enumeration for {type(dynamics).__name__} dynamics")


def exact_runtime_fairness(dynamics: Dynamics, prefix: Trace, horizon: int,
                           measure: MeasureKind, label: Optional[int] = None) -> float:
    """
    E(measure(W_{1:t+h}) | prefix) by enumerating every (coin, outcome) continuation of length h.
    For Markov dynamics the current coin is `label`, or is recovered from the last bias.
    """
    measure = MeasureKind(measure)
    if horizon > MAX_RUNTIME_HORIZON:
        raise ResourceCapError(f"continuation enumeration is capped at h <= {MAX_RUNTIME_HORIZON}")
    if horizon == 0:
        return measure.evaluate(prefix)
    t = len(prefix)
    start, coins, after = _continuations(dynamics, prefix, label)
    base_heads = float(prefix.outcomes.sum())
    base_bias = math.fsum(prefix.biases.tolist())

    def walk(state, depth: int, heads: float, bias_sum: float, weight: float) -> float:
        total = 0.0
        for coin_prob, bias, coin_state in coins(state):
            for x, px in ((1, bias), (0, 1.0 - bias)):
                w = weight * coin_prob * px
                if w == 0:
                    continue
                nxt = after(coin_state, x)
                if depth + 1 == horizon:
                    if measure is MeasureKind.OUTCOME:
                        value = (heads + x) / (t + horizon)
                    elif measure is MeasureKind.BIAS:
                        value = (bias_sum + bias) / (t + horizon)
                    else:
                        value = bias
                    total += w * value
                else:
                    total += walk(nxt, depth + 1, heads + x, bias_sum + bias, w)
        return total

    return walk(start, 0, base_heads, base_bias, 1.0)


# =========================
#  Empirical coverage
# =========================
@dataclass(frozen=True)
class CoverageResult:
    trials: int
    hits: int
    rate: float
    margin: float

    def to_dict(self) -> dict:
        return {"trials": self.trials, "hits": self.hits, "rate": self.rate, "margin": self.margin}


def binomial_margin(delta: float, trials: int) -> float:
    """Three standard deviations of a Bernoulli(1 - delta) hit rate over `trials` runs."""
    return 3.0 * math.sqrt(delta * (1.0 - delta) / trials)


class MeasureTruth:
    """Truth = the measure on the realized prefix (the right target for horizon 0)."""

    def __init__(self, measure: MeasureKind):
        self.measure = MeasureKind(measure)

    def __call__(self, trace: Trace, t: int) -> float:
        return self.measure.evaluate(trace.prefix(t))

    def series(self, trace: Trace) -> np.ndarray:
        t = np.arange(1, len(trace) + 1)
        if self.measure is MeasureKind.OUTCOME:
            return np.cumsum(trace.outcomes) / t
        if self.measure is MeasureKind.BIAS:
            return np.cumsum(trace.biases) / t
        return trace.biases.astype(float)


class ConstantTruth:
    """Truth that does not depend on the trace, e.g. a static coin's bias or a stationary limit."""

    def __init__(self, value: float):
        self.value = value

    def __call__(self, trace: Trace, t: int) -> float:
        return self.value

    def series(self, trace: Trace) -> np.ndarray:
        return np.full(len(trace), self.value)


class RuntimeTruth:
    """Truth = exact conditional expectation of the measure h steps ahead of the prefix."""

    def __init__(self, dynamics: Dynamics, measure: MeasureKind, horizon: int):
        self.dynamics = dynamics
        self.measure = MeasureKind(measure)
        self.horizon = horizon

    def __call__(self, trace: Trace, t: int) -> float:
        return exact_runtime_fairness(self.dynamics, trace.prefix(t), self.horizon, self.measure)

    def series(self, trace: Trace) -> np.ndarray:
        return np.array([self(trace, t) for t in range(1, len(trace) + 1)])


def _coverage_trial(args) -> bool:
    monitor_builder, dynamics, truth, T, mode, seed = args
    trace = simulate(dynamics, T, seed)
    labels = coin_labels(dynamics, trace) if isinstance(dynamics, MarkovKernel) else None
    monitor: Monitor = monitor_builder()
    if Mode(mode) is Mode.UNIFORM:
        lo, hi = monitor.trajectory(trace.outcomes, labels)
        truths = truth.series(trace)
        return bool(np.all((lo - 1e-12 <= truths) & (truths <= hi + 1e-12)))
    verdict = monitor.observe_all(trace.outcomes, labels)
    return verdict.contains(truth(trace, T))


def empirical_coverage(monitor_builder: Callable[[], Monitor], dynamics: Dynamics, truth,
                       T: int, trials: int, delta: float, mode: Mode, seed: int,
                       jobs: int = 1, progress: bool = False) -> CoverageResult:
    """
    Fraction of seeded trials (seed + i for trial i) whose truth lies inside the monitor's
    interval: at t = T for pointwise monitors, at every t <= T for uniform ones.
    """
    if trials < 1:
        raise DomainError("coverage needs at least one trial")
    tasks = [(monitor_builder, dynamics, truth, T, mode, seed + i) for i in range(trials)]
    logging.info(f"Running {trials} coverage trials (T={T}, mode={Mode(mode).value}, jobs={jobs})")
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes: List[bool] = list(tqdm(pool.map(_coverage_trial, tasks, chunksize=max(1, trials // (4 * jobs))),
                                             total=trials, disable=not progress))
    else:
        outcomes = [_coverage_trial(task) for task in tqdm(tasks, disable=not progress)]
    hits = sum(outcomes)
    return CoverageResult(trials, hits, hits / trials, binomial_margin(delta, trials))
