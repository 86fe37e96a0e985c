"""
Dynamics functions, trace simulation, and the Markov chains induced by coin processes.

Randomness comes from numpy's PCG64 generator (`numpy.random.default_rng(seed)`). Every toss
consumes exactly two uniforms from it, first for the coin and then for the outcome, so a
trace is a pure function of (dynamics, horizon, seed). Parallel trials use
seed_i = base_seed + trial_index.
"""
import bisect
import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from fairness_core import (
    BiasOutcomePair,
    DomainError,
    FairwatchError,
    ResourceCapError,
    Trace,
    UnsupportedDynamicsError,
)

PROB_TOL = 1e-9
MIXING_TOL = 0.25
MAX_MIXING_STEPS = 100_000
STATIONARY_TOL = 1e-10


def _probability_vector(values, name: str) -> np.ndarray:
    vec = np.asarray(values, dtype=float)
    if vec.ndim != 1 or vec.size == 0:
        raise DomainError(f"{name} must be a non-empty probability vector")
    if (vec < -PROB_TOL).any() or abs(vec.sum() - 1.0) > PROB_TOL:
        raise DomainError(f"{name} is not a probability vector: {vec.tolist()}")
    return np.clip(vec, 0.0, None)


def clamp_bias(p: float) -> float:
    return min(max(p, 0.0), 1.0)


def eta(p: float, x: int) -> float:
    """Probability that a coin with bias p shows outcome x."""
    return p if x == 1 else 1.0 - p


# =========================
#  Dynamics variants
# =========================
@dataclass(frozen=True)
class ConstantCoin:
    p: float

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise DomainError(f"constant bias must lie in [0,1], got {self.p}")

    def describe(self) -> str:
        return f"constant(p={self.p!r})"


@dataclass(frozen=True, eq=False)
class MarkovKernel:
    """
    Finite coin set p^(1..n); the next coin is drawn from kernel[k, x] after coin k showed x.
    kernel has shape (n, 2, n); initial is the distribution of the first coin.
    """
    biases: Tuple[float, ...]
    kernel: np.ndarray
    initial: np.ndarray

    def __post_init__(self):
        biases = tuple(float(p) for p in self.biases)
        n = len(biases)
        if n == 0 or len(set(biases)) != n:
            raise DomainError("Markov coins need a non-empty list of distinct biases")
        if any(not 0.0 <= p <= 1.0 for p in biases):
            raise DomainError("every coin bias must lie in [0,1]")
        kernel = np.asarray(self.kernel, dtype=float)
        if kernel.shape != (n, 2, n):
            raise DomainError(f"kernel must have shape ({n}, 2, {n}), got {kernel.shape}")
        rows = np.stack([_probability_vector(kernel[k, x], f"kernel row ({k},{x})")
                         for k in range(n) for x in (0, 1)]).reshape(n, 2, n)
        initial = _probability_vector(self.initial, "initial distribution")
        if initial.size != n:
            raise DomainError("initial distribution must cover every coin")
        rows.setflags(write=False)
        initial.setflags(write=False)
        object.__setattr__(self, "biases", biases)
        object.__setattr__(self, "kernel", rows)
        object.__setattr__(self, "initial", initial)

    @property
    def n(self) -> int:
        return len(self.biases)

    def label_of(self, bias: float) -> int:
        try:
            return self.biases.index(float(bias))
        except ValueError:
            raise DomainError(f"bias {bias} is not one of the Markov coins {self.biases}") from None

    def as_constant(self) -> Optional[ConstantCoin]:
        """The equivalent constant coin when every row and the start are the same point mass."""
        point = np.eye(self.n)
        for k in range(self.n):
            if np.allclose(self.initial, point[k]) and all(
                    np.allclose(self.kernel[j, x], point[k]) for j in range(self.n) for x in (0, 1)):
                return ConstantCoin(self.biases[k])
        return None

    def describe(self) -> str:
        return f"markov(biases={list(self.biases)!r}, kernel={self.kernel.tolist()!r}, initial={self.initial.tolist()!r})"


@dataclass(frozen=True)
class AdditiveDynamics:
    """p_{t+1} = clamp(p_t + beta(x_t)) with beta(1) = beta1 and beta(0) = beta0."""
    p1: float
    beta0: float
    beta1: float

    def __post_init__(self):
        if not 0.0 <= self.p1 <= 1.0:
            raise DomainError(f"initial bias must lie in [0,1], got {self.p1}")

    def beta(self, x: int) -> float:
        return self.beta1 if x == 1 else self.beta0

    def is_static(self) -> bool:
        return self.beta0 == 0.0 and self.beta1 == 0.0

    def describe(self) -> str:
        return f"additive(p1={self.p1!r}, beta0={self.beta0!r}, beta1={self.beta1!r})"


@dataclass(frozen=True)
class ScriptedBiases:
    """Explicit bias sequence; stands in for arbitrary (unrestricted) dynamics."""
    biases: Tuple[float, ...]

    def __post_init__(self):
        biases = tuple(float(p) for p in self.biases)
        if any(not 0.0 <= p <= 1.0 for p in biases):
            raise DomainError("every scripted bias must lie in [0,1]")
        object.__setattr__(self, "biases", biases)

    def describe(self) -> str:
        return f"scripted(length={len(self.biases)})"


Dynamics = Union[ConstantCoin, MarkovKernel, AdditiveDynamics, ScriptedBiases]


def switching_kernel(biases: Sequence[float], switch: float,
                     initial: Optional[Sequence[float]] = None) -> MarkovKernel:
    """
    Sticky coins: stay with probability 1 - switch regardless of the outcome, otherwise move to
    one of the other coins uniformly.
    """
    n = len(biases)
    if n == 1:
        rows = np.ones((1, 2, 1))
    else:
        row = np.full((n, n), switch / (n - 1))
        np.fill_diagonal(row, 1.0 - switch)
        rows = np.repeat(row[:, None, :], 2, axis=1)
    start = np.full(n, 1.0 / n) if initial is None else initial
    return MarkovKernel(tuple(biases), rows, np.asarray(start, dtype=float))


# =========================
#  Sampling
# =========================
def next_bias(dynamics: Dynamics, t: int, last: Optional[BiasOutcomePair], u_coin: float) -> float:
    """Bias of toss t+1 (0-based t tosses already happened) from the last pair and one uniform."""
    if isinstance(dynamics, ConstantCoin):
        return dynamics.p
    if isinstance(dynamics, ScriptedBiases):
        if t >= len(dynamics.biases):
            raise DomainError(f"scripted dynamics exhausted after {len(dynamics.biases)} tosses")
        return dynamics.biases[t]
    if isinstance(dynamics, AdditiveDynamics):
        if last is None:
            return dynamics.p1
        return clamp_bias(last.bias + dynamics.beta(last.outcome))
    if isinstance(dynamics, MarkovKernel):
        row = dynamics.initial if last is None else dynamics.kernel[dynamics.label_of(last.bias), last.outcome]
        k = min(bisect.bisect_right(np.cumsum(row).tolist(), u_coin), dynamics.n - 1)
        return dynamics.biases[k]
    raise UnsupportedDynamicsError(f"unknown dynamics {type(dynamics).__name__}")


def sample_next(dynamics: Dynamics, history: Trace, rng: np.random.Generator) -> BiasOutcomePair:
    """Draw the next coin from theta(history), then its outcome from Bernoulli(bias)."""
    u_coin, u_out = rng.random(2).tolist()
    last = history[len(history) - 1] if len(history) else None
    bias = next_bias(dynamics, len(history), last, u_coin)
    return BiasOutcomePair(bias, int(u_out < bias))


def simulate(dynamics: Dynamics, horizon: int, seed: int) -> Trace:
    """Length-`horizon` trace; bitwise reproducible for equal (dynamics, horizon, seed)."""
    if horizon < 0:
        raise DomainError("horizon must be >= 0")
    rng = np.random.default_rng(seed)
    uniforms = rng.random((horizon, 2))
    u_coin, u_out = uniforms[:, 0], uniforms[:, 1]

    if isinstance(dynamics, ConstantCoin):
        biases = np.full(horizon, dynamics.p)
        return Trace(biases, (u_out < biases).astype(np.int8))
    if isinstance(dynamics, ScriptedBiases):
        if horizon > len(dynamics.biases):
            raise DomainError(f"scripted dynamics exhausted after {len(dynamics.biases)} tosses")
        biases = np.array(dynamics.biases[:horizon], dtype=float)
        return Trace(biases, (u_out < biases).astype(np.int8))
    if isinstance(dynamics, AdditiveDynamics):
        return _simulate_additive(dynamics, u_out.tolist())
    if isinstance(dynamics, MarkovKernel):
        labels, outcomes = simulate_labels(dynamics, u_coin.tolist(), u_out.tolist())
        biases = np.asarray(dynamics.biases)[labels] if horizon else np.zeros(0)
        return Trace(biases, outcomes)
    raise UnsupportedDynamicsError(f"unknown dynamics {type(dynamics).__name__}")


def _simulate_additive(dynamics: AdditiveDynamics, u_out: List[float]) -> Trace:
    biases, outcomes = [], []
    p = dynamics.p1
    for u in u_out:
        x = 1 if u < p else 0
        biases.append(p)
        outcomes.append(x)
        p = clamp_bias(p + dynamics.beta(x))
    return Trace(np.array(biases, dtype=float), np.array(outcomes, dtype=np.int8))


def simulate_labels(dynamics: MarkovKernel, u_coin: List[float], u_out: List[float]) -> Tuple[np.ndarray, np.ndarray]:
    """Coin labels and outcomes of a Markov trace driven by the given uniforms."""
    cumulative = [[np.cumsum(dynamics.kernel[k, x]).tolist() for x in (0, 1)] for k in range(dynamics.n)]
    start = np.cumsum(dynamics.initial).tolist()
    biases = dynamics.biases
    last = dynamics.n - 1
    labels, outcomes = [], []
    row = start
    for uc, uo in zip(u_coin, u_out):
        k = bisect.bisect_right(row, uc)
        if k > last:
            k = last
        x = 1 if uo < biases[k] else 0
        labels.append(k)
        outcomes.append(x)
        row = cumulative[k][x]
    return np.array(labels, dtype=np.int64), np.array(outcomes, dtype=np.int8)


def coin_labels(dynamics: MarkovKernel, trace: Trace) -> np.ndarray:
    """Recover coin labels from a Markov trace (biases are distinct)."""
    lookup = {p: k for k, p in enumerate(dynamics.biases)}
    return np.array([lookup[p] for p in trace.biases.tolist()], dtype=np.int64)


# =========================
#  Induced Markov chains
# =========================
@dataclass(frozen=True, eq=False)
class InducedChain:
    """Finite Markov chain with labelled states, row-stochastic matrix and initial distribution."""
    states: Tuple[tuple, ...]
    matrix: np.ndarray
    initial: np.ndarray

    def __post_init__(self):
        matrix = np.asarray(self.matrix, dtype=float)
        size = len(self.states)
        if matrix.shape != (size, size):
            raise DomainError("transition matrix does not match the state labels")
        for i in range(size):
            _probability_vector(matrix[i], f"row {self.states[i]}")
        _probability_vector(self.initial, "initial distribution")
        matrix.setflags(write=False)
        object.__setattr__(self, "matrix", matrix)

    def index(self, state: tuple) -> int:
        return self.states.index(state)

    def entry(self, source: tuple, target: tuple) -> float:
        return float(self.matrix[self.index(source), self.index(target)])


def induced_chain(dynamics: MarkovKernel) -> InducedChain:
    """
    Chain over coin states (k,) and pair states (k, x): a coin state emits its outcome with
    probability eta(p^(k), x), a pair state draws the next coin from the kernel.
    """
    if not isinstance(dynamics, MarkovKernel):
        raise UnsupportedDynamicsError("the induced chain needs Markov coin dynamics")
    n = dynamics.n
    states = tuple((k,) for k in range(n)) + tuple((k, x) for k in range(n) for x in (0, 1))
    matrix = np.zeros((3 * n, 3 * n))
    for k in range(n):
        for x in (0, 1):
            pair = n + 2 * k + x
            matrix[k, pair] = eta(dynamics.biases[k], x)
            matrix[pair, :n] = dynamics.kernel[k, x]
    initial = np.concatenate([dynamics.initial, np.zeros(2 * n)])
    return InducedChain(states, matrix, initial)


def hidden_chain(dynamics: MarkovKernel) -> InducedChain:
    """
    Chain over bias-outcome pairs (k, x) only; only x is visible to a hidden-Markov monitor.
    Aperiodic whenever the coin chain is, unlike the bipartite induced chain.
    """
    if not isinstance(dynamics, MarkovKernel):
        raise UnsupportedDynamicsError("the hidden chain needs Markov coin dynamics")
    n = dynamics.n
    states = tuple((k, x) for k in range(n) for x in (0, 1))
    emit = np.array([eta(dynamics.biases[k], x) for k in range(n) for x in (0, 1)])
    matrix = np.zeros((2 * n, 2 * n))
    for k in range(n):
        for x in (0, 1):
            matrix[2 * k + x] = np.repeat(dynamics.kernel[k, x], 2) * emit
    initial = np.repeat(dynamics.initial, 2) * emit
    return InducedChain(states, matrix, initial)


def _is_irreducible(matrix: np.ndarray) -> bool:
    size = matrix.shape[0]
    reach = ((matrix > 0) | np.eye(size, dtype=bool)).astype(float)
    closure = np.linalg.matrix_power(reach, size)
    return bool((closure > 0).all())


def stationary_distribution(chain: InducedChain) -> np.ndarray:
    """Solve pi M = pi with sum(pi) = 1 by least squares."""
    matrix = chain.matrix
    size = matrix.shape[0]
    if not _is_irreducible(matrix):
        raise DomainError("chain is reducible; the stationary distribution is not unique")
    system = np.vstack((matrix.T - np.eye(size), np.ones((1, size))))
    target = np.zeros(size + 1)
    target[-1] = 1.0
    pi = np.linalg.lstsq(system, target, rcond=None)[0]
    pi = np.clip(pi, 0.0, None)
    pi /= pi.sum()
    if np.abs(pi @ matrix - pi).max() > STATIONARY_TOL:
        raise DomainError("stationary solve did not converge")
    return pi


def total_variation(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    return 0.5 * np.abs(u - v).sum(axis=-1)


def estimate_mixing_time(chain: InducedChain, tol: float = MIXING_TOL,
                         max_steps: int = MAX_MIXING_STEPS) -> int:
    """Smallest k >= 1 with max over start states of TV(M^k(s, .), pi) <= tol."""
    if not 0.0 < tol < 1.0:
        raise DomainError("mixing tolerance must lie in (0,1)")
    pi = stationary_distribution(chain)
    state = np.eye(chain.matrix.shape[0])
    for k in range(1, max_steps + 1):
        state = state @ chain.matrix
        if total_variation(state, pi).max() <= tol:
            logging.info(f"Mixing time {k} (tol={tol})")
            return k
    raise ResourceCapError(f"chain did not mix within {max_steps} steps (periodic or too slow)")


def coin_marginals(dynamics: MarkovKernel) -> np.ndarray:
    """Stationary probability of each coin."""
    pi = stationary_distribution(hidden_chain(dynamics))
    return pi.reshape(dynamics.n, 2).sum(axis=1)


def stationary_start(dynamics: MarkovKernel) -> MarkovKernel:
    """Same kernel, started in its stationary coin distribution."""
    return MarkovKernel(dynamics.biases, dynamics.kernel, coin_marginals(dynamics))


def stationary_bias(dynamics: MarkovKernel) -> float:
    """E_pi(P): the limit value shared by outcome, bias and current fairness."""
    return float(coin_marginals(dynamics) @ np.asarray(dynamics.biases))


# =========================
#  Count-determined dynamics
# =========================
class BiasMap:
    """Bias of the next coin as a function of (tosses so far, heads so far)."""

    def __call__(self, t: int, h: int) -> float:
        raise NotImplementedError

    def describe(self) -> str:
        return type(self).__name__

    def shifted(self, t0: int, h0: int) -> "BiasMap":
        return _ShiftedBiasMap(self, t0, h0)


@dataclass(frozen=True)
class ConstantBiasMap(BiasMap):
    p: float

    def __call__(self, t: int, h: int) -> float:
        return self.p

    def describe(self) -> str:
        return f"constant(p={self.p!r})"


@dataclass(frozen=True)
class AdditiveBiasMap(BiasMap):
    p1: float
    beta0: float
    beta1: float

    def __call__(self, t: int, h: int) -> float:
        return clamp_bias(self.p1 + h * self.beta1 + (t - h) * self.beta0)

    def leaves_unit_interval(self, window: int) -> bool:
        """True when the unclamped closed form exits [0,1] for some reachable (t, h), t < window."""
        ends = [self.p1 + h * self.beta1 + (t - h) * self.beta0
                for t in (0, max(window - 1, 0)) for h in (0, t)]
        return min(ends) < 0.0 or max(ends) > 1.0

    def describe(self) -> str:
        return f"additive(p1={self.p1!r}, beta0={self.beta0!r}, beta1={self.beta1!r})"


@dataclass(frozen=True)
class ScriptedBiasMap(BiasMap):
    biases: Tuple[float, ...]

    def __call__(self, t: int, h: int) -> float:
        if t >= len(self.biases):
            raise DomainError(f"scripted dynamics exhausted after {len(self.biases)} tosses")
        return self.biases[t]

    def describe(self) -> str:
        return f"scripted(length={len(self.biases)})"


@dataclass(frozen=True)
class _ShiftedBiasMap(BiasMap):
    base: BiasMap
    t0: int
    h0: int

    def __call__(self, t: int, h: int) -> float:
        return self.base(self.t0 + t, self.h0 + h)

    def describe(self) -> str:
        return f"{self.base.describe()}+shift(t={self.t0}, h={self.h0})"


@dataclass(frozen=True)
class FunctionBiasMap(BiasMap):
    fn: Callable[[int, int], float]
    label: str = "custom"

    def __call__(self, t: int, h: int) -> float:
        return self.fn(t, h)

    def describe(self) -> str:
        return self.label


def count_bias_map(dynamics: Dynamics) -> BiasMap:
    """Bias map for dynamics whose bias is a function of (tosses, heads)."""
    if isinstance(dynamics, ConstantCoin):
        return ConstantBiasMap(dynamics.p)
    if isinstance(dynamics, AdditiveDynamics):
        if dynamics.is_static():
            return ConstantBiasMap(dynamics.p1)
        return AdditiveBiasMap(dynamics.p1, dynamics.beta0, dynamics.beta1)
    if isinstance(dynamics, ScriptedBiases):
        return ScriptedBiasMap(dynamics.biases)
    if isinstance(dynamics, MarkovKernel):
        constant = dynamics.as_constant()
        if constant is not None:
            return ConstantBiasMap(constant.p)
    raise UnsupportedDynamicsError(
        f"{type(dynamics).__name__} dynamics are not count-determined; no (t, h) shield exists")


def as_bias_map(bias) -> BiasMap:
    if isinstance(bias, BiasMap):
        return bias
    if callable(bias):
        return FunctionBiasMap(bias)
    if isinstance(bias, (int, float)):
        if not 0.0 <= bias <= 1.0:
            raise DomainError(f"bias must lie in [0,1], got {bias}")
        return ConstantBiasMap(float(bias))
    raise FairwatchError(f"cannot interpret {bias!r} as a bias map")
