"""
Experiment harness: flat `key = value` configs, the objects they describe, and the runners
that turn one config into one CSV report.
"""
import csv
import hashlib
import json
import logging
import math
import os
import tempfile
from dataclasses import dataclass, field
from functools import partial
from typing import Dict, Iterable, List, Literal, Optional, Sequence

import numpy as np
from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, ValidationError, field_validator, model_validator
from tqdm import tqdm

from enforcers import (
    ConstantBiasEnforcer,
    CostModel,
    DeltaEnforcer,
    Enforcer,
    PeriodicShield,
    ThresholdOutcomeEnforcer,
    dynamic_shield,
    reach_probability_table,
)
from fairness_core import (
    BiasOutcomePair,
    ConfigError,
    Interval,
    MeasureKind,
    RunningMeasures,
    TargetIntervalSchedule,
)
from monitors import (
    AdditiveMonitor,
    ExactOutcomeMonitor,
    HiddenMarkovMonitor,
    MarkovMonitor,
    Mode,
    Monitor,
    StaticCoinMonitor,
    monitor_for,
)
from oracle import ConstantTruth, MeasureTruth, RuntimeTruth, empirical_coverage
from process_sim import (
    AdditiveDynamics,
    ConstantCoin,
    Dynamics,
    MarkovKernel,
    ScriptedBiases,
    coin_labels,
    count_bias_map,
    estimate_mixing_time,
    hidden_chain,
    next_bias,
    simulate,
    stationary_bias,
    stationary_start,
    switching_kernel,
)

TRACE_COLUMNS = ["t", "bias", "outcome", "config_hash"]
VERDICT_COLUMNS = ["t", "measure", "horizon", "mode", "lo", "hi", "estimate", "config_hash"]
ENFORCEMENT_COLUMNS = ["t", "raw_bias", "raw_outcome", "enf_bias", "enf_outcome", "step_cost",
                       "fairness_after", "config_hash"]
COVERAGE_COLUMNS = ["config_hash", "trials", "hits", "rate", "margin"]
PATH_KEYS = ("kernel", "schedule", "script")


def _split_floats(value):
    if isinstance(value, str):
        return [float(v) for v in value.split(",") if v.strip()]
    return value


class ExperimentConfig(BaseModel):
    """
    One experiment: the problem tuple (dynamics, measure, horizon, delta) for monitoring, plus
    the target intervals, window and cost for enforcement.
    """
    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: Literal["simulate", "monitor", "enforce", "coverage", "synthesize-shield"]
    dynamics: Literal["constant", "markov", "additive", "scripted"] = "constant"
    p: Optional[float] = None
    p1: Optional[float] = None
    beta0: float = 0.0
    beta1: float = 0.0
    biases: Optional[List[float]] = None
    kernel: Optional[str] = None
    switch: Optional[float] = None
    initial: str = "stationary"
    script: Optional[str] = None

    monitor: Literal["auto", "static", "exact", "markov", "hidden-markov", "additive"] = "auto"
    measure: MeasureKind = MeasureKind.BIAS
    horizon: float = 0
    delta: float = 0.05
    mode: Mode = Mode.POINTWISE
    tau: Optional[int] = None

    enforcer: Literal["constant-bias", "threshold", "delta", "shield", "periodic-shield"] = "shield"
    schedule: Optional[str] = None
    target_lo: float = 0.0
    target_hi: float = 1.0
    window: int = 1
    windows: int = 1
    steps: Optional[int] = None
    cost: str = "unit"
    threshold_p: float = 0.5
    infeasible_policy: Literal["error", "saturate"] = "error"

    trials: int = 1
    seed: int = 42
    out: str = "fairwatch_out.csv"
    config_dir: str = "."

    @field_validator("biases", mode="before")
    @classmethod
    def _parse_biases(cls, value):
        return _split_floats(value)

    @field_validator("initial")
    @classmethod
    def _parse_initial(cls, value: str) -> str:
        value = value.strip()
        if value in ("stationary", "uniform"):
            return value
        try:
            weights = _split_floats(value)
        except ValueError:
            raise ValueError("initial must be stationary, uniform or comma-separated probabilities") from None
        if not weights or min(weights) < 0.0 or abs(math.fsum(weights) - 1.0) > 1e-9:
            raise ValueError("initial probabilities must be non-negative and sum to 1")
        return ",".join(repr(w) for w in weights)

    @field_validator("horizon", mode="before")
    @classmethod
    def _parse_horizon(cls, value):
        if isinstance(value, str) and value.strip().lower() in ("inf", "infinity", "∞"):
            return math.inf
        return value

    @field_validator("horizon")
    @classmethod
    def _natural_horizon(cls, value: float) -> float:
        if value != math.inf and (value < 0 or value != int(value)):
            raise ValueError("horizon must be a natural number or inf")
        return value

    @model_validator(mode="after")
    def _check_problem(self) -> "ExperimentConfig":
        if not 0.0 < self.delta < 1.0:
            raise ValueError("delta must lie in (0,1)")
        if not 0.0 <= self.target_lo <= self.target_hi <= 1.0:
            raise ValueError("target interval must satisfy 0 <= target_lo <= target_hi <= 1")
        if self.window < 1 or self.windows < 1 or self.trials < 1:
            raise ValueError("window, windows and trials must be >= 1")
        if self.steps is not None and self.steps < 0:
            raise ValueError("steps must be >= 0")

        if self.dynamics == "constant" and self.p is None:
            raise ValueError("constant dynamics need p")
        if self.dynamics == "additive" and self.p1 is None:
            raise ValueError("additive dynamics need p1 (beta0/beta1 default to 0)")
        if self.dynamics == "scripted" and self.script is None:
            raise ValueError("scripted dynamics need a script CSV")
        if self.dynamics == "markov":
            if not self.biases:
                raise ValueError("Markov dynamics need the coin biases")
            if (self.kernel is None) == (self.switch is None):
                raise ValueError("Markov dynamics need exactly one of kernel (CSV) or switch")
            if self.initial not in ("stationary", "uniform") and len(_split_floats(self.initial)) != len(self.biases):
                raise ValueError(f"initial needs one probability per coin ({len(self.biases)})")

        if self.monitor == "hidden-markov" and self.horizon != math.inf:
            raise ValueError("the hidden-Markov monitor assumes a stationary, aperiodic, irreducible chain "
                             "and covers limit properties only: set horizon = inf")
        if self.monitor == "hidden-markov" and self.dynamics != "markov":
            raise ValueError("the hidden-Markov monitor needs Markov dynamics")
        if self.monitor == "markov":
            if self.dynamics != "markov":
                raise ValueError("the observed-Markov monitor needs Markov dynamics with visible coin labels")
            if self.horizon == math.inf:
                raise ValueError("the observed-Markov monitor assumes finite horizons")
        if self.monitor == "additive" and (self.measure is MeasureKind.OUTCOME or self.horizon != 0):
            raise ValueError("the additive-dynamics monitor covers bias and current fairness at horizon 0 only")
        if self.monitor == "exact" and (self.measure is not MeasureKind.OUTCOME or self.horizon != 0):
            raise ValueError("the exact monitor covers outcome fairness at horizon 0 only")

        if self.kind in ("enforce", "synthesize-shield"):
            if self.dynamics == "markov" and (self.kind == "synthesize-shield"
                                              or self.enforcer in ("delta", "shield", "periodic-shield")):
                raise ValueError("shields and delta-enforcers need count-determined dynamics "
                                 "(bias a function of tosses and heads); Markov coins are not")
            if self.kind == "enforce" and self.enforcer == "delta" and self.total_steps > self.window:
                raise ValueError(f"the delta-enforcer covers one finite window of {self.window} tosses; "
                                 f"set windows = 1 and steps <= window")
            if self.enforcer == "threshold" and not 0.0 <= self.threshold_p <= 1.0:
                raise ValueError("threshold_p must lie in [0,1]")
        CostModel.parse(self.cost)
        return self

    def resolve(self, path: str) -> str:
        return path if os.path.isabs(path) else os.path.join(self.config_dir, path)

    @property
    def target(self) -> Interval:
        return Interval(self.target_lo, self.target_hi)

    @property
    def total_steps(self) -> int:
        if self.steps is not None:
            return self.steps
        return self.window * self.windows

    def canonical(self) -> dict:
        """Fields that decide the output, plus the bytes of every referenced auxiliary file."""
        data = self.model_dump(mode="json", exclude={"config_dir", "out"})
        for key in PATH_KEYS:
            value = getattr(self, key)
            if value is not None:
                try:
                    with open(self.resolve(value), "rb") as f:
                        data[f"{key}_sha256"] = hashlib.sha256(f.read()).hexdigest()
                except OSError as e:
                    raise ConfigError(f"cannot read {key} file {value}: {e}")
        return data

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"), default=str)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def _first_error(error: ValidationError) -> str:
    first = error.errors()[0]
    where = ".".join(str(part) for part in first.get("loc", ())) or "config"
    return f"{where}: {first.get('msg', 'invalid value')}"


def load_config(path: str, overrides: Optional[Dict[str, object]] = None) -> ExperimentConfig:
    if not os.path.exists(path):
        raise ConfigError(f"config file {path} not found")
    raw = {k.strip(): v for k, v in dotenv_values(path).items() if v not in (None, "")}
    raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
    raw["config_dir"] = os.path.dirname(os.path.abspath(path))
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(_first_error(e)) from None


# =========================
#  Building objects from a config
# =========================
def _read_rows(path: str) -> List[dict]:
    try:
        with open(path, newline="", encoding="utf-8") as f:
            return list(csv.DictReader(f))
    except OSError as e:
        raise ConfigError(f"cannot read {path}: {e}")


def load_kernel(path: str, n: int) -> np.ndarray:
    """Kernel CSV with columns coin,outcome,next_0..next_{n-1}, one row per (coin, outcome)."""
    kernel = np.full((n, 2, n), np.nan)
    try:
        for row in _read_rows(path):
            k, x = int(row["coin"]), int(row["outcome"])
            kernel[k, x] = [float(row[f"next_{j}"]) for j in range(n)]
    except (KeyError, ValueError, IndexError) as e:
        raise ConfigError(f"bad kernel CSV {path}: {e!r}")
    if np.isnan(kernel).any():
        raise ConfigError(f"kernel CSV {path} must give a row for every (coin, outcome)")
    return kernel


def load_schedule(path: str) -> TargetIntervalSchedule:
    try:
        return TargetIntervalSchedule.from_rows(
            [(int(r["t"]), float(r["lo"]), float(r["hi"])) for r in _read_rows(path)])
    except (KeyError, ValueError) as e:
        raise ConfigError(f"bad schedule CSV {path}: {e!r}")


def load_script(path: str) -> List[float]:
    try:
        return [float(r["bias"]) for r in _read_rows(path)]
    except (KeyError, ValueError) as e:
        raise ConfigError(f"bad script CSV {path}: {e!r}")


def build_dynamics(config: ExperimentConfig) -> Dynamics:
    if config.dynamics == "constant":
        return ConstantCoin(config.p)
    if config.dynamics == "additive":
        return AdditiveDynamics(config.p1, config.beta0, config.beta1)
    if config.dynamics == "scripted":
        return ScriptedBiases(tuple(load_script(config.resolve(config.script))))
    n = len(config.biases)
    if config.initial in ("stationary", "uniform"):
        start = np.full(n, 1.0 / n)
    else:
        start = np.array(_split_floats(config.initial))
    if config.kernel is not None:
        dynamics = MarkovKernel(tuple(config.biases), load_kernel(config.resolve(config.kernel), n), start)
    else:
        dynamics = switching_kernel(config.biases, config.switch, start)
    if config.initial == "stationary":
        dynamics = stationary_start(dynamics)
    return dynamics


def build_schedule(config: ExperimentConfig) -> TargetIntervalSchedule:
    if config.schedule is not None:
        return load_schedule(config.resolve(config.schedule))
    if config.enforcer == "periodic-shield" or config.windows > 1:
        return TargetIntervalSchedule.periodic(config.window, config.target)
    return TargetIntervalSchedule.finite_window(config.window, config.target)


def resolve_tau(config: ExperimentConfig, dynamics: Dynamics) -> ExperimentConfig:
    """Fill in the mixing-time bound once, so that trial workers do not recompute it."""
    needs_tau = isinstance(dynamics, MarkovKernel) and config.horizon == math.inf and config.monitor in ("auto", "hidden-markov")
    if config.tau is not None or not needs_tau:
        return config
    tau = estimate_mixing_time(hidden_chain(dynamics))
    return config.model_copy(update={"tau": tau})


def build_monitor(config: ExperimentConfig, dynamics: Dynamics) -> Monitor:
    if config.monitor == "auto":
        return monitor_for(dynamics, config.measure, config.horizon, config.delta, config.mode, config.tau)
    if config.monitor == "exact":
        return ExactOutcomeMonitor(config.delta, config.mode)
    if config.monitor == "static":
        if not isinstance(dynamics, ConstantCoin):
            logging.warning("Static-coin monitor used on non-constant dynamics; its guarantee does not apply")
        return StaticCoinMonitor(config.measure, config.horizon, config.delta, config.mode)
    if config.monitor == "markov":
        return MarkovMonitor(dynamics.n, config.measure, int(config.horizon), config.delta, config.mode)
    if config.monitor == "hidden-markov":
        tau = config.tau if config.tau is not None else estimate_mixing_time(hidden_chain(dynamics))
        return HiddenMarkovMonitor(tau, config.delta, config.mode, measure=config.measure)
    return AdditiveMonitor(config.beta0, config.beta1, config.delta, config.mode, config.measure)


def build_truth(config: ExperimentConfig, dynamics: Dynamics):
    """What a sound verdict must contain for this problem."""
    if config.horizon == math.inf:
        if isinstance(dynamics, MarkovKernel):
            return ConstantTruth(stationary_bias(dynamics))
        if isinstance(dynamics, ConstantCoin):
            return ConstantTruth(dynamics.p)
        raise ConfigError("coverage of limit properties needs constant or Markov dynamics")
    if config.horizon == 0:
        return MeasureTruth(config.measure)
    return RuntimeTruth(dynamics, config.measure, int(config.horizon))


def check_script_covers(dynamics: Dynamics, tosses: int) -> None:
    """Table synthesis reads the script up to the window end, so a short script is a config error."""
    if isinstance(dynamics, ScriptedBiases) and len(dynamics.biases) < tosses:
        raise ConfigError(f"the script has {len(dynamics.biases)} biases but the window needs {tosses}")


def build_enforcer(config: ExperimentConfig, dynamics: Dynamics) -> Enforcer:
    cost = CostModel.parse(config.cost)
    if config.enforcer in ("delta", "shield"):
        check_script_covers(dynamics, config.window)
    elif config.enforcer == "periodic-shield":
        check_script_covers(dynamics, -(-config.total_steps // config.window) * config.window)
    if config.enforcer == "constant-bias":
        return ConstantBiasEnforcer(build_schedule(config))
    if config.enforcer == "threshold":
        return ThresholdOutcomeEnforcer(config.threshold_p, build_schedule(config))
    if config.enforcer == "delta":
        return DeltaEnforcer(reach_probability_table(count_bias_map(dynamics), config.window, config.target),
                             config.delta)
    if config.enforcer == "periodic-shield":
        return PeriodicShield(count_bias_map(dynamics), config.window, config.target, cost,
                              config.infeasible_policy)
    return dynamic_shield(dynamics, config.window, config.target, cost)[1]


# =========================
#  CSV output
# =========================
def fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.17g}"
    return str(value)


def write_csv_atomic(path: str, header: Sequence[str], rows: Iterable[Sequence]) -> int:
    """Write to a temporary file next to `path`, then rename it into place."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    count = 0
    fd, tmp_path = tempfile.mkstemp(prefix=".fairwatch-", suffix=".csv", dir=directory)
    try:
        with os.fdopen(fd, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(header)
            for row in rows:
                writer.writerow([fmt(v) for v in row])
                count += 1
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise
    return count


# =========================
#  Runners
# =========================
@dataclass
class RunResult:
    kind: str
    out: str
    rows: int
    config_hash: str
    summary: Dict[str, object] = field(default_factory=dict)


def run_simulate(config: ExperimentConfig, jobs: int = 1, progress: bool = False) -> RunResult:
    dynamics = build_dynamics(config)
    trace = simulate(dynamics, config.total_steps, config.seed)
    digest = config.config_hash
    rows = ((t, bias, outcome, digest)
            for t, (bias, outcome) in enumerate(zip(trace.biases.tolist(), trace.outcomes.tolist()), start=1))
    count = write_csv_atomic(config.out, TRACE_COLUMNS, rows)
    return RunResult(config.kind, config.out, count, digest,
                     {"dynamics": dynamics.describe(), "tosses": len(trace), "heads": trace.heads})


def run_monitor(config: ExperimentConfig, jobs: int = 1, progress: bool = False) -> RunResult:
    dynamics = build_dynamics(config)
    config = resolve_tau(config, dynamics)
    monitor = build_monitor(config, dynamics)
    trace = simulate(dynamics, config.total_steps, config.seed)
    labels = coin_labels(dynamics, trace).tolist() if isinstance(dynamics, MarkovKernel) else [None] * len(trace)
    digest = config.config_hash
    horizon = "inf" if config.horizon == math.inf else int(config.horizon)
    rows = []
    verdict = None
    for t, (x, k) in enumerate(tqdm(list(zip(trace.outcomes.tolist(), labels)), disable=not progress), start=1):
        verdict = monitor.feed(x, k)
        rows.append((t, config.measure.value, horizon, config.mode.value, verdict.lo, verdict.hi,
                     verdict.estimate, digest))
    count = write_csv_atomic(config.out, VERDICT_COLUMNS, rows)
    summary = {"monitor": type(monitor).__name__, "tosses": len(trace)}
    if verdict is not None:
        summary.update({"final_lo": verdict.lo, "final_hi": verdict.hi})
    return RunResult(config.kind, config.out, count, digest, summary)


def enforce_closed_loop(dynamics: Dynamics, enforcer: Enforcer, steps: int, seed: int) -> List[tuple]:
    """
    Run the process against the enforcer. The process draws its next coin from its own coin and
    the emitted outcome, so feedback dynamics react to enforcement. A bias enforcer's outcome is
    redrawn from the enforced bias with the same uniform.
    """
    rng = np.random.default_rng(seed)
    uniforms = rng.random((steps, 2)).tolist()
    measures = RunningMeasures()
    bias_enforcer = isinstance(enforcer, ConstantBiasEnforcer)
    seen: Optional[BiasOutcomePair] = None
    records = []
    for t, (u_coin, u_out) in enumerate(uniforms, start=1):
        bias = next_bias(dynamics, t - 1, seen, u_coin)
        raw = BiasOutcomePair(bias, int(u_out < bias))
        before = enforcer.incurred_cost
        enforced = enforcer.enforce(raw)
        if bias_enforcer:
            enforced = BiasOutcomePair(enforced.bias, int(u_out < enforced.bias))
        measures.push(enforced)
        fairness = measures.value(MeasureKind.BIAS if bias_enforcer else MeasureKind.OUTCOME)
        records.append((t, raw.bias, raw.outcome, enforced.bias, enforced.outcome,
                        enforcer.incurred_cost - before, fairness))
        seen = BiasOutcomePair(raw.bias, enforced.outcome)
    return records


def run_enforce(config: ExperimentConfig, jobs: int = 1, progress: bool = False) -> RunResult:
    dynamics = build_dynamics(config)
    enforcer = build_enforcer(config, dynamics)
    records = enforce_closed_loop(dynamics, enforcer, config.total_steps, config.seed)
    digest = config.config_hash
    count = write_csv_atomic(config.out, ENFORCEMENT_COLUMNS, (r + (digest,) for r in records))
    summary = {"enforcer": type(enforcer).__name__, "steps": count,
               "interventions": enforcer.interventions, "incurred_cost": enforcer.incurred_cost}
    if records:
        summary["final_fairness"] = records[-1][-1]
    return RunResult(config.kind, config.out, count, digest, summary)


def run_coverage(config: ExperimentConfig, jobs: int = 1, progress: bool = False) -> RunResult:
    dynamics = build_dynamics(config)
    config = resolve_tau(config, dynamics)
    build_monitor(config, dynamics)  # unmonitorable problems fail before any trial runs
    truth = build_truth(config, dynamics)
    result = empirical_coverage(partial(build_monitor, config, dynamics), dynamics, truth,
                                config.total_steps, config.trials, config.delta, config.mode,
                                config.seed, jobs=jobs, progress=progress)
    digest = config.config_hash
    count = write_csv_atomic(config.out, COVERAGE_COLUMNS,
                             [(digest, result.trials, result.hits, result.rate, result.margin)])
    return RunResult(config.kind, config.out, count, digest, result.to_dict())


def run_synthesize_shield(config: ExperimentConfig, jobs: int = 1, progress: bool = False) -> RunResult:
    dynamics = build_dynamics(config)
    check_script_covers(dynamics, config.window)
    table, _ = dynamic_shield(dynamics, config.window, config.target, CostModel.parse(config.cost))
    digest = config.config_hash
    directory = os.path.dirname(os.path.abspath(config.out))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(prefix=".fairwatch-", suffix=".csv", dir=directory)
    os.close(fd)
    try:
        table.to_csv(tmp_path, digest)
        os.replace(tmp_path, config.out)
    except BaseException:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise
    rows = (table.T + 1) * (table.T + 2) // 2
    return RunResult(config.kind, config.out, rows, digest,
                     {"T": table.T, "v(0,0)": table.start_value, "feasible": table.feasible})


RUNNERS = {
    "simulate": run_simulate,
    "monitor": run_monitor,
    "enforce": run_enforce,
    "coverage": run_coverage,
    "synthesize-shield": run_synthesize_shield,
}


def run(config: ExperimentConfig, jobs: int = 1, progress: bool = False) -> RunResult:
    logging.info(f"Running {config.kind} experiment (config {config.config_hash}, seed {config.seed})")
    result = RUNNERS[config.kind](config, jobs=jobs, progress=progress)
    logging.info(f"Wrote {result.rows} rows to {result.out}")
    return result
