"""Monte Carlo engine: trajectories, flip statistics and occupancy histograms.

Every run draws from its own Philox stream keyed by an integer seed; a batch
uses seeds ``base_seed + 0 .. base_seed + runs - 1``.  Results are aggregated
in run-index order, so a batch returns identical numbers whatever the number
of worker threads.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .chain import ChainSpec, SpecError, ThresholdPolicy, Variant

_BLOCK = 1 << 16
_FIRST_BLOCK = 1 << 10


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator for one run."""
    if int(seed) != seed or seed < 0:
        raise SpecError(f"seeds must be nonnegative integers, got {seed!r}")
    return np.random.Generator(np.random.Philox(int(seed)))


@dataclass(frozen=True)
class SimBudget:
    mode: str
    limit: float
    runs: int = 1
    base_seed: int = 0

    def __post_init__(self):
        if self.mode not in ("steps", "time"):
            raise SpecError(f"budget mode must be 'steps' or 'time', got {self.mode!r}")
        if not self.limit > 0:
            raise SpecError("budget limit must be positive")
        if self.mode == "steps" and int(self.limit) != self.limit:
            raise SpecError("step budgets must be integral")
        if int(self.runs) != self.runs or self.runs < 1:
            raise SpecError("runs must be a positive integer")
        if int(self.base_seed) != self.base_seed or self.base_seed < 0:
            raise SpecError("base_seed must be a nonnegative integer")

    @classmethod
    def steps(cls, limit: int, runs: int = 1, base_seed: int = 0) -> "SimBudget":
        return cls("steps", limit, runs, base_seed)

    @classmethod
    def time(cls, limit: float, runs: int = 1, base_seed: int = 0) -> "SimBudget":
        return cls("time", limit, runs, base_seed)


@dataclass(frozen=True)
class OccupancyHistogram:
    """Fraction of simulated time spent in each state ``0..n``."""

    fractions: np.ndarray

    @classmethod
    def from_weights(cls, weights) -> "OccupancyHistogram":
        w = np.asarray(weights, dtype=float)
        total = w.sum()
        if total <= 0:
            raise ValueError("occupancy weights must have positive total")
        return cls(w / total)

    @property
    def n(self) -> int:
        return len(self.fractions) - 1

    def mode(self) -> int:
        return int(np.argmax(self.fractions))

    def tv_distance(self, other) -> float:
        other = other.fractions if isinstance(other, OccupancyHistogram) else np.asarray(other)
        return 0.5 * float(np.abs(self.fractions - other).sum())

    def __eq__(self, other):
        return isinstance(other, OccupancyHistogram) and np.array_equal(self.fractions, other.fractions)


@dataclass(frozen=True, eq=False)
class RunTrace:
    """One trajectory as a list of state changes after ``start_state``."""

    start_state: int
    times: np.ndarray
    states: np.ndarray
    end_time: float

    @property
    def events(self) -> list[tuple[float, int]]:
        return [(float(t), int(s)) for t, s in zip(self.times, self.states)]

    def state_at(self, t: float) -> int:
        k = np.searchsorted(self.times, t, side="right")
        return self.start_state if k == 0 else int(self.states[k - 1])

    def __eq__(self, other):
        return (isinstance(other, RunTrace) and self.start_state == other.start_state
                and self.end_time == other.end_time
                and np.array_equal(self.times, other.times)
                and np.array_equal(self.states, other.states))


class TraceError(ValueError):
    pass


def check_trace(trace: RunTrace, n: int) -> None:
    """Raise :class:`TraceError` unless ``trace`` is a valid birth-death path."""
    if not 0 <= trace.start_state <= n:
        raise TraceError(f"start state {trace.start_state} outside [0, {n}]")
    if len(trace.times) != len(trace.states):
        raise TraceError("times and states differ in length")
    if len(trace.states) == 0:
        return
    states = np.concatenate(([trace.start_state], trace.states))
    jumps = np.diff(states)
    if np.any(np.abs(jumps) != 1):
        k = int(np.flatnonzero(np.abs(jumps) != 1)[0])
        raise TraceError(f"event {k} changes state by {int(jumps[k])}")
    if states.min() < 0 or states.max() > n:
        raise TraceError("state outside [0, n]")
    times = np.asarray(trace.times, dtype=float)
    if times[0] <= 0 or np.any(np.diff(times) <= 0):
        raise TraceError("timestamps are not strictly increasing")
    if times[-1] > trace.end_time:
        raise TraceError("event after end_time")


@dataclass(frozen=True)
class RunStats:
    purely_good: bool
    purely_bad: bool
    flipped: bool
    first_flip_time: float | None
    occupancy: OccupancyHistogram


def _run(spec: ChainSpec, start: int, limit: float, policy: ThresholdPolicy,
         seed: int, record: bool, stop_on_flip: bool):
    if not 0 <= start <= spec.n or int(start) != start:
        raise SpecError(f"start state {start!r} outside [0, {spec.n}]")
    policy.check(spec.n)
    rng = make_rng(seed)
    down, up, _ = spec.rates()
    discrete = spec.variant is Variant.DTMC
    kernel = _kernels.dtmc_block if discrete else _kernels.ctmc_block
    per_event = 1 if discrete else 2

    start = int(start)
    start_good = policy.is_good(start)
    occ = np.zeros(spec.n + 1)
    state = start
    t = 0 if discrete else 0.0
    lim = int(limit) if discrete else float(limit)
    flipped, flip_time = False, -1.0
    times, states = [], []
    block = _FIRST_BLOCK
    while True:
        if discrete:
            size = min(block, lim - t)
            if size <= 0:
                break
        else:
            size = 2 * block
        u = rng.random(size)
        cap = size // per_event if record else 0
        ev_t = np.empty(cap, dtype=np.int64 if discrete else float)
        ev_s = np.empty(cap, dtype=np.int64)
        state, t, flipped, flip_time, n_ev, done, _ = kernel(
            u, down, up, policy.f, start_good, state, t, lim, flipped, flip_time,
            stop_on_flip, occ, record, ev_t, ev_s)
        if record and n_ev:
            times.append(ev_t[:n_ev].astype(float))
            states.append(ev_s[:n_ev].copy())
        if done:
            break
        block = min(2 * block, _BLOCK)

    trace = None
    if record:
        trace = RunTrace(start, np.concatenate(times) if times else np.empty(0),
                         np.concatenate(states) if states else np.empty(0, dtype=np.int64),
                         float(t))
    stats = RunStats(
        purely_good=start_good and not flipped,
        purely_bad=(not start_good) and not flipped,
        flipped=bool(flipped),
        first_flip_time=float(flip_time) if flipped else None,
        occupancy=OccupancyHistogram.from_weights(occ),
    )
    return trace, stats


def _default_policy(spec: ChainSpec, policy: ThresholdPolicy | None) -> ThresholdPolicy:
    return policy if policy is not None else ThresholdPolicy.from_fraction(spec.n, 1 / 3)


def run_dtmc(spec: ChainSpec, start: int, budget: SimBudget, seed: int,
             policy: ThresholdPolicy | None = None, record_trace: bool = True):
    """Simulate one discrete-time run; returns ``(trace, stats)``.

    Each step draws one uniform ``U`` and moves down if ``U < p_i``, up if
    ``U < p_i + q_i`` and stays otherwise.  ``trace`` is ``None`` when
    ``record_trace`` is false.  The threshold defaults to ``floor((n-1)/3)``.
    """
    if spec.variant is not Variant.DTMC:
        raise SpecError(f"run_dtmc needs a dtmc spec, got {spec.variant.value}")
    if budget.mode != "steps":
        raise SpecError("discrete-time runs take a step budget")
    return _run(spec, start, budget.limit, _default_policy(spec, policy), seed,
                record_trace, False)


def run_ctmc(spec: ChainSpec, start: int, budget: SimBudget, seed: int,
             policy: ThresholdPolicy | None = None, record_trace: bool = True):
    """Simulate one continuous-time run over ``budget.limit`` time units."""
    if not spec.variant.is_ctmc:
        raise SpecError("run_ctmc needs a continuous-time spec")
    if budget.mode != "time":
        raise SpecError("continuous-time runs take a time budget")
    return _run(spec, start, budget.limit, _default_policy(spec, policy), seed,
                record_trace, False)


def run_one(spec, start, budget, seed, policy=None, record_trace=False):
    runner = run_ctmc if spec.variant.is_ctmc else run_dtmc
    return runner(spec, start, budget, seed, policy=policy, record_trace=record_trace)


@dataclass(frozen=True)
class AggregateStats:
    """Counts over a batch; percentages are derived from the counts."""

    n_runs: int
    n_purely_good: int
    n_purely_bad: int
    n_flipped: int
    mean_first_flip: float | None
    sem_first_flip: float | None
    occupancy: OccupancyHistogram
    flip_times: tuple[float, ...] = field(default=(), repr=False)

    @property
    def percent_purely_good(self) -> float:
        return 100.0 * self.n_purely_good / self.n_runs

    @property
    def percent_purely_bad(self) -> float:
        return 100.0 * self.n_purely_bad / self.n_runs

    @property
    def percent_flipped(self) -> float:
        return 100.0 * self.n_flipped / self.n_runs


def aggregate(stats: list[RunStats]) -> AggregateStats:
    """Combine per-run stats, in the order given."""
    if not stats:
        raise ValueError("cannot aggregate an empty batch")
    flips = [s.first_flip_time for s in stats if s.flipped]
    mean = sem = None
    if flips:
        mean = math.fsum(flips) / len(flips)
        if len(flips) > 1:
            var = math.fsum((x - mean) ** 2 for x in flips) / (len(flips) - 1)
            sem = math.sqrt(var / len(flips))
    occ = np.zeros_like(stats[0].occupancy.fractions)
    for s in stats:
        occ += s.occupancy.fractions
    return AggregateStats(
        n_runs=len(stats),
        n_purely_good=sum(s.purely_good for s in stats),
        n_purely_bad=sum(s.purely_bad for s in stats),
        n_flipped=len(flips),
        mean_first_flip=mean,
        sem_first_flip=sem,
        occupancy=OccupancyHistogram(occ / len(stats)),
        flip_times=tuple(flips),
    )


def run_batch(spec: ChainSpec, start: int, budget: SimBudget,
              policy: ThresholdPolicy | None = None, jobs: int = 1) -> AggregateStats:
    """Run ``budget.runs`` independent runs and aggregate them."""
    policy = _default_policy(spec, policy)
    seeds = [budget.base_seed + k for k in range(budget.runs)]

    def one(seed):
        return run_one(spec, start, budget, seed, policy=policy)[1]

    if jobs <= 1 or len(seeds) == 1:
        results = [one(s) for s in seeds]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(one, seeds))
    return aggregate(results)


def first_passage_times(spec: ChainSpec, start: int, target: int, runs: int,
                        base_seed: int = 0, max_time: float = math.inf) -> np.ndarray:
    """Monte Carlo first-passage times from ``start`` to ``target``.

    Each run stops at the hit.  Runs that have not hit by ``max_time`` are
    reported as ``nan``.
    """
    if start == target:
        return np.zeros(runs)
    if start < target:
        policy = ThresholdPolicy(target - 1)
    else:
        policy = ThresholdPolicy(target)
    if spec.variant is Variant.DTMC:
        limit = np.iinfo(np.int64).max if math.isinf(max_time) else int(max_time)
    else:
        limit = max_time
    out = np.empty(runs)
    for k in range(runs):
        _, st = _run(spec, start, limit, policy, base_seed + k, False, True)
        out[k] = st.first_flip_time if st.flipped else np.nan
    return out
