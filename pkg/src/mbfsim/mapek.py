"""Closed-loop self-protection harness (monitor, analyze, plan, execute).

A :class:`ManagedSystem` evolves under a :class:`ChainSpec`.  The monitor
takes snapshots every ``monitor_period`` time units; the analyzer turns a
snapshot and a parameter estimate into a safety window ``delta_safe``; the
planner arms a reconfiguration timer ``delta_safe - delta``; on expiry the
deployer reboots every process into a fresh configuration.

``delta_safe`` is ``None`` when the threshold can never be reached.
"""
from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np

from . import analytics
from .chain import ChainSpec, SpecError, ThresholdPolicy, Variant
from .simulator import make_rng


class InsufficientData(RuntimeError):
    """The empirical estimator has nothing to estimate from."""


# ---------------------------------------------------------------------------
# knowledge: configurations, snapshots, estimates


@dataclass(frozen=True)
class Configuration:
    id: int
    members: tuple[tuple[int, str], ...]

    def __post_init__(self):
        ids = [pid for pid, _ in self.members]
        if len(set(ids)) != len(ids):
            raise SpecError("process ids in a configuration must be unique")

    @classmethod
    def initial(cls, n: int, security: str = "baseline") -> "Configuration":
        return cls(0, tuple((j, security) for j in range(n)))

    @property
    def size(self) -> int:
        return len(self.members)

    def successor(self) -> "Configuration":
        # processes are not diverse, so the new configuration reuses conf_0's features
        return Configuration(self.id + 1, self.members)


@dataclass(frozen=True)
class Snapshot:
    config: Configuration
    observed_faulty: int
    timestamp: float


@dataclass(frozen=True)
class ParamEstimate:
    variant: Variant
    p_hat: float
    q_hat: float
    r_hat: float = 0.0
    seed_rate_hat: float | None = None

    def to_spec(self, n: int) -> ChainSpec:
        return _spec_from_estimate(self, n)


@lru_cache(maxsize=1024)
def _spec_from_estimate(est: ParamEstimate, n: int) -> ChainSpec:
    if est.variant is Variant.DTMC:
        return ChainSpec.dtmc(n, est.p_hat, est.q_hat, est.r_hat)
    return ChainSpec(n=n, variant=est.variant, p=est.p_hat, q=est.q_hat,
                     seed_rate=est.seed_rate_hat)


# ---------------------------------------------------------------------------
# transition history


class TransitionWindow:
    """The last ``maxlen`` transitions with running sufficient statistics.

    Entries are ``(state, dwell, new_state)``.  Tallies are updated on every
    append and eviction, and rebuilt from scratch once per ``maxlen``
    evictions so that float subtraction cannot drift.
    """

    def __init__(self, maxlen: int, variant: Variant, n: int):
        if maxlen < 1:
            raise SpecError("history window must be positive")
        self.maxlen = maxlen
        self.variant = variant
        self.n = n
        self._items: deque = deque()
        self._evictions = 0
        self._reset()

    def _reset(self):
        # DTMC: interior steps, downs, ups.  CTMC: events and exposures.
        self.steps = self.downs = self.ups = 0
        self.down_exp = self.up_exp = 0.0
        self.seed_events = 0
        self.seed_time = 0.0

    def _tally(self, entry, sign):
        s, dwell, new = entry
        n = self.n
        if self.variant is Variant.DTMC:
            if 0 < s < n:
                self.steps += sign
                self.downs += sign * (new == s - 1)
                self.ups += sign * (new == s + 1)
            return
        if s == 0:
            self.seed_time += sign * dwell
            self.seed_events += sign * (new == 1)
            return
        gd, gu = _state_factors(self.variant, s, n)
        self.down_exp += sign * dwell * gd
        self.up_exp += sign * dwell * gu
        self.downs += sign * (new == s - 1)
        self.ups += sign * (new == s + 1)

    def append(self, entry) -> None:
        self._items.append(entry)
        self._tally(entry, 1)
        if len(self._items) > self.maxlen:
            self._tally(self._items.popleft(), -1)
            self._evictions += 1
            if self._evictions >= self.maxlen:
                self._evictions = 0
                self._reset()
                for e in self._items:
                    self._tally(e, 1)

    def extend(self, entries) -> None:
        for e in entries:
            self.append(e)

    def tail(self, k: int) -> "TransitionWindow":
        """A fresh window over the last ``k`` entries."""
        out = TransitionWindow(max(k, 1), self.variant, self.n)
        out.extend(list(self._items)[-k:] if k else [])
        return out

    def __len__(self):
        return len(self._items)

    def __iter__(self):
        return iter(self._items)


# ---------------------------------------------------------------------------
# managed system


class ManagedSystem:
    """The monitored distributed system: a faulty-count chain plus bookkeeping.

    Unsafe time is the time spent above ``f``; in discrete time every step
    landing above ``f`` counts one unit, even if a reset follows at the same
    instant.  ``history`` keeps the last ``window`` transitions as ``(state, dwell,
    new_state)`` tuples for the empirical estimator; for the DTMC ``dwell``
    is one step and ``new_state`` may equal ``state``.
    """

    def __init__(self, spec: ChainSpec, seed: int, start: int = 0,
                 policy: ThresholdPolicy | None = None, window: int = 1000):
        self.spec = spec
        self.state = int(start)
        self.time = 0.0
        self.config = Configuration.initial(spec.n)
        self.policy = policy
        self.history = TransitionWindow(window, spec.variant, spec.n)
        self.reboots_sent = 0
        self.unsafe_time = 0.0
        self._rng = make_rng(seed)
        self._buf = np.empty(0)
        self._pos = 0
        self._down, self._up, _ = spec.rates()
        self._continuous = spec.variant.is_ctmc
        # crossing callback: called with the time the state first exceeds f
        self.on_cross = None

    def _uniform(self) -> float:
        if self._pos >= len(self._buf):
            self._buf = self._rng.random(4096)
            self._pos = 0
        x = self._buf[self._pos]
        self._pos += 1
        return x

    def _dwell(self, until: float) -> None:
        if self._continuous and self.policy is not None and self.state > self.policy.f:
            self.unsafe_time += until - self.time
        self.time = until

    def _move(self, new_state: int) -> None:
        was_safe = self.policy is None or self.state <= self.policy.f
        self.state = new_state
        if not was_safe or self.policy is None:
            return
        if new_state > self.policy.f and self.on_cross is not None:
            self.on_cross(self.time)

    def evolve_until(self, t: float) -> None:
        """Advance the chain to time ``t``.

        DTMC steps happen at integer times.  For a CTMC, a holding time that
        overshoots ``t`` is discarded and redrawn later, which is exact by
        memorylessness.
        """
        if t < self.time:
            raise ValueError("cannot evolve backwards")
        down, up = self._down, self._up
        if self.spec.variant is Variant.DTMC:
            k = math.floor(self.time) + 1
            while k <= t:
                self._dwell(float(k))
                s = self.state
                x = self._uniform()
                if x < down[s]:
                    new = s - 1
                elif x < down[s] + up[s]:
                    new = s + 1
                else:
                    new = s
                self.history.append((s, 1.0, new))
                if new != s:
                    self._move(new)
                if self.policy is not None and new > self.policy.f:
                    self.unsafe_time += 1.0
                k += 1
            self._dwell(t)
            return
        while True:
            s = self.state
            rate = down[s] + up[s]
            if rate <= 0:
                self._dwell(t)
                return
            h = -math.log1p(-self._uniform()) / rate
            if self.time + h > t:
                self.history.append((s, t - self.time, None))
                self._dwell(t)
                return
            self._dwell(self.time + h)
            new = s - 1 if self._uniform() * rate < down[s] else s + 1
            self.history.append((s, h, new))
            self._move(new)

    def reboot_all(self, new_config: Configuration) -> None:
        for _pid, _sec in self.config.members:
            self.reboots_sent += 1  # REBOOT(new_config) to each process
        self.config = new_config
        self.state = 0


# ---------------------------------------------------------------------------
# monitor


class GroundTruth:
    """Passes the true chain parameters through."""

    def estimate(self, world: ManagedSystem) -> ParamEstimate:
        return _true_estimate(world.spec)


@lru_cache(maxsize=64)
def _true_estimate(s: ChainSpec) -> ParamEstimate:
    return ParamEstimate(s.variant, s.p, s.q, s.r, s.seed_rate)


@dataclass
class Empirical:
    """Frequency / maximum-likelihood estimates from the world's history.

    DTMC: fractions of down, up and stay moves among steps taken from
    interior states.  CTMC: event counts divided by the exposure
    ``sum(dwell * g(state))`` where ``g`` is the variant's state factor
    (1, ``i`` or ``i (n - i) / n``).
    """

    window: int = 1000

    def estimate(self, world: ManagedSystem) -> ParamEstimate:
        w = world.history
        if self.window < w.maxlen:
            w = w.tail(self.window)
        variant = world.spec.variant
        if variant is Variant.DTMC:
            if w.steps == 0:
                raise InsufficientData("no interior steps in the history window")
            total = w.steps
            return ParamEstimate(variant, w.downs / total, w.ups / total,
                                 (total - w.downs - w.ups) / total)
        if w.down_exp <= 0 and w.up_exp <= 0:
            raise InsufficientData("no time observed outside state 0")
        p_hat = w.downs / w.down_exp if w.down_exp > 0 else 0.0
        q_hat = w.ups / w.up_exp if w.up_exp > 0 else 0.0
        if p_hat + q_hat <= 0:
            raise InsufficientData("no transitions observed in the history window")
        if variant is Variant.CTMC_EXTERNAL:
            return ParamEstimate(variant, p_hat, q_hat)
        seed = w.seed_events / w.seed_time if w.seed_time > 0 else q_hat
        return ParamEstimate(variant, p_hat, q_hat, 0.0, seed)


def _state_factors(variant: Variant, i: int, n: int) -> tuple[float, float]:
    if variant is Variant.CTMC_EXTERNAL:
        return 1.0, 1.0 if i < n else 0.0
    if variant is Variant.CTMC_INTERNAL:
        return float(i), i * (n - i) / n
    return float(i), float(i) if i < n else 0.0


def monitor_snapshot(world: ManagedSystem, estimator) -> tuple[Snapshot, ParamEstimate]:
    """Snapshot of the world with perfect fault observation, plus estimates."""
    snap = Snapshot(world.config, world.state, world.time)
    return snap, estimator.estimate(world)


# ---------------------------------------------------------------------------
# analyze


@dataclass(frozen=True)
class MeanHitting:
    kind: str = field(default="mean", init=False)


@dataclass(frozen=True)
class QuantileHitting:
    epsilon: float = 0.01
    max_steps: int = 10 ** 7
    kind: str = field(default="quantile", init=False)

    def __post_init__(self):
        if not 0 < self.epsilon < 1:
            raise SpecError("epsilon must lie in (0, 1)")


@lru_cache(maxsize=256)
def _mean_vector(spec: ChainSpec, target: int) -> np.ndarray:
    return analytics.expected_hitting_time_exact(spec, target, partial=True).f_values


@lru_cache(maxsize=4096)
def _quantile(spec: ChainSpec, start: int, target: int, eps: float, max_steps: int) -> float:
    return analytics.hitting_time_quantile(spec, start, target, eps, max_steps)[0]


def analyze(snapshot: Snapshot, estimate: ParamEstimate, policy: ThresholdPolicy,
            method=None) -> float | None:
    """Safety window from the observed state to the first unsafe state ``f+1``.

    Returns ``0.0`` for an already unsafe snapshot and ``None`` when the
    unsafe state is unreachable.
    """
    method = QuantileHitting() if method is None else method
    n = snapshot.config.size
    s = snapshot.observed_faulty
    target = policy.f + 1
    if s > policy.f:
        return 0.0
    if target > n:
        return None
    spec = estimate.to_spec(n)
    if isinstance(method, MeanHitting):
        value = float(_mean_vector(spec, target)[s])
    elif isinstance(method, QuantileHitting):
        value = _quantile(spec, s, target, method.epsilon, method.max_steps)
    else:
        raise TypeError(f"unknown analysis method {method!r}")
    return None if math.isinf(value) else value


# ---------------------------------------------------------------------------
# plan


@dataclass(frozen=True)
class PlannerState:
    delta_reconfig: float = 0.0
    timer: float | None = None
    last_delta_safe: float | None = None

    def __post_init__(self):
        if self.delta_reconfig < 0:
            raise SpecError("delta_reconfig must be nonnegative")
        if self.timer is not None and self.timer < 0:
            raise SpecError("timer must be nonnegative")


def plan(planner: PlannerState, delta_safe: float | None) -> PlannerState:
    """Arm the timer at ``delta_safe - delta`` when positive, else at 0.

    A ``None`` window leaves the timer unset.
    """
    d = planner.delta_reconfig
    if delta_safe is None:
        return PlannerState(d, None, None)
    if delta_safe < 0:
        raise ValueError("delta_safe must be nonnegative")
    timer = delta_safe - d if d < delta_safe else 0.0
    return PlannerState(d, timer, delta_safe)


# ---------------------------------------------------------------------------
# execute


def deploy(world: ManagedSystem, new_config: Configuration, delta: float = 0.0) -> ManagedSystem:
    """Reboot every process into ``new_config``.

    The chain keeps evolving for the ``delta`` time units the deployment
    takes; the reset to zero faulty processes applies at the end.
    """
    if delta > 0:
        world.evolve_until(world.time + delta)
    world.reboot_all(new_config)
    return world


# ---------------------------------------------------------------------------
# closed loop


@dataclass(frozen=True)
class LoopConfig:
    delta: float = 0.0
    monitor_period: float = 1.0
    method: object = field(default_factory=QuantileHitting)
    estimator: object = field(default_factory=GroundTruth)
    rearm: bool = True
    start: int = 0

    def __post_init__(self):
        if self.delta < 0:
            raise SpecError("delta must be nonnegative")
        if not self.monitor_period > 0:
            raise SpecError("monitor_period must be positive")


@dataclass
class Interval:
    start: float
    end: float | None = None
    first_crossing: float | None = None
    crossed_before_timer: bool = False
    ended_by: str | None = None
    thrashed: bool = False


@dataclass
class LoopReport:
    horizon: float
    n_reconfigurations: int
    unsafe_time: float
    unsafe_fraction: float
    n_intervals: int
    n_crossed_before_timer: int
    crossing_frequency: float
    thrashing: bool
    final_config_id: int
    reboots_sent: int
    intervals: list[Interval] = field(repr=False, default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, doc: dict) -> "LoopReport":
        doc = dict(doc)
        doc["intervals"] = [Interval(**iv) for iv in doc.get("intervals", [])]
        return cls(**doc)


def closed_loop(spec: ChainSpec, policy: ThresholdPolicy, config: LoopConfig | None,
                horizon: float, seed: int) -> LoopReport:
    """Run the managed system with the MAPE-K loop attached until ``horizon``.

    Order of processing at one instant: chain transitions, deployment
    completion (which resets the state and takes an immediate snapshot),
    the periodic snapshot, then timer expiry.  While a deployment is in
    flight the planner does not re-arm, and a snapshot whose estimator
    reports :class:`InsufficientData` leaves the timer as it is.  With ``rearm=False`` the timer is
    armed only by the first snapshot of each interval.
    """
    config = LoopConfig() if config is None else config
    if not horizon > 0:
        raise SpecError("horizon must be positive")
    policy.check(spec.n)
    world = ManagedSystem(spec, seed, start=config.start, policy=policy,
                          window=getattr(config.estimator, "window", 1000))
    planner = PlannerState(delta_reconfig=config.delta)
    intervals = [Interval(start=0.0)]
    state = {"timer_at": None, "deploy_at": None, "armed": False, "last_deploy": None}

    def on_cross(t):
        iv = intervals[-1]
        if iv.first_crossing is None:
            iv.first_crossing = t - iv.start
            iv.crossed_before_timer = state["deploy_at"] is None
    world.on_cross = on_cross
    if world.state > policy.f:
        on_cross(0.0)

    def snapshot_and_plan(now):
        nonlocal planner
        if state["deploy_at"] is not None:
            return
        try:
            snap, est = monitor_snapshot(world, config.estimator)
        except InsufficientData:
            return  # nothing to estimate from yet; stay unarmed
        if not config.rearm and state["armed"]:
            return
        delta_safe = analyze(snap, est, policy, config.method)
        planner = plan(planner, delta_safe)
        first = not state["armed"]
        state["armed"] = True
        if planner.timer is None:
            state["timer_at"] = None
            return
        if first and planner.timer == 0:
            intervals[-1].thrashed = True
        state["timer_at"] = now + planner.timer

    n_reconf = 0
    next_tick = 0.0
    tick = 0
    while True:
        pending = [next_tick]
        if state["timer_at"] is not None:
            pending.append(state["timer_at"])
        if state["deploy_at"] is not None:
            pending.append(state["deploy_at"])
        now = min(pending)
        if now > horizon:
            world.evolve_until(horizon)
            break
        world.evolve_until(now)

        if state["deploy_at"] is not None and state["deploy_at"] <= now:
            new_conf = world.config.successor()
            deploy(world, new_conf)
            n_reconf += 1
            state["deploy_at"] = None
            state["armed"] = False
            state["last_deploy"] = now
            iv = intervals[-1]
            iv.end, iv.ended_by = now, "deploy"
            intervals.append(Interval(start=now))
            snapshot_and_plan(now)
        if next_tick <= now:
            snapshot_and_plan(now)
            tick += 1
            next_tick = tick * config.monitor_period
        t_at = state["timer_at"]
        if t_at is not None and t_at <= now:
            if state["last_deploy"] == now and config.delta == 0:
                # one zero-length reconfiguration per instant; retry at the next tick
                state["timer_at"] = next_tick
            else:
                state["timer_at"] = None
                state["deploy_at"] = now + config.delta

    last = intervals[-1]
    last.end, last.ended_by = horizon, "horizon"
    completed = [iv for iv in intervals if iv.ended_by == "deploy"]
    n_crossed = sum(iv.crossed_before_timer for iv in intervals)
    thrashing = (n_reconf >= 2 and
                 sum(iv.thrashed for iv in completed) > 0.5 * len(completed))
    return LoopReport(
        horizon=float(horizon),
        n_reconfigurations=n_reconf,
        unsafe_time=world.unsafe_time,
        unsafe_fraction=world.unsafe_time / horizon,
        n_intervals=len(intervals),
        n_crossed_before_timer=n_crossed,
        crossing_frequency=n_crossed / len(intervals),
        thrashing=thrashing,
        final_config_id=world.config.id,
        reboots_sent=world.reboots_sent,
        intervals=intervals,
    )


# ---------------------------------------------------------------------------
# scenario files


@dataclass(frozen=True)
class Scenario:
    spec: ChainSpec
    policy: ThresholdPolicy
    loop: LoopConfig
    horizon: float
    seed: int

    @classmethod
    def from_dict(cls, doc: dict) -> "Scenario":
        spec = ChainSpec.from_dict(doc["spec"])
        pol = doc.get("policy", {})
        if "f" in pol:
            policy = ThresholdPolicy(pol["f"])
        else:
            policy = ThresholdPolicy.from_fraction(spec.n, pol.get("fraction", 1 / 3))
        est = doc.get("estimator", {"kind": "ground-truth"})
        if est["kind"] == "ground-truth":
            estimator = GroundTruth()
        elif est["kind"] == "empirical":
            estimator = Empirical(window=int(est.get("window", 1000)))
        else:
            raise SpecError(f"unknown estimator {est['kind']!r}")
        meth = doc.get("method", {"kind": "quantile", "epsilon": 0.01})
        if meth["kind"] == "mean":
            method = MeanHitting()
        elif meth["kind"] == "quantile":
            method = QuantileHitting(epsilon=float(meth.get("epsilon", 0.01)))
        else:
            raise SpecError(f"unknown method {meth['kind']!r}")
        loop = LoopConfig(delta=float(doc.get("delta", 0.0)),
                          monitor_period=float(doc.get("monitor_period", 1.0)),
                          method=method, estimator=estimator,
                          rearm=bool(doc.get("rearm", True)),
                          start=int(doc.get("start", 0)))
        try:
            return cls(spec, policy, loop, float(doc["horizon"]), int(doc["seed"]))
        except KeyError as exc:
            raise SpecError(f"scenario is missing {exc.args[0]!r}") from None

    def run(self) -> LoopReport:
        return closed_loop(self.spec, self.policy, self.loop, self.horizon, self.seed)
