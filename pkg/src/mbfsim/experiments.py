"""Experiment harness: parameter sweeps and occupancy comparisons."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .analytics import NotErgodicError, stationary_distribution
from .chain import SUM_TOL, ChainSpec, SpecError, ThresholdPolicy, Variant
from .simulator import AggregateStats, OccupancyHistogram, SimBudget, run_batch

DEFAULT_AXIS = tuple(round(0.1 * k, 10) for k in range(1, 10))

DESK = {"n": 50, "steps": 100_000, "runs": 100}


@dataclass(frozen=True)
class SweepCell:
    p: float
    q: float
    valid: bool
    stats: AggregateStats | None = None

    def __post_init__(self):
        if not self.valid and self.stats is not None:
            raise ValueError("invalid cells carry no statistics")


@dataclass(frozen=True)
class SweepGrid:
    """A ``p x q`` grid at fixed ``n``, start state, threshold and budget.

    Every cell uses the same run seeds (``budget.base_seed + k``), so cells
    differ only through their parameters.
    """

    variant: Variant
    n: int
    start: int
    policy: ThresholdPolicy
    budget: SimBudget
    p_values: tuple = DEFAULT_AXIS
    q_values: tuple = DEFAULT_AXIS
    r: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant.parse(self.variant))
        for name in ("p_values", "q_values"):
            vals = tuple(float(v) for v in getattr(self, name))
            if not vals:
                raise SpecError(f"{name} is empty")
            if any(b <= a for a, b in zip(vals, vals[1:])):
                raise SpecError(f"{name} must be strictly ascending")
            object.__setattr__(self, name, vals)
        self.policy.check(self.n)
        if not 0 <= self.start <= self.n:
            raise SpecError(f"start state {self.start} outside [0, {self.n}]")

    def is_valid(self, p: float, q: float) -> bool:
        if self.variant is Variant.DTMC:
            r = 0.0 if self.r is None else self.r
            return p + q + r <= 1.0 + SUM_TOL
        return True

    def spec(self, p: float, q: float) -> ChainSpec:
        if self.variant is Variant.DTMC:
            return ChainSpec.dtmc(self.n, p, q, r=self.r)
        return ChainSpec(self.n, self.variant, p, q)

    def cells(self) -> list[tuple[float, float]]:
        return [(p, q) for p in self.p_values for q in self.q_values]


def run_sweep(grid: SweepGrid, jobs: int = 1) -> list[SweepCell]:
    """Run every valid cell; rows come back sorted by ``p`` then ``q``."""

    def one(pq):
        p, q = pq
        if not grid.is_valid(p, q):
            return SweepCell(p, q, False)
        return SweepCell(p, q, True, run_batch(grid.spec(p, q), grid.start, grid.budget,
                                               policy=grid.policy, jobs=1))

    cells = grid.cells()
    if jobs <= 1:
        return [one(c) for c in cells]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(one, cells))


def analytic_pi(spec: ChainSpec) -> np.ndarray | None:
    """Stationary distribution, or ``None`` when the chain has none."""
    try:
        return stationary_distribution(spec).pi
    except NotErgodicError:
        return None


def occupancy(spec: ChainSpec, start: int, budget: SimBudget,
              jobs: int = 1) -> tuple[OccupancyHistogram, np.ndarray | None]:
    """Pooled empirical occupancy next to the analytic stationary law."""
    agg = run_batch(spec, start, budget, jobs=jobs)
    return agg.occupancy, analytic_pi(spec)
