"""Exact numerics for the birth-death chains and the closed-form estimates.

All hitting times are first-passage times: ``f(target) = 0``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy import stats

from . import _kernels
from .chain import ChainSpec, SpecError, Variant


class UnreachableTargetError(ValueError):
    """Some start state does not reach the target with probability one."""


class NotErgodicError(ValueError):
    pass


# ---------------------------------------------------------------------------
# expected hitting times


def thomas(lower, diag, upper, rhs):
    """Solve a tridiagonal system without pivoting.

    ``lower[0]`` and ``upper[-1]`` are ignored.  Safe for the weakly
    diagonally dominant M-matrices built here: every pivot stays positive.
    """
    lower = np.asarray(lower, dtype=float)
    diag = np.asarray(diag, dtype=float)
    upper = np.asarray(upper, dtype=float)
    rhs = np.asarray(rhs, dtype=float)
    m = len(diag)
    c = np.empty(m)
    d = np.empty(m)
    denom = diag[0]
    c[0] = upper[0] / denom
    d[0] = rhs[0] / denom
    for i in range(1, m):
        denom = diag[i] - lower[i] * c[i - 1]
        if denom <= 0:
            raise np.linalg.LinAlgError(f"nonpositive pivot at row {i}")
        c[i] = upper[i] / denom
        d[i] = (rhs[i] - lower[i] * d[i - 1]) / denom
    x = np.empty(m)
    x[-1] = d[-1]
    for i in range(m - 2, -1, -1):
        x[i] = d[i] - c[i] * x[i + 1]
    return x


@dataclass(frozen=True, eq=False)
class HittingTimeSolution:
    """``f_values[i]`` is the expected first-passage time from ``i``.

    Entries are ``inf`` for states that miss the target with positive
    probability (only possible with ``partial=True``).
    """

    target: int
    f_values: np.ndarray

    def __getitem__(self, i):
        return float(self.f_values[i])

    @property
    def finite(self) -> np.ndarray:
        return np.isfinite(self.f_values)


def _sure_hit_mask(down, up, target):
    """States from which ``target`` is hit almost surely.

    Below the target a state is safe unless it can drift, through positive
    down-moves, to a state whose up-move is impossible; above it symmetric.
    """
    n = len(down) - 1
    ok = np.zeros(n + 1, dtype=bool)
    ok[target] = True
    trapped = False
    for i in range(target):
        if up[i] <= 0:
            trapped = True
        elif down[i] <= 0:
            trapped = False  # barrier: the walk never falls below i
        ok[i] = not trapped
    trapped = False
    for i in range(n, target, -1):
        if down[i] <= 0:
            trapped = True
        elif up[i] <= 0:
            trapped = False
        ok[i] = not trapped
    return ok


def _solve_block(down, up, rows, ascending):
    """Solve ``(d+u) f_i - d f_{i-1} - u f_{i+1} = 1`` over ``rows``.

    ``rows`` runs from the reflecting end (whose far-side rate is zero) to the
    state next to the target; ``ascending`` is true below the target.  This is tridiagonal elimination written in the
    increments ``g_k = f(rows[k]) - f(rows[k+1])``, which obey
    ``g_k = (1 + a_k g_{k-1}) / b_k`` with ``a`` the rate away from the
    target and ``b`` the rate toward it.  Only positive terms are added, so
    nothing cancels even when the times reach 1e100.
    """
    rows = list(rows)
    m = len(rows)
    if m == 0:
        return np.empty(0)
    g = np.empty(m)
    prev = 0.0
    for k, i in enumerate(rows):
        away, toward = (down[i], up[i]) if ascending else (up[i], down[i])
        prev = (1.0 + away * prev) / toward
        g[k] = prev
    return np.cumsum(g[::-1])[::-1]


def expected_hitting_time_exact(spec: ChainSpec, target: int,
                                partial: bool = False) -> HittingTimeSolution:
    """Expected first-passage times to ``target`` from every state.

    DTMC rows read ``f(i) = 1 + p_i f(i-1) + q_i f(i+1) + r_i f(i)``, CTMC
    rows ``f(i) = (1 + p_i f(i-1) + q_i f(i+1)) / (p_i + q_i)``; both become
    ``(p_i + q_i) f(i) - p_i f(i-1) - q_i f(i+1) = 1``.

    Raises :class:`UnreachableTargetError` if some state may never hit the
    target, unless ``partial`` is set, in which case those entries are
    ``inf``.
    """
    n = spec.n
    if int(target) != target or not 0 <= target <= n:
        raise SpecError(f"target {target!r} outside [0, {n}]")
    target = int(target)
    down, up, _ = spec.rates()
    ok = _sure_hit_mask(down, up, target)
    if not ok.all() and not partial:
        bad = np.flatnonzero(~ok)
        raise UnreachableTargetError(
            f"target {target} is not hit almost surely from states {bad.tolist()[:10]}"
            f"{'...' if len(bad) > 10 else ''} ({spec.variant.value}, p={spec.p}, q={spec.q})")
    f = np.full(n + 1, np.inf)
    f[target] = 0.0
    below = [i for i in range(target) if ok[i]]
    above = [i for i in range(n, target, -1) if ok[i]]
    if below:
        f[below] = _solve_block(down, up, below, True)
    if above:
        f[above] = _solve_block(down, up, above, False)
    return HittingTimeSolution(target=target, f_values=f)


def hitting_residual(spec: ChainSpec, sol: HittingTimeSolution) -> float:
    """Max relative residual of ``sol`` in its defining recurrence."""
    down, up, _ = spec.rates()
    f = sol.f_values
    worst = 0.0
    for i in range(spec.n + 1):
        if i == sol.target or not math.isfinite(f[i]):
            continue
        lhs = (down[i] + up[i]) * f[i]
        rhs = 1.0
        if down[i] > 0:
            rhs += down[i] * f[i - 1]
        if up[i] > 0:
            rhs += up[i] * f[i + 1]
        worst = max(worst, abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1.0))
    return worst


def dtmc_lazy_scaling(f_r0: float, r: float) -> float:
    """Passage time of the lazy walk: ``f_r0 / (1 - r)``."""
    if not 0 <= r < 1:
        raise ValueError(f"laziness r must lie in [0, 1), got {r!r}")
    return f_r0 / (1.0 - r)


# ---------------------------------------------------------------------------
# closed-form estimates


def gamblers_ruin_prob(p: float, q: float, m: int, symmetric_limit: bool = False) -> float:
    """Probability that the walk from 1 reaches ``m`` before 0.

    ``p`` is the down (recovery) probability and ``q`` the up (infection)
    probability, giving ``(p/q - 1) / ((p/q)**m - 1)``.  At ``p == q`` the
    formula is 0/0; the limit ``1/m`` is returned only with
    ``symmetric_limit=True``.
    """
    if m < 1 or int(m) != m:
        raise ValueError("m must be a positive integer")
    if math.isclose(p, q, rel_tol=1e-12, abs_tol=0.0):
        if symmetric_limit:
            return 1.0 / m
        raise ValueError("p == q: use symmetric_limit=True for the 1/m limit")
    if p <= 0 or q <= 0:
        raise ValueError("p and q must be positive")
    ratio = p / q
    return math.expm1(math.log(ratio)) / math.expm1(m * math.log(ratio))


def _check_complement(p: float, q: float) -> None:
    if not math.isclose(p + q, 1.0, rel_tol=0.0, abs_tol=1e-12):
        raise ValueError(f"bound requires q = 1 - p (got p={p}, q={q})")


def recovery_bias_lower_bound(p: float, q: float, n: int) -> float:
    """``0.5 * (p/q)**(n/3)``: time to n/3 when recovery outweighs infection."""
    _check_complement(p, q)
    if not p > 0.5:
        raise ValueError("bound requires p > 1/2")
    return 0.5 * (p / q) ** (n / 3)


def infection_bias_lower_bound(p: float, n: int) -> float:
    """``n / ((1 - 2p) (1 - p/q))`` with ``q = 1 - p``, for ``p < 1/2``.

    Not a valid lower bound on the exact time to n/3 at the sizes checked
    in the test suite (the exact time is several times smaller); kept as
    stated so the comparison can be reported.
    """
    if not 0 <= p < 0.5:
        raise ValueError("bound requires 0 <= p < 1/2")
    q = 1.0 - p
    return n / ((1.0 - 2.0 * p) * (1.0 - p / q))


class Regime(str, Enum):
    EXPONENTIAL_TIME = "exponential-time"
    LOG_TIME = "log-time"
    INDETERMINATE = "indeterminate"


def internal_regime(p: float, q: float) -> Regime:
    """Growth regime of the INTERNAL chain's time to reach n/3.

    The threshold ``p = 2q/3`` is compared with a relative tolerance of
    1e-12 so that decimal inputs such as (0.4, 0.6) land on the boundary.
    """
    if q <= 0:
        raise ValueError("q must be positive")
    if p < 0:
        raise ValueError("p must be nonnegative")
    if math.isclose(3 * p, 2 * q, rel_tol=1e-12, abs_tol=0.0):
        return Regime.INDETERMINATE
    return Regime.EXPONENTIAL_TIME if 3 * p > 2 * q else Regime.LOG_TIME


def _coordinated_double_sum(p: float, q: float, m: int) -> float:
    zeta = p / q
    total = 0.0
    for k in range(1, m + 1):
        inner = math.fsum(zeta ** j for j in range(m - k))
        total += inner / (k * q)
    return total


def coordinated_f1_closed_form(p: float, q: float, n: int) -> float:
    """Telescoped double sum for ``f(1)`` in the COORDINATED chain, literal limits.

    ``sum_{k=1}^{m} sum_{j=0}^{m-k-1} zeta**j / (k q) - 1`` with
    ``zeta = p/q`` and ``m = n // 3``, evaluated term by term.  This drops
    the boundary contribution; see :func:`coordinated_f1_reconciled`.
    """
    if q <= 0:
        raise ValueError("q must be positive")
    return _coordinated_double_sum(p, q, n // 3) - 1.0


def coordinated_f1_reconciled(p: float, q: float, n: int, boundary_gap: float = 1.0) -> float:
    """``f(1)`` for target ``n // 3`` including the boundary term.

    With ``d_i = f(i) - f(i+1)`` the recursion ``d_i = zeta d_{i-1} + 1/(q i)``
    and ``d_0 = boundary_gap`` telescope to
    ``f(1) = boundary_gap * sum_{i=1}^{m-1} zeta**i + double_sum``.
    ``boundary_gap`` is ``1 / seed_rate``.
    """
    if q <= 0:
        raise ValueError("q must be positive")
    m = n // 3
    zeta = p / q
    geometric = math.fsum(zeta ** i for i in range(1, m))
    return boundary_gap * geometric + _coordinated_double_sum(p, q, m)


# ---------------------------------------------------------------------------
# stationary distribution


@dataclass(frozen=True, eq=False)
class StationaryDistribution:
    pi: np.ndarray

    def argmax(self) -> int:
        return int(np.argmax(self.pi))


def stationary_distribution(spec: ChainSpec) -> StationaryDistribution:
    """Detailed-balance weights ``w[i+1] = w[i] q_i / p_{i+1}``, in log space."""
    down, up, _ = spec.rates()
    n = spec.n
    if np.any(up[:n] <= 0) or np.any(down[1:] <= 0):
        raise NotErgodicError(
            f"{spec.variant.value} chain with p={spec.p}, q={spec.q}, "
            f"seed_rate={spec.seed_rate} is not irreducible")
    logw = np.concatenate(([0.0], np.cumsum(np.log(up[:n]) - np.log(down[1:]))))
    w = np.exp(logw - logw.max())
    return StationaryDistribution(w / w.sum())


def product_formula_reference(n: int, p: float, q: float) -> np.ndarray:
    """Closed product form for the INTERNAL chain, for comparison only.

    ``pi(k) = (q/(n p))**(k-1) * prod_{i=n-k}^{n-2} i`` for ``k >= 1`` with
    ``pi(1) = 1``, normalized over states ``1..n`` (state 0 gets zero).  It is
    index-shifted against the detailed-balance recurrence and is not used
    by any computation here.
    """
    logw = np.full(n + 1, -np.inf)
    logw[1] = 0.0
    base = math.log(q / (n * p))
    for k in range(2, n + 1):
        if n - k == 0:
            continue  # the product contains the factor 0
        logw[k] = (k - 1) * base + np.log(np.arange(n - k, n - 1, dtype=float)).sum()
    w = np.exp(logw - logw.max())
    return w / w.sum()


def generator_matrix(spec: ChainSpec) -> np.ndarray:
    """Dense generator ``Q`` (CTMC) or ``P - I`` (DTMC)."""
    down, up, _ = spec.rates()
    n = spec.n
    Q = np.zeros((n + 1, n + 1))
    for i in range(n + 1):
        if i > 0:
            Q[i, i - 1] = down[i]
        if i < n:
            Q[i, i + 1] = up[i]
        Q[i, i] = -(down[i] + up[i])
    return Q


# ---------------------------------------------------------------------------
# transient analysis


def _oriented(spec: ChainSpec, start: int, target: int):
    """Arrays with the target above the start (mirror if needed)."""
    down, up, stay = spec.rates()
    if start < target:
        return down, up, stay, start, target
    n = spec.n
    return (up[::-1].copy(), down[::-1].copy(), stay[::-1].copy(), n - start, n - target)


def _uniformized(down, up, target):
    lam = float(np.max((down + up)[:target]))
    d = down / lam
    u = up / lam
    s = 1.0 - d - u
    return lam, np.ascontiguousarray(d), np.ascontiguousarray(u), np.ascontiguousarray(s)


def _poisson_mix(column, lam_t):
    k = np.arange(len(column))
    w = stats.poisson.pmf(k, lam_t)
    return float(np.dot(w, column))


def _poisson_horizon(lam_t):
    return int(stats.poisson.isf(1e-15, lam_t)) + 2


def first_passage_cdf(spec: ChainSpec, start: int, target: int, t: float) -> float:
    """``P_start(tau_target <= t)``; ``t`` counts steps for the DTMC."""
    if start == target:
        return 1.0
    down, up, stay, s, tg = _oriented(spec, start, target)
    if spec.variant is Variant.DTMC:
        steps = int(math.floor(t))
        if steps <= 0:
            return 0.0
        _, mass = _kernels.absorption_first_exceed(
            np.ascontiguousarray(down), np.ascontiguousarray(up),
            np.ascontiguousarray(stay), tg, s, 2.0, steps)
        return float(mass)
    if t <= 0:
        return 0.0
    lam, d, u, st = _uniformized(down, up, tg)
    col = _kernels.absorption_column(d, u, st, tg, s, _poisson_horizon(lam * t))
    return _poisson_mix(col, lam * t)


def hitting_time_quantile(spec: ChainSpec, start: int, target: int, eps: float,
                          max_steps: int = 10 ** 7) -> tuple[float, bool]:
    """Largest ``t`` with ``P_start(tau_target <= t) <= eps``.

    Returns ``(t, truncated)``.  ``t`` is ``inf`` when the target cannot be
    reached at all.  If the absorbed mass has not exceeded ``eps`` after
    ``max_steps`` steps (uniformized jumps for a CTMC) the search stops and
    reports that horizon with ``truncated=True``; the true quantile is at
    least that large, so the value is a safe underestimate.
    """
    if not 0 < eps < 1:
        raise ValueError("eps must lie in (0, 1)")
    if start == target:
        return 0.0, False
    down, up, stay, s, tg = _oriented(spec, start, target)
    if np.any(up[s:tg] <= 0):
        return math.inf, False
    if spec.variant is Variant.DTMC:
        k, mass = _kernels.absorption_first_exceed(
            np.ascontiguousarray(down), np.ascontiguousarray(up),
            np.ascontiguousarray(stay), tg, s, eps, max_steps)
        if mass > eps:
            return float(k - 1), False
        return float(max_steps), True

    lam, d, u, st = _uniformized(down, up, tg)

    def cdf(t):
        col = _kernels.absorption_column(d, u, st, tg, s, _poisson_horizon(lam * t))
        return _poisson_mix(col, lam * t)

    lo, hi = 0.0, 1.0 / lam
    while cdf(hi) <= eps:
        lo, hi = hi, 2 * hi
        if lam * hi > max_steps:
            return lo, True
    while hi - lo > 1e-9 * max(hi, 1.0):
        mid = 0.5 * (lo + hi)
        if cdf(mid) <= eps:
            lo = mid
        else:
            hi = mid
    return lo, False
