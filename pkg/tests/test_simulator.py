import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import mbfsim.simulator as sim
from mbfsim.chain import ChainSpec, SpecError, ThresholdPolicy, Variant
from mbfsim.simulator import (SimBudget, TraceError, aggregate, check_trace,
                              first_passage_times, run_batch, run_ctmc, run_dtmc, run_one)
from oracles import dense_hitting, dense_stationary


def test_forced_walk_climbs():
    spec = ChainSpec.dtmc(10, 0.0, 1.0, 0.0)
    trace, stats = run_dtmc(spec, 0, SimBudget.steps(10), seed=3)
    assert trace.events == [(float(k), k) for k in range(1, 11)]
    assert trace.end_time == 10.0
    assert stats.flipped and stats.first_flip_time == 4.0  # f = floor(9/3) = 3


def test_budget_validation():
    with pytest.raises(SpecError):
        SimBudget("events", 10)
    with pytest.raises(SpecError):
        SimBudget.steps(10.5)
    with pytest.raises(SpecError):
        SimBudget.time(0.0)
    with pytest.raises(SpecError):
        SimBudget.steps(5, runs=0)


def test_variant_and_budget_mismatch():
    d = ChainSpec.dtmc(5, 0.5, 0.5)
    c = ChainSpec(5, "ctmc-external", 0.5, 0.5)
    with pytest.raises(SpecError):
        run_ctmc(d, 0, SimBudget.time(5.0), 0)
    with pytest.raises(SpecError):
        run_dtmc(c, 0, SimBudget.steps(5), 0)
    with pytest.raises(SpecError):
        run_dtmc(d, 0, SimBudget.time(5.0), 0)
    with pytest.raises(SpecError):
        run_dtmc(d, 6, SimBudget.steps(5), 0)


def test_absorbing_zero_state():
    spec = ChainSpec(20, "ctmc-internal", 0.4, 0.6, seed_rate=0.0)
    trace, stats = run_ctmc(spec, 0, SimBudget.time(100.0), seed=0)
    assert trace.events == [] and trace.end_time == 100.0
    assert stats.occupancy.fractions[0] == 1.0
    assert stats.purely_good and not stats.flipped


def test_same_seed_same_everything():
    for spec, budget in [(ChainSpec.dtmc(30, 0.45, 0.5), SimBudget.steps(50_000)),
                         (ChainSpec(30, "ctmc-internal", 0.3, 0.6), SimBudget.time(500.0))]:
        a = run_one(spec, 0, budget, 11, record_trace=True)
        b = run_one(spec, 0, budget, 11, record_trace=True)
        assert a[0] == b[0] and a[1] == b[1]
        c = run_one(spec, 0, budget, 12, record_trace=True)
        assert not a[0] == c[0]


def test_block_size_does_not_change_results(monkeypatch):
    spec = ChainSpec(25, "ctmc-coordinated", 0.5, 0.45)
    budget = SimBudget.time(2000.0)
    ref = run_ctmc(spec, 3, budget, 5)
    monkeypatch.setattr(sim, "_BLOCK", 7)
    monkeypatch.setattr(sim, "_FIRST_BLOCK", 3)
    small = run_ctmc(spec, 3, budget, 5)
    assert ref[0] == small[0] and ref[1] == small[1]
    d = ChainSpec.dtmc(25, 0.3, 0.3)
    monkeypatch.undo()
    ref = run_dtmc(d, 0, SimBudget.steps(10_000), 5)
    monkeypatch.setattr(sim, "_BLOCK", 5)
    monkeypatch.setattr(sim, "_FIRST_BLOCK", 2)
    small = run_dtmc(d, 0, SimBudget.steps(10_000), 5)
    assert ref[0] == small[0] and ref[1] == small[1]


def test_trace_validator_rejects_bad_paths():
    good = sim.RunTrace(0, np.array([1.0, 2.0]), np.array([1, 2]), 3.0)
    check_trace(good, 5)
    bad = [
        sim.RunTrace(0, np.array([1.0, 2.0]), np.array([1, 3]), 3.0),
        sim.RunTrace(0, np.array([1.0, 1.0]), np.array([1, 2]), 3.0),
        sim.RunTrace(0, np.array([1.0, 4.0]), np.array([1, 2]), 3.0),
        sim.RunTrace(0, np.array([1.0]), np.array([-1]), 3.0),
        sim.RunTrace(5, np.array([1.0]), np.array([6]), 3.0),
    ]
    for t in bad:
        with pytest.raises(TraceError):
            check_trace(t, 5)


@st.composite
def run_cases(draw):
    variant = draw(st.sampled_from(list(Variant)))
    n = draw(st.integers(2, 30))
    if variant is Variant.DTMC:
        p = draw(st.floats(0.0, 1.0))
        q = draw(st.floats(0.0, 1.0 - p))
        spec = ChainSpec.dtmc(n, p, q, max(0.0, 1.0 - p - q))
        budget = SimBudget.steps(draw(st.integers(1, 3000)))
    else:
        p = draw(st.floats(0.0, 3.0))
        q = draw(st.floats(0.01, 3.0))
        spec = ChainSpec(n, variant, p, q, seed_rate=draw(st.floats(0.0, 2.0)))
        budget = SimBudget.time(draw(st.floats(0.1, 200.0)))
    start = draw(st.integers(0, n))
    f = draw(st.integers(0, n))
    return spec, start, budget, ThresholdPolicy(f), draw(st.integers(0, 2 ** 32))


@settings(max_examples=150, deadline=None)
@given(run_cases())
def test_run_invariants(case):
    spec, start, budget, policy, seed = case
    trace, stats = run_one(spec, start, budget, seed, policy=policy, record_trace=True)
    check_trace(trace, spec.n)
    assert trace.end_time == pytest.approx(budget.limit)
    occ = stats.occupancy.fractions
    assert len(occ) == spec.n + 1 and np.all(occ >= 0)
    assert abs(occ.sum() - 1.0) < 1e-9
    assert (stats.first_flip_time is not None) == stats.flipped
    assert stats.purely_good + stats.purely_bad + stats.flipped == 1
    good_start = policy.is_good(start)
    assert stats.purely_good == (good_start and not stats.flipped)
    states = np.concatenate(([start], trace.states))
    if not stats.flipped:
        assert np.all(states <= policy.f) if good_start else np.all(states > policy.f)
    else:
        k = int(np.searchsorted(trace.times, stats.first_flip_time))
        assert trace.times[k] == stats.first_flip_time
        assert policy.is_good(int(trace.states[k])) != good_start
        assert all(policy.is_good(int(s)) == good_start for s in states[:k + 1])


def test_singleton_aggregate_matches_run():
    spec = ChainSpec.dtmc(20, 0.5, 0.5)
    budget = SimBudget.steps(2000, runs=1, base_seed=9)
    agg = run_batch(spec, 0, budget)
    _, one = run_dtmc(spec, 0, budget, 9, record_trace=False)
    assert agg.n_runs == 1
    assert agg.n_flipped == int(one.flipped)
    assert agg.mean_first_flip == one.first_flip_time
    assert agg.occupancy == one.occupancy


def test_batch_independent_of_jobs():
    spec = ChainSpec(30, "ctmc-external", 0.5, 0.5)
    budget = SimBudget.time(300.0, runs=24, base_seed=100)
    a = run_batch(spec, 0, budget, jobs=1)
    b = run_batch(spec, 0, budget, jobs=4)
    assert a == b


def test_aggregate_flip_mean_is_conditional():
    spec = ChainSpec.dtmc(30, 0.5, 0.5)
    agg = run_batch(spec, 0, SimBudget.steps(60, runs=200))
    assert 0 < agg.n_flipped < 200
    assert agg.mean_first_flip == pytest.approx(np.mean(agg.flip_times))
    assert agg.percent_flipped == pytest.approx(100 * agg.n_flipped / 200)
    with pytest.raises(ValueError):
        aggregate([])


def test_no_flip_means_no_mean():
    agg = run_batch(ChainSpec.dtmc(30, 1.0, 0.0, 0.0), 0, SimBudget.steps(100, runs=3))
    assert agg.n_purely_good == 3 and agg.mean_first_flip is None and agg.sem_first_flip is None


def test_recovery_bias_stays_good_at_full_scale():
    spec = ChainSpec.dtmc(200, 0.6, 0.4)
    agg = run_batch(spec, 0, SimBudget.steps(1_000_000, runs=20), policy=ThresholdPolicy(66))
    assert agg.percent_purely_good == 100.0


def test_infection_bias_stays_bad_at_full_scale():
    spec = ChainSpec.dtmc(200, 0.4, 0.6)
    agg = run_batch(spec, 200, SimBudget.steps(1_000_000, runs=20), policy=ThresholdPolicy(66))
    assert agg.percent_purely_bad == 100.0


def test_symmetric_walk_flip_times_by_direction():
    spec = ChainSpec.dtmc(200, 0.5, 0.5)
    pol = ThresholdPolicy(66)
    up = run_batch(spec, 0, SimBudget.steps(1_000_000, runs=30), policy=pol)
    down = run_batch(spec, 200, SimBudget.steps(1_000_000, runs=30, base_seed=1000), policy=pol)
    assert up.percent_flipped == 100.0 and down.percent_flipped == 100.0
    assert down.mean_first_flip > up.mean_first_flip
    exact_up = dense_hitting(spec, 67)[0]
    assert abs(up.mean_first_flip - exact_up) < 3 * up.sem_first_flip


ORACLE_CASES = [
    (ChainSpec.dtmc(12, 0.4, 0.35), 0, 7),
    (ChainSpec.dtmc(12, 0.3, 0.3), 12, 4),
    (ChainSpec(15, "ctmc-external", 0.6, 0.5), 0, 9),
    (ChainSpec(20, "ctmc-internal", 0.3, 0.6), 0, 7),
    (ChainSpec(20, "ctmc-internal", 0.5, 0.6), 15, 3),
    (ChainSpec(18, "ctmc-coordinated", 0.5, 0.45), 1, 6),
]


@pytest.mark.slow
@pytest.mark.parametrize("spec,start,target", ORACLE_CASES,
                         ids=[f"{c[0].variant.value}-{c[1]}-{c[2]}" for c in ORACLE_CASES])
def test_monte_carlo_matches_exact_mean(spec, start, target):
    runs = 10_000
    times = first_passage_times(spec, start, target, runs, base_seed=7)
    assert not np.isnan(times).any()
    sem = times.std(ddof=1) / math.sqrt(runs)
    exact = dense_hitting(spec, target)[start]
    assert abs(times.mean() - exact) < 3 * sem


@pytest.mark.slow
@pytest.mark.parametrize("variant,p,q", [
    ("ctmc-external", 0.5, 0.55),
    ("ctmc-internal", 0.3, 0.6),
    ("ctmc-coordinated", 0.55, 0.5),
])
def test_long_run_occupancy_matches_stationary(variant, p, q):
    spec = ChainSpec(20, variant, p, q)
    pi = dense_stationary(spec)
    down, up, _ = spec.rates()
    mean_rate = float(pi @ (down + up))
    budget = SimBudget.time(1e6 / mean_rate, runs=1, base_seed=3)
    _, stats = run_ctmc(spec, 0, budget, 3, record_trace=False)
    assert stats.occupancy.tv_distance(pi) < 0.05


def test_dtmc_occupancy_counts_steps():
    spec = ChainSpec.dtmc(10, 0.3, 0.3)
    _, stats = run_dtmc(spec, 0, SimBudget.steps(400_000), 1, record_trace=False)
    assert stats.occupancy.tv_distance(dense_stationary(spec)) < 0.02


def test_first_passage_reports_misses():
    spec = ChainSpec.dtmc(30, 0.9, 0.1)
    t = first_passage_times(spec, 0, 25, runs=5, max_time=50)
    assert np.isnan(t).all()
    assert np.array_equal(first_passage_times(spec, 3, 3, runs=4), np.zeros(4))
