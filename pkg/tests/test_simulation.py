import math
from collections import OrderedDict

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cachemodel import (PolicySpec, Traffic, TraceError, read_trace, replay_trace, run_replications,
                        run_single_cache, solve_characteristic_time, write_trace, zipf_popularity)
from cachemodel.simulation import CacheState, SimReport, generate_arrivals

IRM = Traffic.irm()


class ReferenceCache:
    """Straightforward re-implementation of the policies, one stage per dict.

    ``u`` plays the same role as in the compiled kernel: q-LRU inserts iff
    ``u < q`` and RANDOM replaces slot ``floor(u * C)`` once full.
    """

    def __init__(self, policy: PolicySpec):
        self.p = policy
        self.stages = [OrderedDict() for _ in range(policy.stages)]
        self.slots = []

    def access(self, m, u):
        p = self.p
        if p.kind == "lfu":
            return m < p.capacity
        if p.kind == "random":
            if m in self.slots:
                return True
            if len(self.slots) < p.capacity:
                self.slots.append(m)
            else:
                self.slots[int(u * p.capacity)] = m
            return False
        admit_prev = True
        hit = False
        for stage in self.stages:
            present = m in stage
            if present:
                if p.kind != "fifo":
                    stage.move_to_end(m)
            elif admit_prev and (p.kind != "qlru" or u < p.q):
                if len(stage) >= p.capacity:
                    stage.popitem(last=False)
                stage[m] = True
            admit_prev = present
            hit = present
        return hit


# -- single accesses ---------------------------------------------------------

def test_lru_single_slot_trace():
    cache = CacheState(PolicySpec.lru(1), 2)
    assert [cache.access(m) for m in (0, 1, 0)] == [False, False, False]


def test_fifo_two_slot_trace():
    cache = CacheState(PolicySpec.fifo(2), 3)
    assert [cache.access(m) for m in (0, 1, 0, 2, 1)] == [False, False, True, False, True]


@pytest.mark.parametrize("policy", ["lru", "fifo", "random", "qlru(0.3)", "2lru", "3lru", "lfu"])
@given(data=st.data())
def test_kernel_matches_reference(policy, data):
    M = data.draw(st.integers(min_value=1, max_value=12))
    C = data.draw(st.integers(min_value=1, max_value=max(1, M - 1)))
    seq = data.draw(st.lists(st.tuples(st.integers(0, M - 1), st.floats(0, 1, exclude_max=True)), max_size=80))
    spec = PolicySpec.parse(policy, C)
    fast, ref = CacheState(spec, M), ReferenceCache(spec)
    for m, u in seq:
        assert fast.access(m, 0.0, u) == ref.access(m, u)
    if spec.kind not in ("random", "lfu"):
        assert fast.recency() == list(reversed(ref.stages[-1])) or spec.kind == "fifo"
        assert fast.contents() == set(ref.stages[-1])


# -- full runs ---------------------------------------------------------------

@pytest.mark.parametrize("policy", ["lru", "fifo", "random", "2lru"])
def test_cache_holding_catalog_always_hits(policy):
    pop = zipf_popularity(0.5, 40)
    rep = run_single_cache(PolicySpec.parse(policy, 40), IRM, pop, None, 50_000, warmup_fraction=0.5, seed=1)
    assert rep.aggregate_hit == 1.0


def test_single_object_hits_after_first():
    n = 1000
    pop = zipf_popularity(0.0, 1)
    rep = run_single_cache(PolicySpec.lru(1), IRM, pop, None, n, warmup_fraction=0.0, seed=3)
    assert rep.aggregate_hit == pytest.approx((n - 1) / n, abs=1e-15)


def test_lru_matches_analytic():
    pop = zipf_popularity(0.8, 10**4)
    spec = PolicySpec.lru(100)
    rep = run_single_cache(spec, IRM, pop, None, int(round(1e7 / 0.75)), seed=11)
    assert rep.n_requests == 10**7
    assert abs(rep.aggregate_hit - solve_characteristic_time(spec, IRM, pop).aggregate_hit) <= 0.005


@pytest.mark.parametrize("traffic", [IRM, Traffic.hyperexp(10)])
def test_identical_seeds_identical_reports(traffic):
    pop = zipf_popularity(0.8, 2000)
    a = run_single_cache(PolicySpec.parse("qlru(0.2)", 50), traffic, pop, None, 100_000, seed=42)
    b = run_single_cache(PolicySpec.parse("qlru(0.2)", 50), traffic, pop, None, 100_000, seed=42)
    for name in ("batch_requests", "batch_hits", "batch_occupancy", "batch_duration", "stage_hits", "eviction_age"):
        assert np.array_equal(getattr(a, name), getattr(b, name), equal_nan=True)
    c = run_single_cache(PolicySpec.parse("qlru(0.2)", 50), traffic, pop, None, 100_000, seed=43)
    assert not np.array_equal(a.batch_hits, c.batch_hits)


def test_replications_pool_batches():
    pop = zipf_popularity(0.8, 2000)
    spec = PolicySpec.lru(50)
    pooled = run_replications(spec, IRM, pop, 40_000, [1, 2, 3], threads=2)
    single = [run_single_cache(spec, IRM, pop, None, 40_000, seed=s) for s in (1, 2, 3)]
    assert pooled.replications == 3 and pooled.n_batches == 60
    assert pooled.n_requests == sum(r.n_requests for r in single)
    assert np.array_equal(pooled.hits, sum(r.hits for r in single))


def test_hyperexp_stream_keeps_per_object_rates():
    pop = zipf_popularity(0.8, 100)
    times, objs = generate_arrivals(Traffic.hyperexp(10), pop, 400_000, seed=8)
    assert np.all(np.diff(times) >= 0)
    gaps = np.diff(times[objs == 0])
    mean = 1.0 / pop.probabilities[0]
    assert abs(gaps.mean() / mean - 1) < 0.05
    assert gaps.var() / gaps.mean() ** 2 > 1.5


# -- statistical invariants -------------------------------------------------

def test_irm_occupancy_matches_hit_ratio():
    # enough traffic that every object collects dozens of hits; with a handful
    # of hits per batch the count distribution is too discrete for a 3-SE band
    pop = zipf_popularity(0.8, 1000)
    rep = run_replications(PolicySpec.lru(100), IRM, pop, 2_000_000, [21, 22, 23, 24, 25])
    diff, se = rep.hit_minus_occupancy()
    ok = np.abs(diff) <= 3 * se
    assert ok[rep.requests > 0].mean() >= 0.99


def test_fifo_random_agree_in_simulation():
    pop = zipf_popularity(0.8, 10**4)
    f = run_replications(PolicySpec.fifo(200), IRM, pop, 2_000_000, [1, 2])
    r = run_replications(PolicySpec.random(200), IRM, pop, 2_000_000, [3, 4])
    pooled = math.hypot(f.aggregate_se(), r.aggregate_se())
    assert abs(f.aggregate_hit - r.aggregate_hit) <= 3 * pooled


def test_lru_hit_non_decreasing_in_capacity():
    pop = zipf_popularity(0.8, 5000)
    reps = [run_replications(PolicySpec.lru(C), IRM, pop, 400_000, [5, 6, 7]) for C in (10, 40, 160, 640)]
    for a, b in zip(reps, reps[1:]):
        assert b.aggregate_hit >= a.aggregate_hit - b.aggregate_se()


def test_klru_meta_stage_behaves_like_lru():
    pop = zipf_popularity(0.8, 10**4)
    rep = run_single_cache(PolicySpec.klru(100, 3), IRM, pop, None, 2_000_000, seed=9)
    lru = solve_characteristic_time(PolicySpec.lru(100), IRM, pop).aggregate_hit
    assert abs(rep.stage_hit_ratio[0] - lru) <= 0.01


def test_klru_eviction_ages_grow_with_stage():
    pop = zipf_popularity(0.8, 10**4)
    rep = run_single_cache(PolicySpec.klru(100, 4), IRM, pop, None, 2_000_000, seed=10)
    assert np.all(np.diff(rep.eviction_age) >= 0)


# -- traces ------------------------------------------------------------------

def test_empty_trace():
    rep = replay_trace(PolicySpec.lru(2), None, [])
    assert rep.n_requests == 0


def test_repeated_object_trace():
    n = 257
    rep = replay_trace(PolicySpec.lru(1), None, [(float(i), "x") for i in range(n)])
    assert rep.aggregate_hit == pytest.approx((n - 1) / n, abs=1e-15)


def test_trace_round_trip_reproduces_run(tmp_path):
    pop = zipf_popularity(0.8, 500)
    n = 60_000
    run = run_single_cache(PolicySpec.lru(20), IRM, pop, None, n, warmup_fraction=0.25, seed=4)
    times, objs = generate_arrivals(IRM, pop, n, seed=4)
    path = tmp_path / "trace.tsv"
    write_trace(path, times, objs)
    rep = replay_trace(PolicySpec.lru(20), None, path, warmup_fraction=0.25)
    assert rep.n_requests == run.n_requests
    assert int(rep.hits.sum()) == int(run.hits.sum())


def test_trace_errors_report_line(tmp_path):
    bad = tmp_path / "bad.tsv"
    bad.write_text("# header\n0.0\ta\n1.0\tb\n0.5\ta\n")
    with pytest.raises(TraceError) as err:
        read_trace(bad)
    assert err.value.line == 4
    bad.write_text("0.0 a\n")
    with pytest.raises(TraceError) as err:
        read_trace(bad)
    assert err.value.line == 1
    bad.write_text("zero\ta\n")
    with pytest.raises(TraceError):
        read_trace(bad)


def test_trace_lfu_uses_whole_trace_frequencies():
    trace = [(float(i), k) for i, k in enumerate("abcbcbcb")]
    rep = replay_trace(PolicySpec.lfu(1), None, trace)
    assert rep.labels[0] == "b"
    assert int(rep.hits.sum()) == 4


def test_merge_requires_reports():
    with pytest.raises(ValueError):
        SimReport.merge([])


@pytest.mark.parametrize("traffic, order", [
    (IRM, ["lfu", "2lru", "qlru(0.05)", "lru", "random"]),
    # under strong locality static LFU loses to the adaptive policies
    (Traffic.hyperexp(10), ["2lru", "lru", "lfu", "qlru(0.05)"]),
])
def test_synthetic_trace_policy_ranking(tmp_path, traffic, order):
    times, objs = generate_arrivals(traffic, zipf_popularity(0.8, 5000), 600_000, seed=3)
    path = tmp_path / "synthetic.tsv"
    write_trace(path, times, objs)
    hits = [replay_trace(PolicySpec.parse(p, 100), None, path, warmup_fraction=0.25, seed=1).aggregate_hit
            for p in order]
    assert hits == sorted(hits, reverse=True)
