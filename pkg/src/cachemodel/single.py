"""Characteristic-time (Che) model of a single cache.

Every object sees the same eviction time ``T``; given ``T`` each object is
an independent scalar problem and ``T`` itself follows from the capacity
constraint ``sum_m p_in(m) = C``.

Time is measured in units of the aggregate mean inter-request time when
``Traffic.total_rate == 1``; only the products ``lambda_m * T`` matter.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ._solve import ConvergenceError, UnsupportedCombination, solve_capacity
from .policies import PolicySpec
from .traffic import PopularityModel, RequestProcess, Traffic

__all__ = [
    "CharacteristicTimes",
    "SingleCacheSolution",
    "occupancy",
    "hit_probability",
    "stage_probabilities",
    "solve_characteristic_time",
    "aggregate_hit",
    "small_cache_hit",
    "two_lru_hit",
    "two_lru_cycle_length",
    "ConvergenceError",
    "UnsupportedCombination",
]


@dataclass(frozen=True)
class CharacteristicTimes:
    """Eviction times, one per stage.

    ``interpretation`` is ``"deterministic"`` for LRU-like policies and
    ``"mean-of-exponential"`` for RANDOM, whose sojourn time is modelled as
    exponential with the stored mean.
    """

    values: tuple
    interpretation: str = "deterministic"

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        if any(not (math.isfinite(v) and v > 0) for v in vals):
            raise ValueError(f"characteristic times must be finite and > 0: {vals}")
        if self.interpretation not in ("deterministic", "mean-of-exponential"):
            raise ValueError(f"unknown interpretation {self.interpretation!r}")
        object.__setattr__(self, "values", vals)

    def __len__(self):
        return len(self.values)

    def __getitem__(self, i):
        return self.values[i]

    @property
    def last(self) -> float:
        return self.values[-1]


@dataclass(frozen=True, eq=False)
class SingleCacheSolution:
    policy: PolicySpec
    traffic: Traffic
    times: CharacteristicTimes
    p_in: np.ndarray
    p_hit: np.ndarray
    aggregate_hit: float
    iterations: int = 0
    residual: float = 0.0
    stage_hit: list = field(default_factory=list)

    @property
    def T(self) -> float:
        return self.times.last if len(self.times) else float("inf")


def _one_minus_exp(x):
    return -np.expm1(-x)


def _qlru(q, hit_cdf, age_cdf=None):
    """q-LRU per-object probabilities given ``F(T)`` (and ``F_hat(T)``)."""
    denom = 1.0 - (1.0 - q) * hit_cdf
    p_hit = q * hit_cdf / denom
    if age_cdf is None:
        return p_hit, p_hit
    return p_hit, age_cdf * q / denom


def two_lru_hit(q_a, q_b, q_out=None):
    """Hit probability of the object cache of 2-LRU.

    ``q_a`` is the probability that an inter-request time is below the
    meta-cache eviction time, ``q_b`` that it exceeds the object-cache
    eviction time.  ``q_out`` is the probability it exceeds the larger of
    the two (defaults to ``q_b``, i.e. meta-cache time not larger).
    Returns ``(p_hit, pi_11)`` where ``pi_11`` is the probability that the
    object sits in both caches right after a request.
    """
    q_a = np.asarray(q_a, dtype=float)
    q_b = np.asarray(q_b, dtype=float)
    q_out = q_b if q_out is None else np.asarray(q_out, dtype=float)
    denom = q_a + q_out
    with np.errstate(invalid="ignore", divide="ignore"):
        pi11 = np.where(denom > 0, q_a / np.where(denom > 0, denom, 1.0), 1.0)
    return pi11 * (1.0 - q_b), pi11


def stage_probabilities(policy: PolicySpec, times, proc: RequestProcess):
    """Per-stage ``(p_hit, p_in)`` arrays for the given eviction times.

    Single-stage policies return a one-element list.  ``proc.rate`` holds the
    per-object rates; LFU uses the position in that vector as the rank.
    """
    vals = times.values if isinstance(times, CharacteristicTimes) else tuple(times)
    rate = np.asarray(proc.rate, dtype=float)
    kind = policy.kind
    poisson = proc.is_poisson

    if kind == "lfu":
        ind = (np.arange(rate.size) < policy.capacity).astype(float).reshape(rate.shape)
        return [(ind, ind)]
    if len(vals) != policy.stages:
        raise ValueError(f"{policy.label} needs {policy.stages} time(s), got {len(vals)}")

    if kind in ("lru", "qlru") or (kind == "klru" and policy.k == 1):
        T = vals[0]
        hit_cdf = proc.cdf(T)
        age = None if poisson else proc.age_cdf(T)
        if kind == "qlru" and policy.q < 1:
            return [_qlru(policy.q, hit_cdf, age)]
        return [(hit_cdf, hit_cdf if poisson else age)]

    if kind == "fifo":
        if not poisson:
            raise UnsupportedCombination("FIFO under renewal traffic has no model")
        x = rate * vals[0]
        p = x / (1.0 + x)
        return [(p, p)]

    if kind == "random":
        ET = vals[0]
        if poisson:
            x = rate * ET
            p = x / (1.0 + x)
            return [(p, p)]
        m = proc.mgf(-1.0 / ET)
        return [(m, rate * ET * (1.0 - m))]

    # k-LRU, k >= 2
    stages = []
    T1 = vals[0]
    h1 = proc.cdf(T1)
    stages.append((h1, h1 if poisson else proc.age_cdf(T1)))
    if policy.k == 2 and policy.refined:
        T2 = vals[1]
        p_hit, pi11 = two_lru_hit(h1, proc.survival(T2), proc.survival(max(T1, T2)))
        p_in = p_hit if poisson else pi11 * proc.age_cdf(T2)
        stages.append((p_hit, p_in))
        return stages
    prev = h1
    for T in vals[1:]:
        F = proc.cdf(T)
        p_hit = F * prev / (1.0 - F + F * prev)
        gate = p_hit + prev * (1.0 - p_hit)
        p_in = p_hit if poisson else proc.age_cdf(T) * gate
        stages.append((p_hit, p_in))
        prev = p_hit
    return stages


def occupancy(policy: PolicySpec, times, proc: RequestProcess):
    """Time-average probability that each object is in the (object) cache."""
    return stage_probabilities(policy, times, proc)[-1][1]


def hit_probability(policy: PolicySpec, times, proc: RequestProcess):
    """Probability that a request for each object finds it in the cache."""
    return stage_probabilities(policy, times, proc)[-1][0]


def aggregate_hit(popularity, p_hit) -> float:
    """Popularity-weighted mean hit probability."""
    p = popularity.probabilities if isinstance(popularity, PopularityModel) else np.asarray(popularity)
    h = np.asarray(p_hit, dtype=float)
    if p.shape != h.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {h.shape}")
    return math.fsum(p * h)


def _partial_policy(policy: PolicySpec, n_stages: int) -> PolicySpec:
    if policy.kind != "klru" or n_stages == policy.k:
        return policy
    if n_stages == 1:
        return PolicySpec.lru(policy.capacity)
    return PolicySpec.klru(policy.capacity, n_stages, refined=policy.refined and policy.k == 2)


def solve_characteristic_time(policy: PolicySpec, traffic: Traffic, popularity: PopularityModel,
                              *, tol: float = 1e-6, max_iter: int = 500) -> SingleCacheSolution:
    """Solve the capacity constraint for every stage and return per-object results.

    Stages of k-LRU are solved in order: the hit probabilities of stage
    ``i-1`` feed stage ``i`` and nothing downstream feeds back.
    """
    C = policy.capacity
    M = popularity.M
    if C >= M:
        raise ValueError(f"capacity {C} must be smaller than the catalog ({M})")
    rates = traffic.rates(popularity)
    live = rates > 0
    n_live = int(live.sum())
    if C >= n_live:
        raise ValueError(f"capacity {C} reaches the number of requested objects ({n_live})")
    proc = traffic.process(rates[live])

    def expand(x):
        out = np.zeros(M)
        out[live] = x
        return out

    if policy.kind == "lfu":
        (h, _), = stage_probabilities(policy, (), traffic.process(np.where(live, rates, 1.0)))
        h = h * live
        return SingleCacheSolution(policy, traffic, CharacteristicTimes(()), h, h,
                                   aggregate_hit(popularity, h), 0, 0.0, [h])

    interp = "mean-of-exponential" if policy.kind == "random" else "deterministic"
    times: list[float] = []
    evals = 0
    worst = 0.0
    guess = C / traffic.total_rate
    for stage in range(policy.stages):
        partial = _partial_policy(policy, stage + 1)

        def occ_sum(T, partial=partial):
            return math.fsum(stage_probabilities(partial, times + [T], proc)[-1][1])

        T, res, n = solve_capacity(occ_sum, C, tol=tol, guess=guess, max_iter=max_iter)
        times.append(T)
        guess = T
        evals += n
        worst = max(worst, res)

    ct = CharacteristicTimes(tuple(times), interp)
    stages = stage_probabilities(policy, ct, proc)
    p_hit, p_in = expand(stages[-1][0]), expand(stages[-1][1])
    return SingleCacheSolution(policy, traffic, ct, p_in, p_hit, aggregate_hit(popularity, p_hit),
                               evals, worst, [expand(s[0]) for s in stages])


def small_cache_hit(policy: PolicySpec, x):
    """Truncated Taylor expansion of the hit probability in ``x = lambda_m * T``.

    Rows: LRU ``x - x^2/2``; RANDOM/FIFO ``x - x^2``; q-LRU
    ``q x + q (1-q) x^2``; k-LRU ``x^k``.
    """
    x = np.asarray(x, dtype=float)
    kind = policy.kind
    if kind == "lru" or (kind == "klru" and policy.k == 1):
        return x - x * x / 2
    if kind in ("random", "fifo"):
        return x - x * x
    if kind == "qlru":
        q = policy.q
        return q * x + q * (1 - q) * x * x
    if kind == "klru":
        return x ** policy.k
    raise ValueError(f"no small-cache expansion for {policy.label}")


def two_lru_cycle_length(rate, T1, T2, traffic: Traffic | RequestProcess | None = None,
                         *, reading: str = "corrected"):
    """Mean time between two requests that leave 2-LRU in state (1,1).

    The cycle splits on the first inter-request time ``R``: ``R <= T1`` and
    ``T1 < R <= T2`` close the cycle at once; ``R > T2`` empties both caches
    and a geometric number of further requests (success probability
    ``p1 = P(R <= T1)``) follows.  De-conditioning gives
    ``E[R] + E[R] * P(R > T2) / p1`` (``reading="corrected"``).
    ``reading="as_printed"`` returns ``E[R] + E[R] * (1 - p1) / p1``.
    """
    if not T2 >= T1 > 0:
        raise ValueError("need T2 >= T1 > 0")
    if isinstance(traffic, RequestProcess):
        proc = traffic
    else:
        proc = (traffic or Traffic.irm()).process(rate)
    mean = 1.0 / np.asarray(proc.rate, dtype=float)
    p1 = proc.cdf(T1)
    if reading == "corrected":
        tail = proc.survival(T2)
    elif reading == "as_printed":
        tail = 1.0 - p1
    else:
        raise ValueError(f"unknown reading {reading!r}")
    return mean + mean * tail / p1
