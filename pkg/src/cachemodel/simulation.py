"""Discrete-event simulation of a single cache (or a k-LRU stage chain).

Requests are generated as independent per-object renewal streams merged in
time order, fed through a policy kernel, and summarised with batch means.
Per-object occupancy is the exact time-integrated residency of the
object-storing stage, so it stays unbiased under renewal traffic where
request-time sampling (PASTA) does not apply.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import _kernels as K
from .policies import PolicySpec
from .traffic import PopularityModel, Traffic

__all__ = [
    "CacheState",
    "SimReport",
    "ArrivalStream",
    "run_single_cache",
    "run_replications",
    "replay_trace",
    "generate_arrivals",
    "read_trace",
    "write_trace",
    "TraceError",
    "DEFAULT_WARMUP",
    "DEFAULT_BATCHES",
]

DEFAULT_WARMUP = 0.25
DEFAULT_BATCHES = 20
DEFAULT_MAX_CATALOG = 5_000_000
_CHUNK = 1 << 20


class TraceError(ValueError):
    """Malformed or out-of-order trace record."""

    def __init__(self, message, line=None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


def _streams(seed):
    """Independent generators for arrivals, policy coins and network routing."""
    ss = np.random.SeedSequence(seed)
    return [np.random.Generator(np.random.PCG64(s)) for s in ss.spawn(3)]


class ArrivalStream:
    """Superposition of per-object renewal streams, produced in chunks.

    IRM streams are drawn as a Poisson process of rate ``sum lambda_m``
    with alias-sampled object labels (equal in law to merging the
    per-object Poisson streams).  Hyperexponential streams keep one pending
    arrival per object in a binary heap; each clock starts from the
    stationary residual-life law so the stream is stationary from time 0.
    """

    def __init__(self, traffic: Traffic, popularity: PopularityModel, rng: np.random.Generator):
        self.rng = rng
        self.poisson = traffic.is_poisson
        rates = traffic.rates(popularity)
        self.t = 0.0
        if self.poisson:
            self.total_rate = float(rates.sum())
            self.prob, self.alias = K.build_alias(popularity.probabilities.copy())
            return
        z = traffic.z
        self.fast = rates * z
        self.slow = rates / z
        self.pfast = z / (1.0 + z)
        live = np.flatnonzero(rates > 0)
        e = rng.standard_exponential(live.size)
        fast = rng.random(live.size) < 1.0 / (1.0 + z)
        t0 = e / np.where(fast, self.fast[live], self.slow[live])
        order = np.argsort(t0, kind="stable")
        # a sorted array is a valid binary min-heap
        self.heap_t = np.ascontiguousarray(t0[order])
        self.heap_m = np.ascontiguousarray(live[order].astype(np.int64))

    def next(self, n: int):
        """Return ``(times, objects)`` of the next ``n`` requests."""
        if self.poisson:
            gaps = self.rng.standard_exponential(n) / self.total_rate
            times = self.t + np.cumsum(gaps)
            objs = np.empty(n, np.int64)
            K.alias_sample(self.prob, self.alias, self.rng.random(n), objs)
        else:
            times = np.empty(n)
            objs = np.empty(n, np.int64)
            K.renewal_chunk(self.heap_t, self.heap_m, self.fast, self.slow, self.pfast,
                            self.rng.random(n), self.rng.standard_exponential(n), times, objs)
        if n:
            self.t = float(times[-1])
        return times, objs


def generate_arrivals(traffic: Traffic, popularity: PopularityModel, n_requests: int, seed=0):
    """The request stream ``run_single_cache`` would see for ``seed``."""
    stream = ArrivalStream(traffic, popularity, _streams(seed)[0])
    return stream.next(int(n_requests))


class CacheState:
    """Mutable state of one cache running ``policy`` over objects ``0..M-1``.

    For k-LRU the first ``k-1`` stages hold identifiers only; stage ``k``
    holds the objects.  LFU holds the ``C`` lowest indices (the most
    popular objects of a sorted catalog) and never changes.
    """

    def __init__(self, policy: PolicySpec, M: int, seed=0, *, rng=None):
        self.policy = policy
        self.M = int(M)
        self.kind = K.KIND_CODES[policy.kind]
        self.k = policy.stages
        self.C = policy.capacity
        k, M = self.k, self.M
        self.inc = np.zeros((k, M), np.int8)
        self.nxt = np.full((k, M), -1, np.int32)
        self.prv = np.full((k, M), -1, np.int32)
        self.head = np.full(k, -1, np.int64)
        self.tail = np.full(k, -1, np.int64)
        self.size = np.zeros(k, np.int64)
        self.slots = np.full(self.C if policy.kind == "random" else 1, -1, np.int32)
        self.pos = np.full(M if policy.kind == "random" else 1, -1, np.int32)
        self.last = np.zeros((k, M))
        self.stage_hit = np.zeros(k, np.int64)
        self.ev_sum = np.zeros(k)
        self.ev_cnt = np.zeros(k, np.int64)
        if policy.kind == "lfu":
            self.inc[0, :min(self.C, M)] = 1
            self.size[0] = min(self.C, M)
        self.rng = rng if rng is not None else _streams(seed)[1]

    def access(self, m: int, t: float = 0.0, u: float | None = None) -> bool:
        """Serve one request for object ``m``; return True on a hit."""
        if not 0 <= m < self.M:
            raise IndexError(f"object {m} outside catalog of {self.M}")
        if u is None:
            u = self.rng.random()
        hit, _, _ = K.access(self.kind, self.C, self.policy.q, self.k, self.inc, self.nxt, self.prv,
                             self.head, self.tail, self.size, self.slots, self.pos, self.last,
                             int(m), float(t), float(u), False, self.stage_hit, self.ev_sum, self.ev_cnt)
        return bool(hit)

    def contents(self, stage: int = -1) -> set:
        """Identifiers resident in ``stage`` (default: the object stage)."""
        return set(np.flatnonzero(self.inc[stage]).tolist())

    def recency(self, stage: int = -1) -> list:
        """Stage contents from most to least recently used (LRU-type policies)."""
        s = stage % self.k
        out = []
        node = self.head[s]
        while node >= 0:
            out.append(int(node))
            node = self.nxt[s, node]
        return out

    def __len__(self):
        return int(self.inc[-1].sum())


@dataclass(frozen=True, eq=False)
class SimReport:
    """Post-warmup statistics of one or more pooled simulation runs.

    Batch arrays have one row per batch; pooling replications stacks rows.
    ``batch_occupancy[b, m]`` is the time object ``m`` spent cached during
    batch ``b`` and ``batch_duration[b]`` the batch length in time units.
    """

    policy: PolicySpec | None
    batch_requests: np.ndarray
    batch_hits: np.ndarray
    batch_occupancy: np.ndarray
    batch_duration: np.ndarray
    warmup: int
    seed: object
    stage_hits: np.ndarray = field(default_factory=lambda: np.zeros(1, np.int64))
    eviction_age: np.ndarray = field(default_factory=lambda: np.zeros(1))
    labels: tuple | None = None
    replications: int = 1

    @property
    def requests(self) -> np.ndarray:
        return self.batch_requests.sum(axis=0, dtype=np.int64)

    @property
    def hits(self) -> np.ndarray:
        return self.batch_hits.sum(axis=0, dtype=np.int64)

    @property
    def n_requests(self) -> int:
        return int(self.batch_requests.sum(dtype=np.int64))

    @property
    def n_batches(self) -> int:
        return self.batch_requests.shape[0]

    @property
    def aggregate_hit(self) -> float:
        n = self.n_requests
        return float(self.batch_hits.sum(dtype=np.int64)) / n if n else float("nan")

    @property
    def hit_ratio(self) -> np.ndarray:
        """Per-object hit ratio (NaN for objects never requested)."""
        req = self.requests
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(req > 0, self.hits / np.maximum(req, 1), np.nan)

    @property
    def occupancy(self) -> np.ndarray:
        """Per-object fraction of time spent in the cache."""
        total = self.batch_duration.sum()
        if total <= 0:
            return np.zeros(self.batch_occupancy.shape[1])
        return self.batch_occupancy.sum(axis=0) / total

    @property
    def stage_hit_ratio(self) -> np.ndarray:
        """Fraction of requests that found the object in each stage."""
        n = self.n_requests
        return self.stage_hits / n if n else np.full(self.stage_hits.shape, np.nan)

    def _t(self):
        B = self.n_batches
        return stats.t.ppf(0.975, B - 1) if B > 1 else float("inf")

    def aggregate_se(self) -> float:
        """Batch-means standard error of the aggregate hit ratio."""
        B = self.n_batches
        if B < 2:
            return float("inf")
        n_b = self.batch_requests.sum(axis=1, dtype=np.int64).astype(float)
        h_b = self.batch_hits.sum(axis=1, dtype=np.int64).astype(float)
        r = h_b.sum() / n_b.sum()
        resid = (h_b - r * n_b) / n_b.mean()
        return float(math.sqrt((resid ** 2).sum() / (B * (B - 1))))

    @property
    def hit_ci(self) -> float:
        """95% confidence half-width of the aggregate hit ratio."""
        return float(self._t() * self.aggregate_se())

    def hit_se(self) -> np.ndarray:
        """Per-object batch-means standard error of the hit ratio."""
        return self._ratio_se(self.batch_hits.astype(float), self.batch_requests.astype(float))

    def occupancy_se(self) -> np.ndarray:
        dur = self.batch_duration[:, None]
        return self._ratio_se(self.batch_occupancy, np.broadcast_to(dur, self.batch_occupancy.shape))

    def _ratio_se(self, num, den):
        B = self.n_batches
        if B < 2:
            return np.full(num.shape[1], np.inf)
        tot = den.sum(axis=0)
        with np.errstate(invalid="ignore", divide="ignore"):
            r = num.sum(axis=0) / tot
            resid = (num - r * den) / (tot / B)
            return np.sqrt((resid ** 2).sum(axis=0) / (B * (B - 1)))

    def hit_minus_occupancy(self):
        """Per-object ``hit_ratio - occupancy`` and its paired batch-means SE."""
        B = self.n_batches
        req = self.batch_requests.astype(float)
        hits = self.batch_hits.astype(float)
        dur = self.batch_duration
        with np.errstate(invalid="ignore", divide="ignore"):
            r = hits.sum(axis=0) / req.sum(axis=0)
            o = self.batch_occupancy.sum(axis=0) / dur.sum()
            resid = (hits - r * req) / (req.sum(axis=0) / B) \
                - (self.batch_occupancy - o * dur[:, None]) / (dur.sum() / B)
            se = np.sqrt((resid ** 2).sum(axis=0) / (B * (B - 1))) if B > 1 else np.full(r.shape, np.inf)
        return r - o, se

    @classmethod
    def merge(cls, reports) -> "SimReport":
        """Pool independent replications by stacking their batches."""
        reports = list(reports)
        if not reports:
            raise ValueError("nothing to merge")
        first = reports[0]
        return cls(
            first.policy,
            np.concatenate([r.batch_requests for r in reports]),
            np.concatenate([r.batch_hits for r in reports]),
            np.concatenate([r.batch_occupancy for r in reports]),
            np.concatenate([r.batch_duration for r in reports]),
            sum(r.warmup for r in reports),
            tuple(r.seed for r in reports),
            sum(r.stage_hits for r in reports),
            np.mean([r.eviction_age for r in reports], axis=0),
            first.labels,
            sum(r.replications for r in reports),
        )


def _simulate(policy: PolicySpec, M: int, chunks, n_total: int, warmup_fraction: float,
              batches: int, policy_rng, seed, labels=None) -> SimReport:
    """Drive the policy kernel over ``chunks`` of ``(times, objects)``."""
    if not 0 <= warmup_fraction < 1:
        raise ValueError("warmup fraction must lie in [0, 1)")
    n_warm = int(math.floor(warmup_fraction * n_total))
    n_meas = n_total - n_warm
    nb = min(batches, n_meas)
    state = CacheState(policy, M, rng=policy_rng)
    mark = np.zeros(M)
    b_req = np.zeros((nb, M), np.int32)
    b_hit = np.zeros((nb, M), np.int32)
    b_occ = np.zeros((nb, M))
    b_start = np.zeros(nb + 1)
    cur = np.array([-1], np.int64)
    start = 0
    t_end = 0.0
    for times, objs in chunks:
        n = objs.size
        if n == 0:
            continue
        us = policy_rng.random(n)
        K.run_chunk(state.kind, state.C, policy.q, state.k, state.inc, state.nxt, state.prv, state.head,
                    state.tail, state.size, state.slots, state.pos, state.last, mark, objs, times, us,
                    start, n_warm, n_total, b_req, b_hit, b_occ, b_start, state.stage_hit,
                    state.ev_sum, state.ev_cnt, cur)
        start += n
        t_end = float(times[-1])
    if start != n_total:
        raise RuntimeError(f"stream produced {start} of {n_total} requests")
    if nb:
        K._close_batch(state.inc, state.k - 1, mark, b_occ, cur[0], t_end)
        b_start[nb] = t_end
    with np.errstate(invalid="ignore", divide="ignore"):
        age = np.where(state.ev_cnt > 0, state.ev_sum / np.maximum(state.ev_cnt, 1), np.nan)
    return SimReport(policy, b_req, b_hit, b_occ, np.diff(b_start), n_warm, seed,
                     state.stage_hit.copy(), age, labels)


def _check_catalog(M, policy, max_catalog):
    if M > max_catalog:
        raise MemoryError(f"catalog of {M} objects exceeds the configured bound {max_catalog}")


def run_single_cache(policy: PolicySpec, traffic: Traffic, popularity: PopularityModel, C: int | None = None,
                     n_requests: int = 10**6, warmup_fraction: float = DEFAULT_WARMUP, seed=0, *,
                     batches: int = DEFAULT_BATCHES, max_catalog: int = DEFAULT_MAX_CATALOG) -> SimReport:
    """Simulate one cache fed by ``n_requests`` requests (warmup included).

    The first ``floor(warmup_fraction * n_requests)`` requests only warm
    the cache.  Identical arguments give bit-identical reports.
    """
    if C is not None:
        policy = policy.with_capacity(C)
    n_requests = int(n_requests)
    if n_requests <= 0:
        raise ValueError("n_requests must be positive")
    M = popularity.M
    _check_catalog(M, policy, max_catalog)
    arr_rng, pol_rng, _ = _streams(seed)
    stream = ArrivalStream(traffic, popularity, arr_rng)

    def chunks():
        left = n_requests
        while left:
            n = min(left, _CHUNK)
            left -= n
            yield stream.next(n)

    return _simulate(policy, M, chunks(), n_requests, warmup_fraction, batches, pol_rng, seed)


def run_replications(policy: PolicySpec, traffic: Traffic, popularity: PopularityModel, n_requests: int,
                     seeds, *, warmup_fraction: float = DEFAULT_WARMUP, threads: int | None = None,
                     **kwargs) -> SimReport:
    """Independent runs with distinct seeds, pooled into one report."""
    seeds = list(seeds)
    threads = threads or min(len(seeds), os.cpu_count() or 1)

    def one(s):
        return run_single_cache(policy, traffic, popularity, None, n_requests, warmup_fraction, s, **kwargs)

    if threads <= 1:
        return SimReport.merge(one(s) for s in seeds)
    with ThreadPoolExecutor(threads) as pool:
        return SimReport.merge(list(pool.map(one, seeds)))


def read_trace(path):
    """Parse ``timestamp<TAB>object_id`` lines; ``#`` lines and blanks are skipped.

    Returns ``(times, object_ids)`` with ids as strings.  Raises
    :class:`TraceError` with the offending line number.
    """
    times, ids = [], []
    prev = -math.inf
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\r\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[1].strip():
                raise TraceError("expected 'timestamp<TAB>object_id'", lineno)
            try:
                t = float(parts[0])
            except ValueError:
                raise TraceError(f"bad timestamp {parts[0]!r}", lineno) from None
            if not math.isfinite(t) or t < 0:
                raise TraceError(f"timestamp must be a non-negative number, got {parts[0]!r}", lineno)
            if t < prev:
                raise TraceError("timestamps decrease", lineno)
            prev = t
            times.append(t)
            ids.append(parts[1].strip())
    return times, ids


def write_trace(path, times, objects):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# timestamp\tobject_id\n")
        for t, m in zip(times, objects):
            fh.write(f"{float(t)!r}\t{m}\n")


def replay_trace(policy: PolicySpec, C: int | None, trace, *, warmup_fraction: float = 0.0, seed=0,
                 batches: int = DEFAULT_BATCHES) -> SimReport:
    """Feed recorded ``(timestamp, object_id)`` pairs through a cache.

    ``trace`` is a path or a sequence of pairs.  Object ids are opaque;
    they are numbered by first appearance and reported in ``labels``.
    LFU caches the ``C`` most frequent ids of the whole trace.
    """
    if C is not None:
        policy = policy.with_capacity(C)
    if isinstance(trace, (str, os.PathLike)):
        times, ids = read_trace(trace)
    else:
        pairs = list(trace)
        times = [float(p[0]) for p in pairs]
        ids = [p[1] for p in pairs]
        for i in range(1, len(times)):
            if times[i] < times[i - 1]:
                raise TraceError("timestamps decrease", i + 1)
    labels, codes = np.unique(np.asarray(ids, dtype=object).astype(str), return_inverse=True) \
        if ids else (np.array([], dtype=str), np.array([], np.int64))
    # renumber by first appearance so object 0 is the first one requested
    first = np.full(labels.size, len(ids), np.int64)
    np.minimum.at(first, codes, np.arange(len(ids)))
    order = np.argsort(first, kind="stable")
    remap = np.empty_like(order)
    remap[order] = np.arange(order.size)
    codes = remap[codes].astype(np.int64)
    labels = tuple(labels[order].tolist())
    if policy.kind == "lfu" and labels:
        counts = np.bincount(codes, minlength=len(labels))
        rank = np.argsort(-counts, kind="stable")
        remap = np.empty_like(rank)
        remap[rank] = np.arange(rank.size)
        codes = remap[codes]
        labels = tuple(labels[i] for i in rank)
    n = len(ids)
    M = max(len(labels), 1)
    pol_rng = _streams(seed)[1]
    if n == 0:
        z = np.zeros((0, M))
        return SimReport(policy, z.astype(np.int32), z.astype(np.int32), z, np.zeros(0), 0, seed,
                         np.zeros(policy.stages, np.int64), np.full(policy.stages, np.nan), labels)
    arr_t = np.asarray(times, dtype=float)
    chunks = ((arr_t[i:i + _CHUNK], codes[i:i + _CHUNK]) for i in range(0, n, _CHUNK))
    return _simulate(policy, M, chunks, n, warmup_fraction, batches, pol_rng, seed, labels)
