"""Discrete-event simulation of tree-shaped LRU cache networks.

Each exogenous request enters at an ingress cache, climbs towards the
repository until it finds the object, and the object is copied back along
the path according to the replication strategy:

* LCE - into every cache that missed;
* LCP(q) - into each cache that missed, independently with probability q;
* LCD - only into the cache just below the one that served it.

Propagation is instantaneous.  A miss does not refresh recency at the cache
it passes through.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from . import _kernels as K
from .simulation import DEFAULT_BATCHES, DEFAULT_WARMUP, ArrivalStream, _streams, _CHUNK
from .topology import CacheNetwork, TopologyError
from .traffic import PopularityModel, Traffic

__all__ = ["NetworkSimConfig", "NetworkSimReport", "run_network_sim", "run_network_replications"]

_STRATEGY_CODE = {"lce": 0, "lcp": 1, "lcd": 2}
DEFAULT_MAX_CELLS = 50_000_000


@dataclass(frozen=True)
class NetworkSimConfig:
    network: CacheNetwork
    traffic: Traffic
    popularity: PopularityModel
    n_requests: int
    warmup_fraction: float = DEFAULT_WARMUP
    seed: object = 0
    batches: int = DEFAULT_BATCHES
    max_cells: int = DEFAULT_MAX_CELLS

    def __post_init__(self):
        if int(self.n_requests) <= 0:
            raise ValueError("n_requests must be positive")
        if not 0 <= self.warmup_fraction < 1:
            raise ValueError("warmup fraction must lie in [0, 1)")


@dataclass(frozen=True, eq=False)
class NetworkSimReport:
    """Post-warmup counts of a network run (or pooled replications).

    ``node_requests[i, m]`` counts requests for ``m`` that reached node
    ``i`` (exogenous or forwarded); ``repository[m]`` counts fetches from
    the repository.  Batch arrays support confidence intervals.
    """

    ids: tuple
    node_requests: np.ndarray
    node_hits: np.ndarray
    repository: np.ndarray
    batch_node_requests: np.ndarray
    batch_node_hits: np.ndarray
    batch_repository: np.ndarray
    batch_exogenous: np.ndarray
    warmup: int
    seed: object
    replications: int = 1

    @property
    def n_exogenous(self) -> int:
        return int(self.batch_exogenous.sum())

    @property
    def n_batches(self) -> int:
        return self.batch_exogenous.size

    @property
    def node_hit_ratio(self) -> np.ndarray:
        req = self.node_requests.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(req > 0, self.node_hits.sum(axis=1) / np.maximum(req, 1), np.nan)

    def node_object_hit_ratio(self, i: int) -> np.ndarray:
        req = self.node_requests[i]
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(req > 0, self.node_hits[i] / np.maximum(req, 1), np.nan)

    @property
    def total_hit(self) -> float:
        n = self.n_exogenous
        return 1.0 - float(self.repository.sum()) / n if n else float("nan")

    @property
    def aggregate_hit(self) -> float:
        return self.total_hit

    @property
    def repository_load(self) -> float:
        """Fraction of exogenous requests served by the repository."""
        return 1.0 - self.total_hit

    def _ratio_se(self, num, den):
        B = num.shape[0]
        if B < 2:
            return np.full(num.shape[1:], np.inf)
        tot = den.sum(axis=0)
        with np.errstate(invalid="ignore", divide="ignore"):
            r = num.sum(axis=0) / tot
            resid = (num - r * den) / (tot / B)
            return np.sqrt((resid ** 2).sum(axis=0) / (B * (B - 1)))

    def node_hit_se(self) -> np.ndarray:
        return self._ratio_se(self.batch_node_hits.astype(float), self.batch_node_requests.astype(float))

    def total_hit_se(self) -> float:
        return float(self._ratio_se(self.batch_repository[:, None].astype(float),
                                    self.batch_exogenous[:, None].astype(float))[0])

    @property
    def hit_ci(self) -> float:
        B = self.n_batches
        t = stats.t.ppf(0.975, B - 1) if B > 1 else float("inf")
        return float(t * self.total_hit_se())

    @classmethod
    def merge(cls, reports) -> "NetworkSimReport":
        reports = list(reports)
        if not reports:
            raise ValueError("nothing to merge")
        return cls(
            reports[0].ids,
            sum(r.node_requests for r in reports),
            sum(r.node_hits for r in reports),
            sum(r.repository for r in reports),
            np.concatenate([r.batch_node_requests for r in reports]),
            np.concatenate([r.batch_node_hits for r in reports]),
            np.concatenate([r.batch_repository for r in reports]),
            np.concatenate([r.batch_exogenous for r in reports]),
            sum(r.warmup for r in reports),
            tuple(r.seed for r in reports),
            sum(r.replications for r in reports),
        )


def _tree_parents(net: CacheNetwork) -> np.ndarray:
    if not net.is_tree:
        raise TopologyError("network simulation supports trees and chains only")
    parent = np.full(net.N, -1, np.int64)
    for j in range(net.N):
        p = net.parent(j)
        if p >= 0:
            if not math.isclose(net.routing[j, p], 1.0, rel_tol=0, abs_tol=1e-12):
                raise TopologyError(f"node {net.ids[j]!r} splits its misses; simulation needs full forwarding")
            parent[j] = p
    return parent


def run_network_sim(config: NetworkSimConfig) -> NetworkSimReport:
    """Simulate ``config.n_requests`` exogenous requests (warmup included)."""
    net, traffic, pop = config.network, config.traffic, config.popularity
    parent = _tree_parents(net)
    N, M = net.N, pop.M
    if N * M > config.max_cells:
        raise MemoryError(f"{N} caches x {M} objects exceeds the configured bound {config.max_cells}")
    shares = net.exogenous / net.exogenous.sum()
    ingress_nodes = np.flatnonzero(shares > 0)
    if not traffic.is_poisson and ingress_nodes.size > 1:
        raise TopologyError("renewal traffic is supported with a single ingress cache only")
    n_total = int(config.n_requests)
    n_warm = int(math.floor(config.warmup_fraction * n_total))
    nb = min(config.batches, n_total - n_warm)
    arr_rng, pol_rng, route_rng = _streams(config.seed)
    stream = ArrivalStream(traffic, pop, arr_rng)
    prob, alias = K.build_alias(shares[ingress_nodes].copy())
    depth = int(net.depth().max())

    inc = np.zeros((N, M), np.int8)
    nxt = np.full((N, M), -1, np.int32)
    prv = np.full((N, M), -1, np.int32)
    head = np.full(N, -1, np.int64)
    tail = np.full(N, -1, np.int64)
    size = np.zeros(N, np.int64)
    last = np.zeros((N, M))
    node_req = np.zeros((N, M), np.int64)
    node_hit = np.zeros((N, M), np.int64)
    repo = np.zeros(M, np.int64)
    b_req = np.zeros((nb, N), np.int64)
    b_hit = np.zeros((nb, N), np.int64)
    b_repo = np.zeros(nb, np.int64)
    C = net.capacities.astype(np.int64)
    code = _STRATEGY_CODE[net.strategy]
    path = np.empty(depth, np.int64)
    scratch_sum = np.zeros(N)
    scratch_cnt = np.zeros(N, np.int64)

    done = 0
    while done < n_total:
        n = min(_CHUNK, n_total - done)
        _, objs = stream.next(n)
        us = pol_rng.random((n, depth))
        if ingress_nodes.size == 1:
            ingress = np.full(n, ingress_nodes[0], np.int64)
        else:
            pick = np.empty(n, np.int64)
            K.alias_sample(prob, alias, route_rng.random(n), pick)
            ingress = ingress_nodes[pick]
        K.network_chunk(code, net.q, C, parent, inc, nxt, prv, head, tail, size, last,
                        ingress, objs, us, done, n_warm, n_total, node_req, node_hit, repo,
                        b_req, b_hit, b_repo, path, scratch_sum, scratch_cnt)
        done += n
    b_exo = b_hit.sum(axis=1) + b_repo
    return NetworkSimReport(net.ids, node_req, node_hit, repo, b_req, b_hit, b_repo, b_exo, n_warm, config.seed)


def run_network_replications(network: CacheNetwork, traffic: Traffic, popularity: PopularityModel,
                             n_requests: int, seeds, **kwargs) -> NetworkSimReport:
    return NetworkSimReport.merge(
        run_network_sim(NetworkSimConfig(network, traffic, popularity, n_requests, seed=s, **kwargs))
        for s in seeds)
