"""Cache network description: nodes, miss routing, exogenous demand, replication.

``routing[j, i]`` is the fraction of the miss stream of node ``j`` forwarded
to node ``i``; whatever is left of a row (``1 - sum_i routing[j, i]``) goes
to the repository, which stores every object.  ``exogenous[i]`` is the share
of the total request rate that users inject at node ``i``.
"""
from __future__ import annotations

import json
import math
import re
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .policies import PolicySpec

__all__ = ["CacheNetwork", "STRATEGIES", "parse_strategy", "TopologyError"]

STRATEGIES = ("lce", "lcp", "lcd")
_LCP = re.compile(r"^lcp\(\s*([0-9.eE+-]+)\s*\)$")


class TopologyError(ValueError):
    """The network description is inconsistent."""


def parse_strategy(text: str, q: float | None = None):
    """``"lce"``, ``"lcd"``, ``"lcp"`` (with ``q``) or ``"lcp(0.3)"`` -> ``(name, q)``."""
    s = str(text).strip().lower()
    m = _LCP.match(s)
    if m:
        if q is not None and float(q) != float(m.group(1)):
            raise TopologyError(f"conflicting q for {text!r}: {q}")
        s, q = "lcp", float(m.group(1))
    if s not in STRATEGIES:
        raise TopologyError(f"unknown replication strategy {text!r}")
    if s == "lcp":
        if q is None:
            raise TopologyError("LCP needs a copy probability q")
        q = float(q)
        if not 0 < q <= 1:
            raise TopologyError(f"q must be in (0, 1], got {q}")
        return s, q
    if q is not None and float(q) != 1.0:
        raise TopologyError(f"{s.upper()} takes no copy probability")
    return s, 1.0


@dataclass(frozen=True, eq=False)
class CacheNetwork:
    ids: tuple
    capacities: np.ndarray
    routing: np.ndarray
    exogenous: np.ndarray
    strategy: str = "lce"
    q: float = 1.0
    repository: str = "repository"
    _parents: tuple = field(init=False, repr=False)

    def __post_init__(self):
        ids = tuple(str(i) for i in self.ids)
        n = len(ids)
        if n == 0:
            raise TopologyError("a network needs at least one cache")
        if len(set(ids)) != n:
            raise TopologyError("node ids must be unique")
        if self.repository in ids:
            raise TopologyError(f"repository id {self.repository!r} clashes with a cache id")
        cap = np.asarray(self.capacities)
        if cap.shape != (n,) or np.any(cap < 1) or np.any(cap != np.floor(cap)):
            raise TopologyError("capacities must be positive integers, one per node")
        R = np.array(self.routing, dtype=float)
        if R.shape != (n, n):
            raise TopologyError(f"routing must be {n}x{n}")
        if np.any(R < 0) or np.any(R > 1) or np.any(np.diag(R) != 0):
            raise TopologyError("routing fractions must lie in [0, 1] with no self-loops")
        rows = R.sum(axis=1)
        if np.any(rows > 1 + 1e-12):
            bad = ids[int(np.argmax(rows))]
            raise TopologyError(f"forwarding fractions of node {bad!r} sum to {rows.max():.6g} > 1")
        exo = np.array(self.exogenous, dtype=float)
        if exo.shape != (n,) or np.any(exo < 0) or not np.all(np.isfinite(exo)) or exo.sum() <= 0:
            raise TopologyError("exogenous shares must be non-negative with a positive total")
        strategy, q = parse_strategy(self.strategy, None if self.strategy != "lcp" else self.q)
        # every node must leak to the repository somewhere downstream
        leaky = rows < 1 - 1e-12
        reach = leaky.copy()
        queue = deque(np.flatnonzero(leaky).tolist())
        while queue:
            i = queue.popleft()
            for j in np.flatnonzero(R[:, i] > 0):
                if not reach[j]:
                    reach[j] = True
                    queue.append(j)
        if not reach.all():
            bad = [ids[i] for i in np.flatnonzero(~reach)]
            raise TopologyError(f"no miss path to the repository from {bad}")
        parents = tuple(tuple(np.flatnonzero(R[j] > 0).tolist()) for j in range(n))
        for name, val in (("ids", ids), ("capacities", cap.astype(np.int64)), ("routing", R),
                          ("exogenous", exo), ("strategy", strategy), ("q", q), ("_parents", parents)):
            object.__setattr__(self, name, val)
        for a in (self.capacities, self.routing, self.exogenous):
            a.setflags(write=False)

    # -- structure -----------------------------------------------------
    @property
    def N(self) -> int:
        return len(self.ids)

    def __len__(self):
        return self.N

    def index(self, node_id) -> int:
        return self.ids.index(str(node_id))

    def policy(self, i: int) -> PolicySpec:
        c = int(self.capacities[i])
        return PolicySpec.qlru(c, self.q) if self.strategy == "lcp" and self.q < 1 else PolicySpec.lru(c)

    @property
    def to_repository(self) -> np.ndarray:
        """Fraction of each node's miss stream sent to the repository."""
        return np.clip(1.0 - self.routing.sum(axis=1), 0.0, 1.0)

    def successors(self, j: int) -> tuple:
        return self._parents[j]

    def predecessors(self, i: int) -> tuple:
        return tuple(np.flatnonzero(self.routing[:, i] > 0).tolist())

    def topological_order(self):
        """Nodes ordered so every forwarder precedes its targets, or None if cyclic."""
        indeg = (self.routing > 0).sum(axis=0)
        queue = deque(np.flatnonzero(indeg == 0).tolist())
        order = []
        while queue:
            j = queue.popleft()
            order.append(j)
            for i in self._parents[j]:
                indeg[i] -= 1
                if indeg[i] == 0:
                    queue.append(i)
        return order if len(order) == self.N else None

    @property
    def is_acyclic(self) -> bool:
        return self.topological_order() is not None

    @property
    def is_tree(self) -> bool:
        """Acyclic with at most one forwarding target per node."""
        return self.is_acyclic and all(len(p) <= 1 for p in self._parents)

    def parent(self, j: int) -> int:
        """Forwarding target of ``j`` in a tree, ``-1`` for the repository."""
        p = self._parents[j]
        if len(p) > 1:
            raise TopologyError(f"node {self.ids[j]!r} forwards to several caches")
        return p[0] if p else -1

    def depth(self) -> np.ndarray:
        """Hops from each node to the repository along a tree."""
        d = np.zeros(self.N, np.int64)
        for j in reversed(self.topological_order() or []):
            p = self.parent(j)
            d[j] = 1 if p < 0 else d[p] + 1
        return d

    # -- constructors --------------------------------------------------
    @classmethod
    def chain(cls, n: int, capacity, strategy: str = "lce", q: float | None = None) -> "CacheNetwork":
        """``n`` caches in series; users attach to the first, the last feeds the repository."""
        if n < 1:
            raise TopologyError("a chain needs at least one cache")
        cap = np.broadcast_to(np.asarray(capacity, dtype=np.int64), (n,)).copy()
        R = np.zeros((n, n))
        for j in range(n - 1):
            R[j, j + 1] = 1.0
        exo = np.zeros(n)
        exo[0] = 1.0
        name, qq = parse_strategy(strategy, q)
        return cls(tuple(f"c{i + 1}" for i in range(n)), cap, R, exo, name, qq)

    @classmethod
    def tandem(cls, C1: int, C2: int, strategy: str = "lce", q: float | None = None) -> "CacheNetwork":
        return cls.chain(2, [C1, C2], strategy, q)

    @classmethod
    def kary_tree(cls, arity: int, levels: int, capacity, strategy: str = "lce", q: float | None = None,
                  exogenous: str = "leaves") -> "CacheNetwork":
        """Complete ``arity``-ary tree; the root forwards to the repository.

        ``exogenous="leaves"`` splits the demand evenly over the deepest
        level, ``"all"`` over every node.
        """
        if arity < 1 or levels < 1:
            raise TopologyError("arity and levels must be positive")
        sizes = [arity ** lvl for lvl in range(levels)]
        n = sum(sizes)
        R = np.zeros((n, n))
        ids = []
        level_of = []
        start = 0
        for lvl, size in enumerate(sizes):
            for k in range(size):
                ids.append(f"L{lvl}.{k}")
                level_of.append(lvl)
                if lvl:
                    parent = start - sizes[lvl - 1] + k // arity
                    R[start + k, parent] = 1.0
            start += size
        level_of = np.array(level_of)
        cap = np.asarray(capacity, dtype=np.int64)
        cap = cap[level_of] if cap.ndim == 1 and cap.size == levels else np.broadcast_to(cap, (n,)).copy()
        if exogenous == "leaves":
            exo = (level_of == levels - 1) / sizes[-1]
        elif exogenous == "all":
            exo = np.full(n, 1.0 / n)
        else:
            raise TopologyError(f"unknown exogenous placement {exogenous!r}")
        name, qq = parse_strategy(strategy, q)
        return cls(tuple(ids), cap, R, exo.astype(float), name, qq)

    def with_capacity(self, capacity) -> "CacheNetwork":
        cap = np.broadcast_to(np.asarray(capacity, dtype=np.int64), (self.N,)).copy()
        return CacheNetwork(self.ids, cap, self.routing, self.exogenous, self.strategy, self.q, self.repository)

    def with_strategy(self, strategy: str, q: float | None = None) -> "CacheNetwork":
        name, qq = parse_strategy(strategy, q)
        return CacheNetwork(self.ids, self.capacities, self.routing, self.exogenous, name, qq, self.repository)

    # -- JSON ----------------------------------------------------------
    @classmethod
    def from_dict(cls, doc: dict) -> "CacheNetwork":
        """Build from ``{nodes, edges, exogenous, strategy, [q], [repository]}``."""
        try:
            nodes = doc["nodes"]
            repo = str(doc.get("repository", "repository"))
            strategy, q = parse_strategy(doc["strategy"], doc.get("q"))
            ids = [str(nd["id"]) for nd in nodes]
            pos = {k: i for i, k in enumerate(ids)}
            n = len(ids)
            cap = np.array([nd["capacity"] for nd in nodes])
            for nd in nodes:
                _check_node_policy(nd, strategy, q)
            R = np.zeros((n, n))
            for e in doc.get("edges", []):
                src, dst = str(e["from"]), str(e["to"])
                frac = float(e.get("fraction", 1.0))
                if src not in pos:
                    raise TopologyError(f"edge from unknown node {src!r}")
                if dst == repo:
                    continue
                if dst not in pos:
                    raise TopologyError(f"edge to unknown node {dst!r}")
                R[pos[src], pos[dst]] += frac
            exo = np.zeros(n)
            for x in doc.get("exogenous", []):
                node = str(x["node"])
                if node not in pos:
                    raise TopologyError(f"exogenous demand at unknown node {node!r}")
                exo[pos[node]] += float(x["share_of_total_rate"])
        except KeyError as exc:
            raise TopologyError(f"missing field {exc}") from None
        return cls(tuple(ids), cap, R, exo, strategy, q, repo)

    @classmethod
    def load(cls, path) -> "CacheNetwork":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        pol = self.policy(0)
        doc = {
            "repository": self.repository,
            "strategy": self.strategy,
            "nodes": [{"id": k, "capacity": int(c), "policy": pol.kind, "q": self.q}
                      for k, c in zip(self.ids, self.capacities)],
            "edges": [],
            "exogenous": [{"node": k, "share_of_total_rate": float(x)}
                          for k, x in zip(self.ids, self.exogenous) if x > 0],
        }
        if self.strategy == "lcp":
            doc["q"] = self.q
        for j in range(self.N):
            for i in self._parents[j]:
                doc["edges"].append({"from": self.ids[j], "to": self.ids[i], "fraction": float(self.routing[j, i])})
            leak = self.to_repository[j]
            if leak > 1e-15 and self._parents[j]:
                doc["edges"].append({"from": self.ids[j], "to": self.repository, "fraction": float(leak)})
            elif not self._parents[j]:
                doc["edges"].append({"from": self.ids[j], "to": self.repository, "fraction": 1.0})
        return doc

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)


def _check_node_policy(nd: dict, strategy: str, q: float):
    """Node policies must match the strategy (LRU, or q-LRU with the LCP q)."""
    text = nd.get("policy")
    if text is None:
        return
    kind = str(text).strip().lower()
    node_q = nd.get("q")
    if kind.startswith("qlru") or kind.startswith("q-lru"):
        spec = PolicySpec.parse(kind, 1) if "(" in kind else PolicySpec.qlru(1, node_q if node_q is not None else q)
        node_q = spec.q
        kind = "qlru"
    if kind not in ("lru", "qlru"):
        raise TopologyError(f"node {nd.get('id')!r}: policy {text!r} is not supported in networks")
    if strategy == "lcp":
        nq = 1.0 if kind == "lru" else float(node_q)
        if not math.isclose(nq, q, rel_tol=0, abs_tol=1e-15):
            raise TopologyError(f"node {nd.get('id')!r}: q={nq} differs from the LCP q={q}")
    elif kind == "qlru" and float(node_q if node_q is not None else 1.0) != 1.0:
        raise TopologyError(f"node {nd.get('id')!r}: q-LRU nodes need the LCP strategy")
