"""Characteristic-time model of cache networks under IRM exogenous demand.

Each node keeps one eviction time ``T_i``.  The mean request rate of an
object at a node follows from the miss streams of the nodes forwarding to
it and occupancies use the Poisson form at that rate.  Hit probabilities
account for the fact that a forwarded request implies the object was
recently absent upstream:

* ``conditioning="hop"`` looks at the forwarding node only and reproduces
  the classic two-cache formulas; it applies to any topology;
* ``conditioning="route"`` (the default on trees) follows the request's
  whole route from its ingress cache, tracking the conditional intensity
  of recent arrivals as a piecewise-constant function of age.

Feed-forward topologies are solved in one leaves-to-root sweep (LCE/LCP)
or a damped outer iteration (LCD, whose insertions depend on the next
hop).  Nodes with identical upstream (and, for LCD, downstream) structure
share one solution, which keeps large regular trees cheap.  Cyclic routing
is handled by a damped global fixed point.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from ._solve import ConvergenceError, UnsupportedCombination, solve_capacity
from .single import CharacteristicTimes
from .topology import CacheNetwork, TopologyError
from .traffic import PopularityModel, Traffic

__all__ = [
    "NetworkSolution",
    "miss_stream_rates",
    "solve_network",
    "solve_tandem",
    "network_total_hit",
    "SingularRoutingError",
]

DAMPING = 0.5
LCD_DAMPING = 0.3
TOL = 1e-8
MAX_ITER = 10_000


class SingularRoutingError(ValueError):
    """Miss-stream rate equations have no finite solution."""


@dataclass(frozen=True, eq=False)
class NetworkSolution:
    """Per-node solution; nodes in the same symmetry class share arrays.

    ``rate[c]``, ``p_in[c]``, ``p_hit[c]`` and ``T[c]`` belong to class
    ``c``; ``node_class[i]`` maps node ``i`` to its class.
    """

    network: CacheNetwork
    traffic: Traffic
    probabilities: np.ndarray
    node_class: np.ndarray
    T: np.ndarray
    rate: np.ndarray
    p_in: np.ndarray
    p_hit: np.ndarray
    refined: bool
    method: str
    iterations: int
    residual: float
    runtime_s: float = 0.0

    @property
    def strategy(self) -> str:
        return self.network.strategy

    def times(self, i: int) -> CharacteristicTimes:
        return CharacteristicTimes((float(self.T[self.node_class[i]]),))

    @property
    def characteristic_times(self) -> np.ndarray:
        return self.T[self.node_class]

    def node_rate(self, i: int) -> np.ndarray:
        return self.rate[self.node_class[i]]

    def node_p_in(self, i: int) -> np.ndarray:
        return self.p_in[self.node_class[i]]

    def node_p_hit(self, i: int) -> np.ndarray:
        return self.p_hit[self.node_class[i]]

    @property
    def class_hit(self) -> np.ndarray:
        lam = self.rate.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(lam > 0, (self.rate * self.p_hit).sum(axis=1) / lam, 0.0)

    @property
    def node_hit(self) -> np.ndarray:
        """Fraction of requests arriving at each node that hit there."""
        return self.class_hit[self.node_class]

    @property
    def repository_rate(self) -> float:
        leak = self.network.to_repository
        per_class = (self.rate * (1 - self.p_hit)).sum(axis=1)
        return float(math.fsum(per_class[self.node_class] * leak))

    @property
    def exogenous_rate(self) -> float:
        return float(self.traffic.total_rate * self.network.exogenous.sum())

    @property
    def total_hit(self) -> float:
        return network_total_hit(self)


def network_total_hit(solution: NetworkSolution, network: CacheNetwork | None = None) -> float:
    """``1 - (rate reaching the repository) / (total exogenous rate)``."""
    if network is not None and network is not solution.network:
        raise ValueError("solution belongs to another network")
    return 1.0 - solution.repository_rate / solution.exogenous_rate


def miss_stream_rates(network, p_hit, exogenous_rates) -> np.ndarray:
    """Mean per-object request rate at every node.

    Solves ``rate(i) = exo(i) + sum_j rate(j) (1 - p_hit(j)) r[j, i]`` for all
    objects at once.  ``network`` is a :class:`CacheNetwork` or a routing
    matrix; ``p_hit`` and ``exogenous_rates`` are ``(N, M)`` arrays.
    """
    R = network.routing if isinstance(network, CacheNetwork) else np.asarray(network, dtype=float)
    exo = np.asarray(exogenous_rates, dtype=float)
    pass_through = 1.0 - np.asarray(p_hit, dtype=float)
    N = R.shape[0]
    if exo.ndim == 1:
        exo = exo[:, None]
    order = _topological(R)
    if order is not None:
        lam = np.array(exo, dtype=float, copy=True)
        lam = np.broadcast_to(lam, np.broadcast_shapes(exo.shape, pass_through.shape)).copy()
        for j in order:
            out = lam[j] * pass_through[j]
            for i in np.flatnonzero(R[j] > 0):
                lam[i] += R[j, i] * out
        return lam
    M = np.broadcast_shapes(exo.shape, pass_through.shape)[1]
    pt = np.broadcast_to(pass_through, (N, M))
    # (M, N, N) system matrices I - R^T diag(1 - p_hit)
    G = R.T[None, :, :] * pt.T[:, None, :]
    rho = np.max(np.abs(np.linalg.eigvals(G)), axis=1)
    if np.any(rho >= 1 - 1e-12):
        m = int(np.argmax(rho))
        raise SingularRoutingError(
            f"miss streams circulate forever (spectral radius {rho[m]:.6g} for object {m})")
    A = np.eye(N)[None] - G
    rhs = np.broadcast_to(exo, (N, M)).T[:, :, None]
    return np.linalg.solve(A, rhs)[:, :, 0].T


def _topological(R):
    N = R.shape[0]
    indeg = (R > 0).sum(axis=0)
    stack = list(np.flatnonzero(indeg == 0))
    order = []
    while stack:
        j = stack.pop()
        order.append(j)
        for i in np.flatnonzero(R[j] > 0):
            indeg[i] -= 1
            if indeg[i] == 0:
                stack.append(i)
    return order if len(order) == N else None


# ---------------------------------------------------------------------------
# per-node formulas
# ---------------------------------------------------------------------------

class _Source:
    """Miss stream from one forwarding node (possibly standing for ``mult`` copies)."""

    __slots__ = ("mult", "r", "rate", "p_in", "p_hit", "T", "key")

    def __init__(self, mult, r, rate, p_in, p_hit, T, key=None):
        self.mult, self.r, self.rate, self.p_in, self.p_hit, self.T, self.key = mult, r, rate, p_in, p_hit, T, key

    @property
    def forward(self):
        """Mean rate of requests this source sends (hit-based)."""
        return self.r * self.rate * (1 - self.p_hit)

    @property
    def forward_absent(self):
        """Rate weighted by the time the object is absent at the source."""
        return self.r * self.rate * (1 - self.p_in)


class _Node:
    """Inputs and formulas of one node, given its upstream sources."""

    def __init__(self, strategy, q, refined, capacity, exo, sources, lcp_form="conditioned"):
        self.strategy, self.q, self.refined, self.capacity = strategy, q, refined, capacity
        self.exo = exo
        self.sources = sources
        self.lcp_form = lcp_form
        lam = exo.copy()
        nu = exo.copy()
        for s in sources:
            lam += s.mult * s.forward
            nu += s.mult * s.forward_absent
        self.rate, self.nu = lam, nu
        self._safe_rate = np.where(lam > 0, lam, 1.0)

    def _qlru(self, F):
        q = self.q
        return F if q == 1 else q * F / (1 - (1 - q) * F)

    def occupancy_from_hit(self, T, p_hit, h_up=None):
        F = -np.expm1(-self.rate * T)
        if self.strategy == "lcd":
            if not self.refined:
                return F * (p_hit + (1 - p_hit) * h_up)
            return F * (p_hit * (1 - h_up) + h_up)
        return self._qlru(F)

    # -- hit probability given T ---------------------------------------
    def source_hit(self, T, s: _Source, h_up=None, stay=None):
        """Hit probability at this node of a request forwarded by ``s``."""
        window = min(T, s.T)
        A = self.nu * T - s.forward_absent * window
        if self.strategy == "lce" or (self.strategy == "lcp" and self.q == 1):
            return -np.expm1(-A)
        if self.strategy == "lcp":
            if self.lcp_form == "as_printed":
                e = np.exp(-self.rate * window)
                B = (1 - e) * (1 - self.q) + e * -np.expm1(-A)
            else:
                # the last request through the source within the window
                # reached here without leaving a copy at the source
                recent = s.r * (1 - self.q) * -np.expm1(-s.rate * window)
                B = 1 - (1 - recent) * np.exp(-A)
            return self._qlru(B)
        # LCD: a recent forwarded request that missed here put the object
        # here only if the next hop had it
        w = -np.expm1(-s.r * s.rate * window)
        b = -np.expm1(-A)
        return (b * stay + w * h_up) / (1 + w * h_up)

    def hit(self, T, h_up=None):
        """``(p_hit, stay)``; ``stay`` is P(object cached after a request), LCD only."""
        if not self.refined:
            F = -np.expm1(-self.rate * T)
            if self.strategy == "lcd":
                # F h / (1 - F (1 - h)) with the denominator formed without
                # cancellation when F is close to one
                den = np.exp(-self.rate * T) + F * h_up
                p = np.where(den > 0, F * h_up / np.where(den > 0, den, 1.0), 0.0)
                return np.minimum(p, 1.0), None
            return self._qlru(F), None
        if self.strategy != "lcd":
            num = self.exo * self._qlru(-np.expm1(-self.nu * T))
            for s in self.sources:
                num = num + s.mult * s.forward * self.source_hit(T, s)
            return num / self._safe_rate * (self.rate > 0), None
        # LCD: p_hit = stay * X + Y with stay = p_hit (1 - h_up) + h_up, so
        # p_hit = (h_up X + Y) / ((1 - X) + h_up X); 1 - X is accumulated
        # directly to avoid cancellation for rarely requested objects
        X = self.exo * -np.expm1(-self.nu * T)
        notX = self.exo * np.exp(-self.nu * T)
        Y = np.zeros_like(X)
        for s in self.sources:
            window = min(T, s.T)
            A = self.nu * T - s.forward_absent * window
            w = -np.expm1(-s.r * s.rate * window)
            d = 1 + w * h_up
            f = s.mult * s.forward
            X = X + f * -np.expm1(-A) / d
            notX = notX + f * (np.exp(-A) + w * h_up) / d
            Y = Y + f * w * h_up / d
        num = h_up * X + Y
        den = notX + h_up * X
        p = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
        p = np.minimum(p, 1.0) * (self.rate > 0)
        return p, p * (1 - h_up) + h_up

    def occupancy(self, T, h_up=None):
        if self.strategy != "lcd":
            return self._qlru(-np.expm1(-self.rate * T))
        p, _ = self.hit(T, h_up)
        return self.occupancy_from_hit(T, p, h_up)

    def solve(self, h_up=None, guess=None, tol=1e-9):
        live = int(np.count_nonzero(self.rate > 0))
        if self.capacity >= live:
            raise ConvergenceError(f"capacity {self.capacity} covers all {live} objects reaching the node")
        T, res, n = solve_capacity(lambda t: math.fsum(self.occupancy(t, h_up)), self.capacity,
                                   tol=tol, guess=guess)
        p_hit, stay = self.hit(T, h_up)
        p_in = self.occupancy_from_hit(T, p_hit, h_up) if self.strategy == "lcd" \
            else self._qlru(-np.expm1(-self.rate * T))
        return T, p_in, p_hit, stay, res / self.capacity


# ---------------------------------------------------------------------------
# symmetry classes
# ---------------------------------------------------------------------------

def _classes(net: CacheNetwork, downstream: bool):
    """Group nodes whose solutions must coincide.

    Two nodes share a class when their capacities, exogenous shares and
    upstream sub-networks match; with ``downstream`` the chain of nodes
    they forward to must match as well.
    """
    order = net.topological_order()
    sig = {}
    up = np.empty(net.N, np.int64)
    for i in order:
        children = tuple(sorted((int(up[j]), float(net.routing[j, i])) for j in net.predecessors(i)))
        key = (int(net.capacities[i]), float(net.exogenous[i]), children)
        up[i] = sig.setdefault(key, len(sig))
    if not downstream:
        return up
    full = {}
    cls = np.empty(net.N, np.int64)
    for i in reversed(order):
        p = net.parent(i)
        key = (int(up[i]), int(cls[p]) if p >= 0 else -1, float(net.routing[i, p]) if p >= 0 else 0.0)
        cls[i] = full.setdefault(key, len(full))
    return cls


# ---------------------------------------------------------------------------
# solvers
# ---------------------------------------------------------------------------

def _check_traffic(traffic: Traffic):
    if not traffic.is_poisson:
        raise UnsupportedCombination("the network model assumes IRM exogenous traffic")


def solve_network(network: CacheNetwork, traffic: Traffic, popularity: PopularityModel, *,
                  refined: bool = True, method: str = "auto", tol: float = TOL, max_iter: int = MAX_ITER,
                  damping: float | None = None, lcp_form: str = "conditioned",
                  conditioning: str = "auto") -> NetworkSolution:
    """Solve every node of ``network``.

    ``method``: ``"sweep"`` (acyclic routing), ``"fixed_point"`` (damped
    global iteration over all nodes; LCE/LCP only) or ``"auto"``.
    ``refined=False`` gives the plain Poisson approximation at every node.
    ``lcp_form`` selects the LCP conditional hit: ``"conditioned"``
    (recent forwarded requests are those that did not copy downstream) or
    ``"as_printed"``.  ``damping`` weights the new iterate in the damped
    iterations (defaults: 0.3 for the LCD outer loop, 0.5 for the global
    fixed point).

    ``conditioning`` (refined model only): ``"route"`` conditions a
    forwarded request on having missed at every node along its route from
    the ingress (trees only), ``"hop"`` on the previous node only;
    ``"auto"`` picks ``"route"`` on trees.  The ``"hop"`` form reproduces
    the two-cache formulas exactly and is the only one available on meshes.
    """
    _check_traffic(traffic)
    if lcp_form not in ("conditioned", "as_printed"):
        raise ValueError(f"unknown lcp_form {lcp_form!r}")
    t0 = time.perf_counter()
    acyclic = network.is_acyclic
    if method == "auto":
        method = "sweep" if acyclic else "fixed_point"
    if network.strategy == "lcd" and not network.is_tree:
        raise TopologyError("LCD is modelled on trees only (each cache forwards to a single next hop)")
    if conditioning not in ("auto", "route", "hop"):
        raise ValueError(f"unknown conditioning {conditioning!r}")
    if conditioning == "route" and not network.is_tree:
        raise TopologyError("route conditioning needs a tree")
    use_route = refined and method != "fixed_point" and (
        conditioning == "route" or (conditioning == "auto" and network.is_tree))
    if use_route:
        sol = _route_sweep(network, traffic, popularity, tol, max_iter,
                           LCD_DAMPING if damping is None else damping, lcp_form)
    elif method == "sweep":
        if not acyclic:
            raise TopologyError("the sweep needs acyclic routing")
        sol = _sweep(network, traffic, popularity, refined, tol, max_iter,
                     LCD_DAMPING if damping is None else damping, lcp_form)
    elif method == "fixed_point":
        if network.strategy == "lcd":
            raise TopologyError("the global fixed point covers LCE and LCP")
        sol = _fixed_point(network, traffic, popularity, refined, tol, max_iter,
                           DAMPING if damping is None else damping, lcp_form)
    else:
        raise ValueError(f"unknown method {method!r}")
    object.__setattr__(sol, "runtime_s", time.perf_counter() - t0)
    return sol


def _sweep(net, traffic, pop, refined, tol, max_iter, damping, lcp_form):
    lcd = net.strategy == "lcd"
    cls = _classes(net, downstream=lcd)
    n_cls = int(cls.max()) + 1
    rep = np.array([int(np.flatnonzero(cls == c)[0]) for c in range(n_cls)])
    order_nodes = net.topological_order()
    seen = set()
    order = []
    for i in order_nodes:
        if cls[i] not in seen:
            seen.add(cls[i])
            order.append(int(cls[i]))
    p = pop.probabilities
    M = p.size
    rate = np.zeros((n_cls, M))
    p_in = np.zeros((n_cls, M))
    p_hit = np.zeros((n_cls, M))
    stay = np.ones((n_cls, M))
    T = np.zeros(n_cls)
    h_up = np.ones((n_cls, M))
    nodes = [None] * n_cls

    def build(c):
        i = rep[c]
        groups = {}
        for j in net.predecessors(i):
            key = (int(cls[j]), float(net.routing[j, i]))
            groups[key] = groups.get(key, 0) + 1
        sources = [_Source(mult, r, rate[cj], p_in[cj], p_hit[cj], T[cj], cj)
                   for (cj, r), mult in sorted(groups.items())]
        exo = traffic.total_rate * net.exogenous[i] * p
        return _Node(net.strategy, net.q, refined, int(net.capacities[i]), exo, sources, lcp_form)

    def sweep(worst):
        for c in order:
            node = build(c)
            nodes[c] = node
            Tc, pin, ph, st, res = node.solve(h_up[c] if lcd else None, guess=T[c] or None)
            T[c] = Tc
            rate[c], p_in[c], p_hit[c] = node.rate, pin, ph
            if st is not None:
                stay[c] = st
            worst = max(worst, res)
        return worst

    def upward():
        """Conditional hit at the next hop of every class (LCD)."""
        new = np.ones((n_cls, M))
        for c in range(n_cls):
            i = rep[c]
            par = net.parent(i)
            if par < 0:
                continue
            pc = int(cls[par])
            r = float(net.routing[i, par])
            if refined:
                src = next(s for s in nodes[pc].sources if s.key == c)
                h = nodes[pc].source_hit(T[pc], src, h_up[pc], stay[pc])
            else:
                h = p_hit[pc]
            new[c] = r * h + (1 - r)
        return new

    worst = sweep(0.0)
    iterations = 1
    if lcd:
        # alternate the upstream hit probabilities with the node solves; the
        # most popular objects carry a slowly decaying oscillatory mode, so
        # the update is damped
        change = math.inf
        for iterations in range(2, max_iter + 2):
            T_old = T.copy()
            target = upward()
            change = float(np.max(np.abs(target - h_up))) if M else 0.0
            h_up = np.clip(h_up + damping * (target - h_up), 1e-12, 1.0)
            worst = sweep(0.0)
            change = max(change, float(np.max(np.abs(T - T_old) / T)))
            if change < tol:
                break
        else:
            raise ConvergenceError("LCD iteration did not settle", change, iterations)
    return NetworkSolution(net, traffic, p, cls, T, rate, p_in, p_hit, refined, "sweep", iterations, worst)


class _Route:
    """Requests that reach a class along one route from an ingress cache.

    ``flow`` is their mean rate.  ``edges``/``rates`` give the intensity of
    all arrivals at the class in the recent past, conditioned on such a
    request arriving now: ``rates[k]`` applies to ages in
    ``[edges[k], edges[k + 1])`` and the last piece extends to infinity.
    ``own[k]`` is the part carried by the route's own stream, and ages
    below ``window`` (the previous hop's eviction time) are those during
    which the object is known to be absent from the previous hop.
    """

    __slots__ = ("flow", "edges", "rates", "own", "window", "p", "u")

    def __init__(self, flow, edges, rates, own, window, p):
        self.flow, self.edges, self.rates, self.own, self.window = flow, edges, rates, own, window
        self.p = p
        self.u = None

    def segments(self, T):
        """``(start, length, rate, own)`` of every piece inside ``[0, T)``."""
        for k, a in enumerate(self.edges):
            if a >= T:
                break
            b = self.edges[k + 1] if k + 1 < len(self.edges) else math.inf
            yield a, min(b, T) - a, self.rates[k], self.own[k]

    def exposure(self, T):
        """Expected number of arrivals within the last ``T`` time units."""
        A = np.zeros_like(self.flow)
        for _, length, rate, _ in self.segments(T):
            A = A + rate * length
        return A

    def extend(self, r, mult, T_prev, factor_recent, factor_old, other):
        """Route continued through one more hop (from a node with time ``T_prev``).

        Requests forwarded at ages below ``T_prev`` are thinned by
        ``factor_recent`` (those that would have left the object at the
        previous hop are excluded), older ones by ``factor_old``.
        """
        edges = np.union1d(self.edges, [T_prev])
        idx = np.searchsorted(self.edges, edges, side="right") - 1
        own = np.empty((edges.size, self.flow.size))
        for k, (e, j) in enumerate(zip(edges, idx)):
            own[k] = r * self.rates[j] * (factor_recent if e < T_prev else factor_old)
        flow = mult * r * self.flow * (1 - self.p)
        return _Route(flow, edges, own + other, own, T_prev, None)


def _route_lcd_hit(route, T, u, stay):
    """LCD hit probability of the route's requests at a node.

    The object is cached at a request iff the last earlier arrival within
    ``T`` left it there.  A recent arrival of the route's own stream (age
    below ``window``) missed here and left a copy only if the next hop
    served it (probability ``u``); older own arrivals hit with the route's
    probability ``p`` and otherwise left a copy with probability ``u``;
    arrivals from other streams left the object with the node's average
    probability ``stay``.
    """
    recent = np.zeros_like(u)
    older = np.zeros_like(u)
    other = np.zeros_like(u)
    survive = np.ones_like(u)
    for a, length, rate, own in route.segments(T):
        first = survive * -np.expm1(-rate * length)
        with np.errstate(invalid="ignore", divide="ignore"):
            share = np.where(rate > 0, own / np.where(rate > 0, rate, 1.0), 0.0)
        if a < route.window:
            recent = recent + first * share
        else:
            older = older + first * share
        other = other + first * (1 - share)
        survive = survive * np.exp(-rate * length)
    return (u * (recent + older) + other * stay) / (1 - older * (1 - u))


def _route_sweep(net, traffic, pop, tol, max_iter, damping, lcp_form):
    """Tree solver conditioning each request on its whole route from the ingress.

    A request reaching a node has missed at every node below it on its
    route, so recent requests along that route were filtered by every hop,
    not only the last one.  The intensity of arrivals in the recent past is
    tracked as a piecewise-constant function of age with breakpoints at
    the eviction times of the nodes passed.
    """
    strategy, q = net.strategy, net.q
    lcd = strategy == "lcd"
    cls = _classes(net, downstream=lcd)
    n_cls = int(cls.max()) + 1
    rep = np.array([int(np.flatnonzero(cls == c)[0]) for c in range(n_cls)])
    order = []
    for i in net.topological_order():
        if int(cls[i]) not in order:
            order.append(int(cls[i]))
    p = pop.probabilities
    M = p.size
    rate = np.zeros((n_cls, M))
    p_in = np.zeros((n_cls, M))
    p_hit = np.full((n_cls, M), 0.5 if lcd else 0.0)
    h_avg = np.full((n_cls, M), 0.5)
    T = np.zeros(n_cls)
    routes = [dict() for _ in range(n_cls)]
    parent = [(int(cls[net.parent(rep[c])]), float(net.routing[rep[c], net.parent(rep[c])]))
              if net.parent(rep[c]) >= 0 else None for c in range(n_cls)]

    def sweep():
        change, worst = 0.0, 0.0
        for c in order:
            i = rep[c]
            groups = {}
            for j in net.predecessors(i):
                key = (int(cls[j]), float(net.routing[j, i]))
                groups[key] = groups.get(key, 0) + 1
            sources = [_Source(mult, r, rate[cj], p_in[cj], p_hit[cj], T[cj], cj)
                       for (cj, r), mult in sorted(groups.items())]
            exo = traffic.total_rate * net.exogenous[i] * p
            node = _Node(strategy, q, True, int(net.capacities[i]), exo, sources, lcp_form)
            live = int(np.count_nonzero(node.rate > 0))
            if node.capacity >= live:
                raise ConvergenceError(f"capacity {node.capacity} covers all {live} objects reaching the node")
            T_old = T[c]
            if not lcd:
                T[c], res, _ = solve_capacity(lambda t: math.fsum(node.occupancy(t)), node.capacity,
                                              tol=1e-9, guess=T_old or None)
            old = routes[c]
            new = {}
            if net.exogenous[i] > 0:
                new[(c,)] = _Route(exo, np.zeros(1), node.rate[None, :], exo[None, :], 0.0, None)
            for s in sources:
                other = np.maximum(node.rate - s.forward, 0.0)
                for key, route in routes[s.key].items():
                    k2 = key + (s.r, c)
                    if lcd:
                        prev = old.get(k2)
                        recent = 1 - (prev.p if prev is not None else p_hit[c])
                    else:
                        # the last request through the source within the
                        # window left no copy there; its probability is
                        # spread over the window as an equivalent intensity
                        window = min(T[s.key], T[c])
                        seen = route.exposure(window)
                        last = s.r * (1 - q) * -np.expm1(-seen)
                        with np.errstate(invalid="ignore", divide="ignore"):
                            recent = np.where(seen > 0, -np.log1p(-last) / (s.r * np.where(seen > 0, seen, 1.0)),
                                              1 - q)
                    new[k2] = route.extend(s.r, s.mult, T[s.key], recent, 1 - route.p, other)
            safe = np.where(node.rate > 0, node.rate, 1.0)
            live_mask = node.rate > 0

            if lcd:
                up = parent[c]
                for key, route in new.items():
                    if up is None:
                        route.u = np.ones(M)
                    else:
                        pc, r = up
                        above = routes[pc].get(key + (r, pc))
                        route.u = r * (above.p if above is not None else p_hit[pc]) + (1 - r)
                h_avg[c] = sum(r.flow * r.u for r in new.values()) / safe * live_mask
                stay = p_hit[c] * (1 - h_avg[c]) + h_avg[c]

                def hits(t):
                    return [_route_lcd_hit(route, t, route.u, stay) for route in new.values()]

                def occupancy(t):
                    ph = sum(r.flow * h for r, h in zip(new.values(), hits(t))) / safe * live_mask
                    return math.fsum(-np.expm1(-node.rate * t) * (ph * (1 - h_avg[c]) + h_avg[c]))

                # hold the hit probabilities at their current (damped) values;
                # only if that cannot fill the cache are they re-evaluated at
                # each trial time
                try:
                    T[c], res, _ = solve_capacity(lambda t: math.fsum(-np.expm1(-node.rate * t) * stay),
                                                  node.capacity, tol=1e-9, guess=T_old or None)
                except ConvergenceError:
                    T[c], res, _ = solve_capacity(occupancy, node.capacity, tol=1e-9, guess=T_old or None)
            worst = max(worst, res / node.capacity)
            if T_old > 0:
                change = max(change, abs(T[c] - T_old) / T[c])
            rate[c] = node.rate

            if lcd:
                for (key, route), fresh in zip(new.items(), hits(T[c])):
                    prev = old[key].p if key in old else p_hit[c]
                    change = max(change, float(np.max(np.abs(fresh - prev))) if key in old else math.inf)
                    route.p = prev + damping * (fresh - prev)
            else:
                for route in new.values():
                    route.p = node._qlru(-np.expm1(-route.exposure(T[c])))
            routes[c] = new
            p_hit[c] = sum(r.flow * r.p for r in new.values()) / safe * live_mask
            if lcd:
                p_in[c] = -np.expm1(-node.rate * T[c]) * (p_hit[c] * (1 - h_avg[c]) + h_avg[c])
            else:
                p_in[c] = node._qlru(-np.expm1(-node.rate * T[c]))
        return change, worst

    change, worst = sweep()
    iterations = 1
    if lcd:
        for iterations in range(2, max_iter + 2):
            change, worst = sweep()
            if change < tol:
                break
        else:
            raise ConvergenceError("LCD iteration did not settle", change, iterations)
    return NetworkSolution(net, traffic, p, cls, T, rate, p_in, p_hit, True, "route", iterations, worst)


def _fixed_point(net, traffic, pop, refined, tol, max_iter, damping, lcp_form):
    p = pop.probabilities
    N, M = net.N, p.size
    exo = traffic.total_rate * net.exogenous[:, None] * p[None, :]
    T = np.zeros(N)
    p_in = np.zeros((N, M))
    p_hit = np.zeros((N, M))
    worst = 0.0
    change = math.inf
    for it in range(1, max_iter + 1):
        rate = miss_stream_rates(net, p_hit, exo)
        new_T = np.empty(N)
        new_in = np.empty((N, M))
        new_hit = np.empty((N, M))
        nodes = []
        for i in range(N):
            sources = [_Source(1, float(net.routing[j, i]), rate[j], p_in[j], p_hit[j], T[j] if T[j] > 0 else 0.0)
                       for j in net.predecessors(i)]
            node = _Node(net.strategy, net.q, refined, int(net.capacities[i]), exo[i], sources, lcp_form)
            node.rate = rate[i]  # consistent with the linear solve (identical on trees)
            node._safe_rate = np.where(rate[i] > 0, rate[i], 1.0)
            nodes.append(node)
            live = int(np.count_nonzero(rate[i] > 0))
            if node.capacity >= live:
                raise ConvergenceError(f"capacity of node {net.ids[i]!r} covers all objects reaching it")
            Ti, res, _ = solve_capacity(lambda t, node=node: math.fsum(node.occupancy(t)), node.capacity,
                                        tol=1e-9, guess=T[i] or None)
            worst = max(worst, res / node.capacity)
            new_T[i] = Ti
        for i in range(N):
            node = nodes[i]
            node.sources = [_Source(1, s.r, s.rate, s.p_in, s.p_hit, new_T[j], None)
                            for s, j in zip(node.sources, net.predecessors(i))]
            new_in[i] = node._qlru(-np.expm1(-node.rate * new_T[i]))
            new_hit[i], _ = node.hit(new_T[i])
        if it == 1:
            T, p_in, p_hit = new_T, new_in, new_hit
            continue
        change = max(float(np.max(np.abs(new_T - T) / new_T)),
                     float(np.max(np.abs(new_in - p_in))), float(np.max(np.abs(new_hit - p_hit))))
        T = (1 - damping) * T + damping * new_T
        p_in = (1 - damping) * p_in + damping * new_in
        p_hit = (1 - damping) * p_hit + damping * new_hit
        if change < tol:
            break
    else:
        raise ConvergenceError("global fixed point did not converge", change, max_iter)
    rate = miss_stream_rates(net, p_hit, exo)
    return NetworkSolution(net, traffic, p, np.arange(N), T, rate, p_in, p_hit, refined, "fixed_point", it, worst)


def solve_tandem(strategy: str, traffic: Traffic, popularity: PopularityModel, C1: int, C2: int, *,
                 q: float | None = None, refined: bool = True, **kwargs) -> NetworkSolution:
    """Two caches in series with users attached to the first."""
    return solve_network(CacheNetwork.tandem(C1, C2, strategy, q), traffic, popularity, refined=refined, **kwargs)
