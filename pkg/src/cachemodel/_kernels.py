"""Compiled inner loops for the simulators.

Cache state lives in flat arrays so the same step function serves the
chunked simulation loop, the network walk and the interactive
``CacheState.access`` API.  Linked lists run head (most recent) to tail
(next victim); ``-1`` terminates.
"""
import numpy as np
from numba import njit

LFU, LRU, QLRU, FIFO, RANDOM, KLRU = 0, 1, 2, 3, 4, 5
KIND_CODES = {"lfu": LFU, "lru": LRU, "qlru": QLRU, "fifo": FIFO, "random": RANDOM, "klru": KLRU}

# The per-request kernels never allocate, so they are compiled without the
# runtime's reference counting: with it, every call into a helper taking a
# dozen arrays pays atomic incref/decref pairs that dominate the cost of a
# cache operation (about ten times slower).
kernel = njit(cache=True, nogil=True, _nrt=False)


@kernel
def _push_front(nxt, prv, head, tail, s, m):
    h = head[s]
    prv[s, m] = -1
    nxt[s, m] = h
    if h >= 0:
        prv[s, h] = m
    else:
        tail[s] = m
    head[s] = m


@kernel
def _move_front(nxt, prv, head, tail, s, m):
    if head[s] == m:
        return
    p = prv[s, m]
    n = nxt[s, m]
    nxt[s, p] = n
    if n >= 0:
        prv[s, n] = p
    else:
        tail[s] = p
    _push_front(nxt, prv, head, tail, s, m)


@kernel
def _pop_tail(nxt, prv, head, tail, s):
    v = tail[s]
    p = prv[s, v]
    tail[s] = p
    if p >= 0:
        nxt[s, p] = -1
    else:
        head[s] = -1
    return v


@kernel
def _lru_stage(nxt, prv, head, tail, size, inc, last, s, C, m, t, admit, refresh, measuring, ev_sum, ev_cnt):
    """One LRU/FIFO stage; returns (was_present, evicted or -1, inserted)."""
    if inc[s, m]:
        if refresh:
            _move_front(nxt, prv, head, tail, s, m)
            last[s, m] = t
        return True, -1, False
    if not admit:
        return False, -1, False
    v = -1
    if size[s] >= C:
        v = _pop_tail(nxt, prv, head, tail, s)
        inc[s, v] = 0
        size[s] -= 1
        if measuring:
            ev_sum[s] += t - last[s, v]
            ev_cnt[s] += 1
    _push_front(nxt, prv, head, tail, s, m)
    inc[s, m] = 1
    size[s] += 1
    last[s, m] = t
    return False, v, True


@kernel
def access(kind, C, q, k, inc, nxt, prv, head, tail, size, slots, pos, last,
           m, t, u, measuring, stage_hit, ev_sum, ev_cnt):
    """Serve one request for object ``m`` at time ``t``.

    ``u`` is a uniform draw used by q-LRU (insert iff ``u < q``) and RANDOM
    (victim slot ``floor(u * C)``).  Returns ``(hit, evicted, inserted)``
    for the object-storing stage.
    """
    if kind == LFU:
        hit = inc[0, m] == 1
        if measuring and hit:
            stage_hit[0] += 1
        return hit, -1, False
    if kind == RANDOM:
        if inc[0, m]:
            if measuring:
                stage_hit[0] += 1
            return True, -1, False
        v = -1
        if size[0] >= C:
            j = int(u * C)
            v = slots[j]
            inc[0, v] = 0
            if measuring:
                ev_sum[0] += t - last[0, v]
                ev_cnt[0] += 1
        else:
            j = size[0]
            size[0] += 1
        slots[j] = m
        pos[m] = j
        inc[0, m] = 1
        last[0, m] = t
        return False, v, True
    if kind == KLRU:
        prev_present = True
        hit = False
        v = -1
        ins = False
        for s in range(k):
            present, ev, inserted = _lru_stage(nxt, prv, head, tail, size, inc, last, s, C, m, t,
                                               prev_present, True, measuring, ev_sum, ev_cnt)
            if measuring and present:
                stage_hit[s] += 1
            prev_present = present
            hit = present
            v = ev
            ins = inserted
        return hit, v, ins
    admit = kind != QLRU or u < q
    hit, v, ins = _lru_stage(nxt, prv, head, tail, size, inc, last, 0, C, m, t,
                             admit, kind != FIFO, measuring, ev_sum, ev_cnt)
    if measuring and hit:
        stage_hit[0] += 1
    return hit, v, ins


@kernel
def _close_batch(inc, s, mark, b_occ, b, t):
    M = mark.size
    for mm in range(M):
        if inc[s, mm]:
            if b >= 0:
                b_occ[b, mm] += t - mark[mm]
            mark[mm] = t


@kernel
def run_chunk(kind, C, q, k, inc, nxt, prv, head, tail, size, slots, pos, last, mark,
              objs, times, us, start, n_warm, n_total, b_req, b_hit, b_occ, b_start,
              stage_hit, ev_sum, ev_cnt, cur):
    """Feed a chunk of requests through one cache, updating batch statistics.

    ``cur[0]`` is the current batch (-1 during warmup).  Residency of the
    object-storing stage is integrated over time into ``b_occ``.
    """
    nb = b_req.shape[0]
    n_meas = n_total - n_warm
    s_obj = k - 1
    for i in range(objs.size):
        g = start + i
        t = times[i]
        m = objs[i]
        b = -1
        if g >= n_warm:
            b = ((g - n_warm) * nb) // n_meas
            if b != cur[0]:
                _close_batch(inc, s_obj, mark, b_occ, cur[0], t)
                for bb in range(cur[0] + 1, b + 1):
                    b_start[bb] = t
                cur[0] = b
        measuring = b >= 0
        hit, v, ins = access(kind, C, q, k, inc, nxt, prv, head, tail, size, slots, pos, last,
                             m, t, us[i], measuring, stage_hit, ev_sum, ev_cnt)
        if measuring:
            b_req[b, m] += 1
            if hit:
                b_hit[b, m] += 1
            if v >= 0:
                b_occ[b, v] += t - mark[v]
        if ins:
            mark[m] = t


@njit(cache=True)
def build_alias(p):
    """Walker/Vose alias table for O(1) categorical sampling."""
    n = p.size
    prob = np.empty(n)
    alias = np.arange(n).astype(np.int64)
    scaled = p * n
    small = np.empty(n, np.int64)
    large = np.empty(n, np.int64)
    ns = 0
    nl = 0
    for i in range(n):
        if scaled[i] < 1.0:
            small[ns] = i
            ns += 1
        else:
            large[nl] = i
            nl += 1
    while ns > 0 and nl > 0:
        ns -= 1
        s = small[ns]
        nl -= 1
        g = large[nl]
        prob[s] = scaled[s]
        alias[s] = g
        scaled[g] = (scaled[g] + scaled[s]) - 1.0
        if scaled[g] < 1.0:
            small[ns] = g
            ns += 1
        else:
            large[nl] = g
            nl += 1
    for i in range(nl):
        prob[large[i]] = 1.0
    for i in range(ns):
        prob[small[i]] = 1.0
    return prob, alias


@kernel
def alias_sample(prob, alias, u, out):
    n = prob.size
    for i in range(u.size):
        x = u[i] * n
        j = int(x)
        if j >= n:
            j = n - 1
        if x - j < prob[j]:
            out[i] = j
        else:
            out[i] = alias[j]


@kernel
def renewal_chunk(heap_t, heap_m, fast, slow, pfast, u, e, out_t, out_m):
    """Pop the next ``out_t.size`` arrivals from a min-heap of per-object clocks.

    After emitting object ``m`` at ``t`` its next arrival is
    ``t + e / rate`` with the fast branch chosen iff ``u < pfast``.
    """
    n = heap_t.size
    for i in range(out_t.size):
        t = heap_t[0]
        m = heap_m[0]
        out_t[i] = t
        out_m[i] = m
        r = fast[m] if u[i] < pfast else slow[m]
        nt = t + e[i] / r
        # sift the replaced root down
        j = 0
        while True:
            c = 2 * j + 1
            if c >= n:
                break
            if c + 1 < n and heap_t[c + 1] < heap_t[c]:
                c += 1
            if heap_t[c] < nt:
                heap_t[j] = heap_t[c]
                heap_m[j] = heap_m[c]
                j = c
            else:
                break
        heap_t[j] = nt
        heap_m[j] = m


@kernel
def network_chunk(strategy, q, C, parent_node, inc, nxt, prv, head, tail, size, last,
                  ingress, objs, us, start, n_warm, n_total, node_req, node_hit, repo,
                  b_node_req, b_node_hit, b_repo, path, scratch_sum, scratch_cnt):
    """Walk requests up a tree of LRU caches and replicate on the way back.

    ``strategy``: 0 LCE, 1 LCP(q), 2 LCD.  ``us[i, level]`` is the LCP coin
    of request ``i`` at the ``level``-th cache of its path.  A request that
    misses at a cache passes through without touching its recency.
    ``path`` (length ``us.shape[1]``) and the two per-node scratch arrays
    are caller-provided work space.
    """
    nb = b_node_req.shape[0]
    n_meas = n_total - n_warm
    for i in range(objs.size):
        g = start + i
        m = objs[i]
        measuring = g >= n_warm
        b = ((g - n_warm) * nb) // n_meas if measuring else -1
        node = ingress[i]
        depth = 0
        found = -1
        while node >= 0:
            path[depth] = node
            if measuring:
                node_req[node, m] += 1
                b_node_req[b, node] += 1
            if inc[node, m]:
                found = depth
                _move_front(nxt, prv, head, tail, node, m)
                if measuring:
                    node_hit[node, m] += 1
                    b_node_hit[b, node] += 1
                break
            depth += 1
            node = parent_node[node]
        if measuring and found < 0:
            repo[m] += 1
            b_repo[b] += 1
        top = found if found >= 0 else depth
        if strategy == 2:
            if top >= 1:
                nd = path[top - 1]
                _lru_stage(nxt, prv, head, tail, size, inc, last, nd, C[nd], m, 0.0,
                           True, True, False, scratch_sum, scratch_cnt)
            continue
        for lvl in range(top - 1, -1, -1):
            if strategy == 1 and not us[i, lvl] < q:
                continue
            nd = path[lvl]
            _lru_stage(nxt, prv, head, tail, size, inc, last, nd, C[nd], m, 0.0,
                       True, True, False, scratch_sum, scratch_cnt)
