"""Discrete-event simulator of unslotted CSMA/CA over a tree, on an integer symbol clock.

Channel model: a node senses the channel busy while any node of its CS set is
inside a transmission's activity period (data, turnaround and ACK); a data
frame is lost when any member of the receiver's interference set has data on
the air at an overlapping instant (no capture), or an independent link error
fires.  ACKs take time but never fail.
"""
from __future__ import annotations

import heapq
import math
from collections import Counter, deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as _st

from .model import NetworkModel, ProtocolParams, SYMBOLS_PER_SECOND, pps_to_per_symbol, symbols_to_seconds

# event kinds, in tie-breaking order at equal times
TX_END, TX_START, CCA, ARRIVAL = 1, 2, 3, 4

NODE_METRICS = ("alpha", "gamma", "delta", "q", "b", "sojourn_ms")
SOURCE_METRICS = ("delay_ms", "p_del")


@dataclass(frozen=True)
class SimConfig:
    duration_s: float = 1500.0
    replications: int = 25
    seed: int = 1
    warmup_s: float = 50.0
    cca_sample: str = "end"  # "end" or "start" of the 8-symbol CCA
    trace_blockers: bool = False
    workers: int = 1

    def __post_init__(self):
        if not self.duration_s > self.warmup_s >= 0:
            raise ValueError("need duration_s > warmup_s >= 0")
        if self.replications < 1:
            raise ValueError("replications must be at least 1")
        if self.cca_sample not in ("end", "start"):
            raise ValueError("cca_sample must be 'end' or 'start'")


@dataclass
class SimStats:
    per_node: dict
    per_source: dict
    sum_q: float
    replications: int = 1
    node_ci: dict = field(default_factory=dict)
    source_ci: dict = field(default_factory=dict)
    sum_q_ci: float = math.nan
    blockers: dict | None = None
    max_cca_per_tx: int = 0
    max_tx_per_packet: int = 0


class _Uniforms:
    """Buffered draws from one PCG64 stream."""

    def __init__(self, seed_seq: np.random.SeedSequence, size: int = 8192):
        self._gen = np.random.Generator(np.random.PCG64(seed_seq))
        self._size = size
        self._u = self._gen.random(size).tolist()
        self._e = self._gen.standard_exponential(size).tolist()
        self._iu = 0
        self._ie = 0

    def uniform(self) -> float:
        if self._iu == self._size:
            self._u = self._gen.random(self._size).tolist()
            self._iu = 0
        self._iu += 1
        return self._u[self._iu - 1]

    def exponential(self) -> float:
        if self._ie == self._size:
            self._e = self._gen.standard_exponential(self._size).tolist()
            self._ie = 0
        self._ie += 1
        return self._e[self._ie - 1]


def _ratio(num, den):
    return num / den if den else math.nan


def simulate(model: NetworkModel, params: ProtocolParams | None = None, config: SimConfig | None = None,
             rep: int = 0) -> SimStats:
    """One replication.  Seeds come from (config.seed, rep)."""
    params = params or ProtocolParams()
    config = config or SimConfig()
    rng = _Uniforms(np.random.SeedSequence([int(config.seed) & (2 ** 64 - 1), rep]))

    ids = model.senders
    idx = {i: k for k, i in enumerate(ids)}
    n = len(ids)
    bs = model.bs
    omega = [[idx[j] for j in sorted(model.omega[i]) if j != bs] for i in ids]
    # hits[k]: nodes whose data corrupts k's frame; victims[k]: nodes whose frames k corrupts
    hits = [[idx[j] for j in sorted(model.interference[i]) if j != bs] for i in ids]
    victims = [[] for _ in range(n)]
    for k in range(n):
        for j in hits[k]:
            victims[j].append(k)
    parent = [idx.get(model.parent[i], -1) for i in ids]
    per = [model.node(i).link_per for i in ids]
    lam = [pps_to_per_symbol(model.node(i).lambda_pps) for i in ids]

    slot, cca, turn = params.slot, params.cca_duration, params.turnaround
    t_x, t_tx = params.data_tx_symbols, params.t_tx
    min_be, max_be = params.mac_min_be, params.mac_max_be
    max_cca, max_tx = params.cca_attempts, params.max_transmissions
    sample_offset = cca if config.cca_sample == "end" else 0
    end = int(round(config.duration_s * SYMBOLS_PER_SECOND))
    warm = int(round(config.warmup_s * SYMBOLS_PER_SECOND))

    queue = [deque() for _ in range(n)]
    stage = [0] * n
    ntx = [0] * n
    bo_end = [0] * n
    act_start = [-1] * n
    act_end = [-1] * n
    data_start = [-(10 ** 12)] * n
    corrupt = [False] * n
    arr_clock = [0.0] * n

    # statistics
    ccas = [0] * n
    cca_fail = [0] * n
    txs = [0] * n
    tx_fail = [0] * n
    first_fail = [0] * n
    first_tx = [0] * n
    hol_done = [0] * n
    discards = [0] * n
    nonempty_since = [0] * n
    nonempty_time = [0] * n
    active_time = [0] * n
    soj_sum = [0] * n
    soj_n = [0] * n
    gen = [0] * n
    delivered = [0] * n
    dropped = [0] * n
    delay_sum = [0] * n
    blockers = [Counter() for _ in range(n)] if config.trace_blockers else None
    max_cca_seen = 0
    max_tx_seen = 0

    heap: list = []
    push = heapq.heappush
    pop = heapq.heappop

    def start_backoff(k, t):
        be = min(min_be + stage[k], max_be)
        tb = t + int(rng.uniform() * (1 << be)) * slot
        bo_end[k] = tb
        push(heap, (tb + sample_offset, CCA, k))

    def enqueue(k, pkt, t):
        queue[k].append((pkt, t))
        if len(queue[k]) == 1:
            nonempty_since[k] = t
            stage[k] = 0
            ntx[k] = 0
            start_backoff(k, t)

    def finish_hol(k, t, ok):
        nonlocal max_tx_seen
        pkt, t_in = queue[k].popleft()
        if ntx[k] > max_tx_seen:
            max_tx_seen = ntx[k]
        if t >= warm:
            hol_done[k] += 1
            soj_sum[k] += t - t_in
            soj_n[k] += 1
            if not ok:
                discards[k] += 1
        src, t_gen, counted = pkt
        if ok:
            p = parent[k]
            if p < 0:
                if counted:
                    delivered[src] += 1
                    delay_sum[src] += t - t_gen
            else:
                enqueue(p, pkt, t)
        elif counted:
            dropped[src] += 1
        if queue[k]:
            stage[k] = 0
            ntx[k] = 0
            start_backoff(k, t)
        else:
            nonempty_time[k] += t - max(nonempty_since[k], warm) if t > warm else 0

    for k in range(n):
        if lam[k] > 0.0:
            arr_clock[k] = rng.exponential() / lam[k]
            ta = math.ceil(arr_clock[k])
            if ta < end:
                push(heap, (ta, ARRIVAL, k))

    while heap:
        t, kind, k = pop(heap)
        if t >= end:
            break
        if kind == CCA:
            busy = [j for j in omega[k] if act_start[j] <= t < act_end[j]]
            cca_done = bo_end[k] + cca
            if t >= warm:
                ccas[k] += 1
                if busy:
                    cca_fail[k] += 1
            if busy:
                if blockers is not None and t >= warm:
                    blockers[k][frozenset(ids[j] for j in busy)] += 1
                stage[k] += 1
                if stage[k] >= max_cca:
                    max_cca_seen = max(max_cca_seen, stage[k])
                    finish_hol(k, cca_done, False)
                else:
                    start_backoff(k, cca_done)
            else:
                max_cca_seen = max(max_cca_seen, stage[k] + 1)
                s = cca_done + turn
                act_start[k] = s
                act_end[k] = s + t_tx
                push(heap, (s, TX_START, k))
        elif kind == TX_START:
            ntx[k] += 1
            corrupt[k] = False
            data_start[k] = t
            lo = t - t_x
            for j in hits[k]:
                if lo < data_start[j] <= t:
                    corrupt[k] = True
                    break
            for j in victims[k]:
                if lo < data_start[j] <= t:
                    corrupt[j] = True
            if t >= warm:
                active_time[k] += min(t + t_tx, end) - t
            elif t + t_tx > warm:
                active_time[k] += min(t + t_tx, end) - warm
            push(heap, (t + t_tx, TX_END, k))
        elif kind == TX_END:
            failed = corrupt[k] or (per[k] > 0.0 and rng.uniform() < per[k])
            if t >= warm:
                txs[k] += 1
                if failed:
                    tx_fail[k] += 1
                if ntx[k] == 1:
                    first_tx[k] += 1
                    first_fail[k] += failed
            if not failed:
                finish_hol(k, t, True)
            elif ntx[k] < max_tx:
                stage[k] = 0
                start_backoff(k, t)
            else:
                finish_hol(k, t, False)
        else:  # ARRIVAL
            counted = t >= warm
            if counted:
                gen[k] += 1
            enqueue(k, (k, t, counted), t)
            arr_clock[k] += rng.exponential() / lam[k]
            ta = math.ceil(arr_clock[k])
            if ta < end:
                push(heap, (ta, ARRIVAL, k))

    for k in range(n):
        if queue[k]:
            nonempty_time[k] += end - max(nonempty_since[k], warm)

    window = end - warm
    per_node = {}
    for k, i in enumerate(ids):
        per_node[i] = {
            "alpha": _ratio(cca_fail[k], ccas[k]),
            "gamma": _ratio(tx_fail[k], txs[k]),
            "gamma_first": _ratio(first_fail[k], first_tx[k]),
            "delta": _ratio(discards[k], hol_done[k]),
            "q": nonempty_time[k] / window,
            "b": 1.0 - active_time[k] / nonempty_time[k] if nonempty_time[k] else math.nan,
            "sojourn_ms": symbols_to_seconds(soj_sum[k] / soj_n[k]) * 1e3 if soj_n[k] else math.nan,
            "ccas": ccas[k], "cca_failures": cca_fail[k], "transmissions": txs[k],
            "tx_failures": tx_fail[k], "hol_packets": hol_done[k], "discards": discards[k],
        }
    per_source = {}
    for i in model.sources:
        k = idx[i]
        done = delivered[k] + dropped[k]
        per_source[i] = {
            "delay_ms": symbols_to_seconds(delay_sum[k] / delivered[k]) * 1e3 if delivered[k] else math.nan,
            "p_del": _ratio(delivered[k], done),
            "generated": gen[k], "delivered": delivered[k], "discarded": dropped[k],
            "in_flight": gen[k] - done, "hops": model.depth(i),
        }
    return SimStats(
        per_node, per_source, float(sum(v["q"] for v in per_node.values())),
        blockers={ids[k]: blockers[k] for k in range(n)} if blockers is not None else None,
        max_cca_per_tx=max_cca_seen, max_tx_per_packet=max_tx_seen,
    )


def ci_half_width(values) -> float:
    """95% Student-t half-width of the mean (NaN for fewer than two samples)."""
    v = np.asarray([x for x in values if not math.isnan(x)], dtype=float)
    if v.size < 2:
        return math.nan
    return float(_st.t.ppf(0.975, v.size - 1) * v.std(ddof=1) / math.sqrt(v.size))


def _mean(values) -> float:
    v = [x for x in values if not math.isnan(x)]
    return float(np.mean(v)) if v else math.nan


def _merge(runs: list[SimStats]) -> SimStats:
    if len(runs) == 1:
        return runs[0]
    first = runs[0]
    per_node, node_ci, per_source, source_ci = {}, {}, {}, {}
    for i in first.per_node:
        per_node[i], node_ci[i] = {}, {}
        for key in first.per_node[i]:
            vals = [r.per_node[i][key] for r in runs]
            per_node[i][key] = _mean(vals)
            if key in NODE_METRICS:
                node_ci[i][key] = ci_half_width(vals)
    for s in first.per_source:
        per_source[s], source_ci[s] = {}, {}
        for key in first.per_source[s]:
            vals = [r.per_source[s][key] for r in runs]
            per_source[s][key] = _mean(vals)
            if key in SOURCE_METRICS:
                source_ci[s][key] = ci_half_width(vals)
    blockers = None
    if first.blockers is not None:
        blockers = {i: sum((r.blockers[i] for r in runs), Counter()) for i in first.blockers}
    sums = [r.sum_q for r in runs]
    return SimStats(per_node, per_source, _mean(sums), len(runs), node_ci, source_ci, ci_half_width(sums),
                    blockers, max(r.max_cca_per_tx for r in runs), max(r.max_tx_per_packet for r in runs))


def replicate(model: NetworkModel, params: ProtocolParams | None = None,
              config: SimConfig | None = None) -> SimStats:
    """Independent replications merged in replication order, with 95% CIs."""
    config = config or SimConfig()
    reps = range(config.replications)
    if config.workers > 1 and config.replications > 1:
        with ProcessPoolExecutor(config.workers) as pool:
            runs = list(pool.map(simulate, [model] * len(reps), [params] * len(reps), [config] * len(reps), reps))
    else:
        runs = [simulate(model, params, config, r) for r in reps]
    return _merge(runs)
