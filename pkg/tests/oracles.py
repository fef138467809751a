"""Independent reference computations used only by the tests.

None of these reuse the package's closed forms: they enumerate, simulate or
solve linear systems directly.
"""
from __future__ import annotations

import itertools
import math

import mpmath as mp
import numpy as np


# -- bounded attempt tree ----------------------------------------------------------

def attempt_tree(alpha: float, gamma: float, stage_means, t_tx: float, max_tx: int):
    """Mean service time and discard probability by walking every outcome path.

    One transmission attempt runs up to len(stage_means) CCAs; stage k costs
    stage_means[k] symbols on average.  Exhausting the CCAs discards the
    packet; a transmission fails with probability gamma and is retried up to
    max_tx transmissions in total.
    """
    n_cca = len(stage_means)
    total_time = 0.0
    total_prob = 0.0
    discard = 0.0

    def walk(tx_done: int, stage: int, prob: float, elapsed: float):
        nonlocal total_time, total_prob, discard
        elapsed += stage_means[stage]
        # channel busy at this CCA
        if stage + 1 < n_cca:
            walk(tx_done, stage + 1, prob * alpha, elapsed)
        else:
            p_end = prob * alpha
            total_time += p_end * elapsed
            total_prob += p_end
            discard += p_end
        # channel idle: transmit
        p_tx = prob * (1.0 - alpha)
        t_after = elapsed + t_tx
        p_ok = p_tx * (1.0 - gamma)
        total_time += p_ok * t_after
        total_prob += p_ok
        p_bad = p_tx * gamma
        if tx_done + 1 < max_tx:
            walk(tx_done + 1, 0, p_bad, t_after)
        else:
            total_time += p_bad * t_after
            total_prob += p_bad
            discard += p_bad

    walk(0, 0, 1.0, 0.0)
    assert abs(total_prob - 1.0) < 1e-12
    return total_time, discard


# -- service-time transform --------------------------------------------------------

def mgf_mp(z, beta, alpha, gamma, t_tx):
    a = mp.mpf(beta) * (1 - mp.mpf(alpha))
    e = mp.e ** (-z * t_tx)
    return a * (1 - mp.mpf(gamma)) * e / (z + a * (1 - mp.mpf(gamma) * e))


def mgf_derivatives(beta, alpha, gamma, t_tx, h=1e-6):
    """First and second derivatives at 0 by fourth-order central differences (50 digits)."""
    with mp.workdps(50):
        h = mp.mpf(h)
        f = {k: mgf_mp(k * h, beta, alpha, gamma, t_tx) for k in (-2, -1, 0, 1, 2)}
        d1 = (-f[2] + 8 * f[1] - 8 * f[-1] + f[-2]) / (12 * h)
        d2 = (-f[2] + 16 * f[1] - 30 * f[0] + 16 * f[-1] - f[-2]) / (12 * h * h)
        return float(d1), float(d2), float(f[0])


# -- M/D/inf busy period -------------------------------------------------------------

def md_inf_busy_period(zeta: float, t: float, n: int, seed: int = 7) -> float:
    """Mean busy period over n simulated busy periods of an M/D/inf queue."""
    rng = np.random.default_rng(seed)
    length = np.full(n, float(t))
    active = np.arange(n)
    while active.size:
        gaps = rng.exponential(1.0 / zeta, active.size)
        cont = gaps < t
        length[active[cont]] += gaps[cont]
        active = active[cont]
    return float(length.mean())


# -- conflict-graph CTMC -------------------------------------------------------------

def ctmc_idle_probability(rates, conflicts, mean_tx: float) -> float:
    """Stationary probability that nobody transmits, from the generator matrix.

    Node v starts at rate rates[v] whenever none of its conflicting nodes is
    active and holds the channel for an exponential time of mean mean_tx.
    """
    n = len(rates)
    states = [s for s in itertools.product((0, 1), repeat=n)
              if not any(s[u] and s[v] for u, v in conflicts)]
    index = {s: k for k, s in enumerate(states)}
    q = np.zeros((len(states), len(states)))
    for s in states:
        for v in range(n):
            t = list(s)
            t[v] = 1 - s[v]
            t = tuple(t)
            if t in index:
                q[index[s], index[t]] += (1.0 / mean_tx) if s[v] else rates[v]
    np.fill_diagonal(q, -q.sum(axis=1))
    a = np.vstack([q.T, np.ones(len(states))])
    b = np.zeros(len(states) + 1)
    b[-1] = 1.0
    pi = np.linalg.lstsq(a, b, rcond=None)[0]
    return float(pi[index[(0,) * n]])


def ctmc_teff(beta_i, taus, conflicts_among_nbrs, t_tx):
    """Dilated activity period of node 0 (the observer) from the CTMC idle probability.

    The observer conflicts with every neighbour; neighbours conflict per the given pairs
    (indices 1..len(taus)).
    """
    rates = [beta_i] + list(taus)
    conflicts = [(0, j) for j in range(1, len(rates))] + list(conflicts_among_nbrs)
    idle = ctmc_idle_probability(rates, conflicts, t_tx)
    return (1.0 / idle - 1.0 - beta_i * t_tx) / sum(taus)


# -- spanning trees --------------------------------------------------------------

def min_max_edge_tree(nodes, bs, edges, h_max):
    """Exhaustive branch-and-bound over parent assignments.

    Returns the smallest achievable largest edge over all spanning trees whose
    every node is within h_max hops of bs, or None if there is none.
    """
    others = [v for v in sorted(nodes) if v != bs]
    choices = {v: sorted(((w, u) for (a, b), w in edges.items() for u in ((b,) if a == v else (a,) if b == v else ()))
                         ) for v in others}
    best = [math.inf]

    def hops_ok(parent):
        for v in others:
            h, u, seen = 0, v, set()
            while u != bs:
                if u in seen:
                    return False
                seen.add(u)
                u = parent[u]
                h += 1
                if h > h_max:
                    return False
        return True

    def rec(k, parent, worst):
        if worst >= best[0]:
            return
        if k == len(others):
            if hops_ok(parent):
                best[0] = worst
            return
        v = others[k]
        for w, u in choices[v]:
            parent[v] = u
            rec(k + 1, parent, max(worst, w))
        parent.pop(v, None)

    rec(0, {}, 0.0)
    return None if math.isinf(best[0]) else best[0]


def all_feasible_trees(nodes, bs, edges, h_max):
    """Plain enumeration of every hop-feasible spanning tree (small graphs only)."""
    others = [v for v in sorted(nodes) if v != bs]
    nbrs = {v: [u for (a, b) in edges for u in ((b,) if a == v else (a,) if b == v else ())] for v in others}
    for combo in itertools.product(*(nbrs[v] for v in others)):
        parent = dict(zip(others, combo))
        ok = True
        for v in others:
            h, u = 0, v
            while u != bs and h <= h_max:
                u = parent[u]
                h += 1
            if u != bs or h > h_max:
                ok = False
                break
        if ok:
            yield parent
