"""Synthetic topologies: random trees (optionally with pure relays), stars and lines."""
from __future__ import annotations

import math
import re

import numpy as np

from .design import shortest_path_tree
from .model import NetworkModel, NodeSpec, derive_cs_sets

DEFAULT_CS_RANGE = 30.0


def mean_cs_degree(model: NetworkModel) -> float:
    """Average CS set size over the non-BS nodes (the BS counts as a member)."""
    senders = model.senders
    return sum(len(model.omega[i]) for i in senders) / len(senders)


def _build(positions, parent, cs_range, lambda_pps, link_per, relays=()):
    nodes = [NodeSpec(0, *positions[0], role="bs")]
    for i in sorted(positions):
        if i == 0:
            continue
        relay = i in relays
        nodes.append(NodeSpec(i, *positions[i], role="relay" if relay else "source",
                              lambda_pps=0.0 if relay else lambda_pps, link_per=link_per))
    return NetworkModel.build(nodes, 0, parent, cs_range=cs_range)


def _grow(rng, n, cs_range):
    """Place nodes one at a time near a random existing node, keeping a minimum spacing."""
    pts = [(0.0, 0.0)]
    spacing = rng.uniform(0.35, 0.6) * cs_range
    while len(pts) < n + 1:
        for _ in range(200):
            ax, ay = pts[rng.integers(len(pts))]
            r = rng.uniform(0.6, 0.98) * cs_range
            th = rng.uniform(0.0, 2.0 * math.pi)
            x, y = ax + r * math.cos(th), ay + r * math.sin(th)
            if all(math.hypot(x - px, y - py) >= spacing for px, py in pts):
                pts.append((round(x, 3), round(y, 3)))
                break
        else:
            return None
    return dict(enumerate(pts))


def random_tree(n: int, mean_cs: float, seed: int, link_per: float = 0.01, lambda_pps: float = 1.0,
                n_sources: int | None = None, cs_range: float = DEFAULT_CS_RANGE, tol: float = 0.5,
                max_tries: int = 5000) -> NetworkModel:
    """Random geometric tree whose mean CS set size is within ``tol`` of ``mean_cs``.

    Routing is the hop-count shortest path tree over the CS graph.  With
    ``n_sources`` set, the remaining nodes become pure relays, drawn from the
    nodes that forward traffic.
    """
    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        pos = _grow(rng, n, cs_range)
        if pos is None:
            continue
        omega = derive_cs_sets(pos, cs_range)
        if abs(sum(len(omega[i]) for i in pos if i) / n - mean_cs) > tol:
            continue
        edges = {(u, v): 1.0 for u in pos for v in omega[u] if u < v}
        parent = shortest_path_tree(list(pos), 0, edges)
        if parent is None:
            continue
        relays = ()
        if n_sources is not None and n_sources < n:
            internal = sorted(set(parent.values()) - {0})
            if len(internal) < n - n_sources:
                continue
            relays = set(int(k) for k in rng.choice(internal, size=n - n_sources, replace=False))
        return _build(pos, parent, cs_range, lambda_pps, link_per, relays)
    raise RuntimeError(f"no tree with n={n} and mean CS degree {mean_cs}±{tol} found in {max_tries} tries")


def _range_for_nearest(distances, m):
    """CS range including exactly the m nearest, midway to the next distance."""
    d = sorted(distances)
    if m >= len(d):
        return d[-1] * 1.05
    if d[m] - d[m - 1] < 1e-9:
        raise ValueError(f"the {m} nearest nodes are not uniquely defined")
    return 0.5 * (d[m - 1] + d[m])


def star(n: int, m: int, link_per: float = 0.01, lambda_pps: float = 1.0, radius: float = 20.0) -> NetworkModel:
    """n sources on a circle around the BS, each hearing its m nearest nodes (BS included)."""
    pos = {0: (0.0, 0.0)}
    for k in range(n):
        th = 2.0 * math.pi * k / n
        pos[k + 1] = (round(radius * math.cos(th), 9), round(radius * math.sin(th), 9))
    x1, y1 = pos[1]
    dists = [math.hypot(x1 - x, y1 - y) for i, (x, y) in pos.items() if i != 1]
    cs_range = _range_for_nearest(dists, m)
    if cs_range < radius:
        raise ValueError("CS range must reach the base station")
    return _build(pos, {i: 0 for i in pos if i}, cs_range, lambda_pps, link_per)


def line(n: int, m: int, link_per: float = 0.01, lambda_pps: float = 1.0, spacing: float = 10.0) -> NetworkModel:
    """Chain BS-1-2-...-n, each node hearing m nodes on either side."""
    if m < 1:
        raise ValueError("each node must hear at least its neighbours")
    pos = {i: (i * spacing, 0.0) for i in range(n + 1)}
    return _build(pos, {i: i - 1 for i in pos if i}, (m + 0.5) * spacing, lambda_pps, link_per)


_NAME = re.compile(r"^(tree|treeR|star|line)-n(\d+)-CS(\d+(?:\.\d+)?)(?:-PER([0-9.eE-]+))?$")


def from_name(name: str, seed: int = 0, lambda_pps: float = 1.0) -> NetworkModel:
    """Build a scenario from a class name such as ``tree-n10-CS3-PER0.01``."""
    mt = _NAME.match(name)
    if not mt:
        raise ValueError(f"unknown scenario name {name!r}")
    kind, n, m, per = mt.group(1), int(mt.group(2)), float(mt.group(3)), float(mt.group(4) or 0.01)
    if kind == "tree":
        return random_tree(n, m, seed, per, lambda_pps)
    if kind == "treeR":
        return random_tree(n, m, seed, per, lambda_pps, n_sources=10)
    if not m.is_integer():
        raise ValueError("star and line scenarios need an integer CS count")
    if kind == "star":
        return star(n, int(m), per, lambda_pps)
    return line(n, int(m), per, lambda_pps)
