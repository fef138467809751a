"""QoS-constrained topology design: hop bound, minmax spanning tree with hop
constraint by iterative edge pruning, and its load-aware extension."""
from __future__ import annotations

import enum
import itertools
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .fixedpoint import AnalysisConfig, FixedPointError, solve
from .model import NetworkModel, NodeSpec, ProtocolParams, symbols_to_seconds
from .qna import PerfReport, ServiceDivergence, qna_sweep

log = logging.getLogger(__name__)

DESIGN_PAYLOAD_BYTES = 70


def design_params(payload_bytes: int = DESIGN_PAYLOAD_BYTES, acks_enabled: bool = True) -> ProtocolParams:
    return ProtocolParams(acks_enabled=acks_enabled).with_payload(payload_bytes)


@dataclass(frozen=True)
class QoS:
    p: float = 0.01
    p_del: float = 0.95
    d_max_s: float = 0.025
    lambda_pps: float = 1.0

    def __post_init__(self):
        if not (0 < self.p < 1 and 0 < self.p_del < 1):
            raise ValueError("p and p_del must lie in (0, 1)")
        if self.d_max_s <= 0 or self.lambda_pps < 0:
            raise ValueError("d_max must be positive and lambda non-negative")

    @classmethod
    def parse(cls, text: str) -> "QoS":
        """Parse ``p=0.01,pdel=0.95,dmax-ms=25,lambda-pps=1``."""
        keys = {"p": "p", "pdel": "p_del", "p_del": "p_del", "dmax-ms": "d_max_ms", "dmax_ms": "d_max_ms",
                "dmax-s": "d_max_s", "lambda-pps": "lambda_pps", "lambda": "lambda_pps"}
        kw = {}
        for part in filter(None, (s.strip() for s in text.split(","))):
            name, sep, value = part.partition("=")
            if not sep or name.strip() not in keys:
                raise ValueError(f"bad QoS term {part!r}")
            kw[keys[name.strip()]] = float(value)
        if "d_max_ms" in kw:
            kw["d_max_s"] = kw.pop("d_max_ms") / 1e3
        return cls(**kw)


class DesignStatus(str, enum.Enum):
    OPTIMAL_LONE_PACKET = "optimal-lone-packet"
    FEASIBLE_POSITIVE_LOAD = "feasible-positive-load"
    INFEASIBLE = "infeasible"
    POSSIBLY_INFEASIBLE = "possibly-infeasible"


def _edge(u: int, v: int) -> tuple[int, int]:
    return (u, v) if u < v else (v, u)


@dataclass(frozen=True)
class DesignProblem:
    """Candidate graph plus QoS targets.  ``edges`` maps (u, v) with u < v to a length in meters."""

    positions: Mapping[int, tuple[float, float]]
    bs: int
    edges: Mapping[tuple[int, int], float]
    qos: QoS = QoS()
    edge_per: float | Mapping[tuple[int, int], float] | None = None
    cs_range: float | None = None  # None: every node hears every other node
    params: ProtocolParams = field(default_factory=design_params)

    def __post_init__(self):
        if self.bs not in self.positions:
            raise ValueError("base station missing from the node set")
        for (u, v) in self.edges:
            if u >= v or u not in self.positions or v not in self.positions:
                raise ValueError(f"bad edge {(u, v)}")

    @property
    def nodes(self) -> list[int]:
        return sorted(self.positions)

    @property
    def sources(self) -> list[int]:
        return [i for i in self.nodes if i != self.bs]

    def per(self, u: int, v: int) -> float:
        if self.edge_per is None:
            return self.qos.p
        if isinstance(self.edge_per, Mapping):
            return float(self.edge_per[_edge(u, v)])
        return float(self.edge_per)

    @classmethod
    def complete(cls, positions: Mapping[int, tuple[float, float]], bs: int, qos: QoS = QoS(), **kw):
        """All node pairs are candidate edges, length = Euclidean distance."""
        edges = {}
        for u, v in itertools.combinations(sorted(positions), 2):
            (x1, y1), (x2, y2) = positions[u], positions[v]
            edges[(u, v)] = round(math.hypot(x1 - x2, y1 - y2), 9)
        return cls(dict(positions), bs, edges, qos, **kw)


@dataclass
class TraceRow:
    iteration: int
    phase: str  # "prune" or "augment"
    max_edge: float
    max_hops: int
    verdict: str
    worst_delay_ms: float = math.nan
    worst_p_del: float = math.nan


@dataclass
class DesignResult:
    tree: dict | None
    max_edge_length: float
    hop_counts: dict
    status: DesignStatus
    h_max: int
    qos_eval: PerfReport | None = None
    trace: list = field(default_factory=list)

    @property
    def feasible(self) -> bool:
        return self.status in (DesignStatus.OPTIMAL_LONE_PACKET, DesignStatus.FEASIBLE_POSITIVE_LOAD)


# -- lone-packet bound -----------------------------------------------------------

def lone_packet_delay(params: ProtocolParams, p: float) -> float:
    """Mean single-hop delay (symbols) of a packet crossing an idle network,
    conditioned on its eventual delivery within the retry limit."""
    if not 0.0 <= p < 1.0:
        raise ValueError("link PER must lie in [0, 1)")
    attempt = params.mean_backoff(0) + params.cca_duration + params.turnaround + params.t_tx
    r = params.max_transmissions - 1
    num = sum(p ** k * (1.0 - p) * (k + 1) for k in range(r + 1))
    return attempt * num / (1.0 - p ** (r + 1))


def hop_bound(qos: QoS, params: ProtocolParams, single_hop_delay: float | None = None) -> int:
    """Largest hop count meeting both lone-packet QoS targets (0 means infeasible)."""
    d = lone_packet_delay(params, qos.p) if single_hop_delay is None else single_hop_delay
    h_delay = math.floor(qos.d_max_s / symbols_to_seconds(d))
    drop = qos.p ** params.max_transmissions
    h_delivery = math.inf if drop <= 0.0 else math.floor(math.log(qos.p_del) / math.log1p(-drop))
    return int(min(h_delay, h_delivery))


# -- spanning trees --------------------------------------------------------------

def shortest_path_tree(nodes, bs: int, edges: Mapping[tuple[int, int], float]) -> dict | None:
    """Hop-count shortest path tree, or None when some node is unreachable.

    Among equal-hop parents a node takes its shortest edge, then the smallest
    parent id, which also minimises the tree's largest edge among all SPTs.
    """
    adj: dict[int, list[tuple[int, float]]] = {i: [] for i in nodes}
    for (u, v), w in edges.items():
        if u in adj and v in adj:
            adj[u].append((v, w))
            adj[v].append((u, w))
    level = {bs: 0}
    frontier = deque([bs])
    while frontier:
        u = frontier.popleft()
        for v, _ in adj[u]:
            if v not in level:
                level[v] = level[u] + 1
                frontier.append(v)
    if len(level) < len(adj):
        return None
    parent = {}
    for v in adj:
        if v == bs:
            continue
        parent[v] = min((w, u) for u, w in adj[v] if level[u] == level[v] - 1)[1]
    return parent


def tree_hops(tree: Mapping[int, int], bs: int) -> dict:
    hops = {}
    for v in tree:
        h, u = 0, v
        while u != bs:
            u = tree[u]
            h += 1
        hops[v] = h
    return hops


def tree_max_edge(tree: Mapping[int, int], edges: Mapping[tuple[int, int], float]) -> float:
    return max((edges[_edge(c, p)] for c, p in tree.items()), default=0.0)


def sptiep(problem: DesignProblem, h_max: int | None = None) -> DesignResult:
    """Minimise the largest edge of a spanning tree subject to the hop bound."""
    if h_max is None:
        h_max = hop_bound(problem.qos, problem.params)
    graph = dict(problem.edges)
    prev = None
    trace = []
    for k in itertools.count():
        tree = shortest_path_tree(problem.nodes, problem.bs, graph)
        hops = tree_hops(tree, problem.bs) if tree is not None else {}
        ok = tree is not None and h_max >= 1 and max(hops.values(), default=0) <= h_max
        wbar = tree_max_edge(tree, problem.edges) if tree is not None else math.nan
        trace.append(TraceRow(k, "prune", wbar, max(hops.values(), default=0) if tree else -1,
                              "hop-feasible" if ok else "hop-violation"))
        if not ok:
            if prev is None:
                return DesignResult(None, math.nan, {}, DesignStatus.INFEASIBLE, h_max, trace=trace)
            return DesignResult(prev, tree_max_edge(prev, problem.edges), tree_hops(prev, problem.bs),
                                DesignStatus.OPTIMAL_LONE_PACKET, h_max, trace=trace)
        prev = tree
        graph = {e: w for e, w in graph.items() if w < wbar}


# -- positive-load extension -------------------------------------------------------

def tree_model(problem: DesignProblem, tree: Mapping[int, int]) -> NetworkModel:
    """Network model for a candidate tree, every non-BS node a source at the QoS rate."""
    nodes = [NodeSpec(problem.bs, *problem.positions[problem.bs], role="bs")]
    for i in problem.sources:
        nodes.append(NodeSpec(i, *problem.positions[i], role="source", lambda_pps=problem.qos.lambda_pps,
                              link_per=problem.per(i, tree[i])))
    if problem.cs_range is None:
        ids = problem.nodes
        cs_sets = {i: [j for j in ids if j != i] for i in ids}
        return NetworkModel.build(nodes, problem.bs, tree, cs_sets=cs_sets)
    return NetworkModel.build(nodes, problem.bs, tree, cs_range=problem.cs_range)


Evaluator = Callable[[NetworkModel, ProtocolParams], PerfReport]


def analysis_evaluator(config: AnalysisConfig | None = None) -> Evaluator:
    def evaluate(model: NetworkModel, params: ProtocolParams) -> PerfReport:
        fp = solve(model, params, config)
        return qna_sweep(model, fp, params)
    return evaluate


def _verdict(report: PerfReport | None, qos: QoS) -> tuple[bool, float, float]:
    if report is None:
        return False, math.nan, math.nan
    worst_d = max(s.delay_s for s in report.per_source.values())
    worst_p = min(s.p_del for s in report.per_source.values())
    ok = report.converged and worst_d <= qos.d_max_s and worst_p >= qos.p_del
    return ok, worst_d * 1e3, worst_p


def extended_sptiep(problem: DesignProblem, evaluator: Evaluator | None = None,
                    h_max: int | None = None) -> DesignResult:
    """Start from the lone-packet optimum and re-admit longer edges, one
    distinct length at a time, until the evaluator certifies the QoS."""
    evaluator = evaluator or analysis_evaluator()
    base = sptiep(problem, h_max)
    trace = list(base.trace)
    if base.status is DesignStatus.INFEASIBLE:
        return base
    lengths = sorted(set(problem.edges.values()))
    examined: set[float] = set()
    tree = base.tree
    for k in itertools.count():
        try:
            report = evaluator(tree_model(problem, tree), problem.params)
        except (FixedPointError, ServiceDivergence) as exc:
            log.warning("analysis failed on candidate %d: %s", k, exc)
            report = None
        ok, worst_d, worst_p = _verdict(report, problem.qos)
        if report is not None and not report.converged:
            log.warning("analysis did not converge on candidate %d; treating it as QoS-infeasible", k)
        hops = tree_hops(tree, problem.bs)
        wbar = tree_max_edge(tree, problem.edges)
        trace.append(TraceRow(k, "augment", wbar, max(hops.values(), default=0),
                              "qos-met" if ok else "qos-violated", worst_d, worst_p))
        if ok:
            status = DesignStatus.OPTIMAL_LONE_PACKET if k == 0 else DesignStatus.FEASIBLE_POSITIVE_LOAD
            return DesignResult(dict(tree), wbar, hops, status, base.h_max, report, trace)
        pending = [w for w in lengths if w > wbar and w not in examined]
        if not pending:
            return DesignResult(dict(tree), wbar, hops, DesignStatus.POSSIBLY_INFEASIBLE, base.h_max,
                                report, trace)
        w_least = pending[0]
        graph = {e: w for e, w in problem.edges.items() if w <= w_least}
        examined.update(graph.values())
        tree = shortest_path_tree(problem.nodes, problem.bs, graph)


# -- scenario generation -----------------------------------------------------------

def lattice_points(area_m: float, cell_m: float) -> list[tuple[float, float]]:
    steps = area_m / cell_m
    if abs(steps - round(steps)) > 1e-9:
        raise ValueError("area must be a whole number of cells")
    k = int(round(steps)) + 1
    return [(cx * cell_m, cy * cell_m) for cy in range(k) for cx in range(k)]


def generate_scenario(seed: int, area_m: float = 50.0, cell_m: float = 10.0, n_sources: int = 10,
                      qos: QoS = QoS(), bs_position: tuple[float, float] = (0.0, 0.0),
                      params: ProtocolParams | None = None) -> DesignProblem:
    """Random sources on lattice points, BS on a fixed lattice point, complete candidate graph."""
    points = lattice_points(area_m, cell_m)
    bs_position = (float(bs_position[0]), float(bs_position[1]))
    if bs_position not in points:
        raise ValueError("base station must sit on a lattice point")
    free = [pt for pt in points if pt != bs_position]
    if n_sources > len(free):
        raise ValueError(f"{n_sources} sources do not fit on {len(free)} free lattice points")
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(free), size=n_sources, replace=False)
    positions = {0: bs_position}
    for k, idx in enumerate(sorted(int(i) for i in picks), start=1):
        positions[k] = free[idx]
    return DesignProblem.complete(positions, 0, qos, params=params or design_params())


# -- problem files -------------------------------------------------------------------

def problem_to_dict(problem: DesignProblem) -> dict:
    doc = {
        "bs_id": problem.bs,
        "nodes": [{"id": i, "x": x, "y": y} for i, (x, y) in sorted(problem.positions.items())],
        "edges": [[u, v, w] for (u, v), w in sorted(problem.edges.items())],
        "data_tx_symbols": problem.params.data_tx_symbols,
        "acks_enabled": problem.params.acks_enabled,
    }
    if problem.cs_range is not None:
        doc["cs_range_m"] = problem.cs_range
    if isinstance(problem.edge_per, (int, float)):
        doc["edge_per"] = problem.edge_per
    return doc


def problem_from_dict(doc: Mapping, qos: QoS = QoS()) -> DesignProblem:
    """Positions plus optional explicit edges; without edges every pair is a candidate."""
    positions = {int(n["id"]): (float(n["x"]), float(n["y"])) for n in doc["nodes"]}
    params = ProtocolParams(acks_enabled=bool(doc.get("acks_enabled", True)),
                            data_tx_symbols=int(doc.get("data_tx_symbols", design_params().data_tx_symbols)))
    kw = {"params": params, "cs_range": doc.get("cs_range_m"), "edge_per": doc.get("edge_per")}
    bs = int(doc["bs_id"])
    if "edges" not in doc:
        return DesignProblem.complete(positions, bs, qos, **kw)
    edges = {_edge(int(u), int(v)): float(w) for u, v, w in doc["edges"]}
    return DesignProblem(positions, bs, edges, qos, **kw)
