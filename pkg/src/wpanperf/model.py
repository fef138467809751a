"""Network data model, protocol constants and scenario I/O.

Every duration and rate held in memory is expressed in IEEE 802.15.4 symbol
times (16 us).  Scenario files and CSV outputs use seconds and packets per
second; the conversion happens at the boundary only.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Mapping

SYMBOL_TIME_S = 16e-6
SYMBOLS_PER_SECOND = 62500


def pps_to_per_symbol(rate_pps: float) -> float:
    return rate_pps / SYMBOLS_PER_SECOND


def per_symbol_to_pps(rate: float) -> float:
    return rate * SYMBOLS_PER_SECOND


def symbols_to_seconds(symbols: float) -> float:
    return symbols * SYMBOL_TIME_S


def seconds_to_symbols(seconds: float) -> float:
    return seconds / SYMBOL_TIME_S


class ScenarioError(ValueError):
    """Raised when a scenario violates one or more model invariants.

    ``errors`` holds every violation found, not only the first one.
    """

    def __init__(self, errors: Iterable[str]):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors) if self.errors else "invalid scenario")


@dataclass(frozen=True)
class ProtocolParams:
    slot: int = 20
    cca_duration: int = 8
    turnaround: int = 12
    ack_duration: int = 22
    ack_wait: int = 34
    mac_min_be: int = 3
    mac_max_be: int = 5
    mac_max_csma_backoffs: int = 4
    max_frame_retries: int = 3
    data_tx_symbols: int = 260
    acks_enabled: bool = True

    def __post_init__(self):
        errors = []
        if self.mac_min_be > self.mac_max_be:
            errors.append("macMinBE must not exceed macMaxBE")
        for f in ("slot", "cca_duration", "turnaround", "ack_duration", "ack_wait", "data_tx_symbols"):
            v = getattr(self, f)
            if not isinstance(v, int) or isinstance(v, bool) or v <= 0:
                errors.append(f"{f} must be a positive integer number of symbols, got {v!r}")
        if self.mac_max_csma_backoffs < 0 or self.max_frame_retries < 0 or self.mac_min_be < 0:
            errors.append("retry limits and backoff exponents must be non-negative")
        if errors:
            raise ScenarioError(errors)

    @property
    def t_tx(self) -> int:
        """Channel activity period of one transmission, in symbols."""
        if self.acks_enabled:
            return self.data_tx_symbols + self.turnaround + self.ack_duration
        return self.data_tx_symbols

    @property
    def max_transmissions(self) -> int:
        # without ACKs the sender cannot detect a failure, so it never retries
        return self.max_frame_retries + 1 if self.acks_enabled else 1

    @property
    def cca_attempts(self) -> int:
        return self.mac_max_csma_backoffs + 1

    def backoff_exponent(self, stage: int) -> int:
        return min(self.mac_min_be + stage, self.mac_max_be)

    def mean_backoff(self, stage: int) -> float:
        """Mean random backoff before the CCA of a given stage (0-based)."""
        return (2 ** self.backoff_exponent(stage) - 1) / 2 * self.slot

    def with_payload(self, payload_bytes: int, mac_overhead_bytes: int = 11, phy_overhead_bytes: int = 6):
        """Copy with the data frame sized for a MAC payload (2 symbols per octet)."""
        return replace(self, data_tx_symbols=2 * (payload_bytes + mac_overhead_bytes + phy_overhead_bytes))


@dataclass(frozen=True)
class NodeSpec:
    id: int
    x: float = 0.0
    y: float = 0.0
    role: str = "source"  # source | relay | bs
    lambda_pps: float = 0.0
    link_per: float = 0.0

    @property
    def position(self) -> tuple[float, float]:
        return (self.x, self.y)


def derive_cs_sets(positions: Mapping[int, tuple[float, float]], cs_range: float) -> dict[int, frozenset]:
    ids = sorted(positions)
    omega = {i: set() for i in ids}
    for a_pos, a in enumerate(ids):
        xa, ya = positions[a]
        for b in ids[a_pos + 1:]:
            xb, yb = positions[b]
            if math.hypot(xa - xb, ya - yb) <= cs_range:
                omega[a].add(b)
                omega[b].add(a)
    return {i: frozenset(s) for i, s in omega.items()}


def partition_interference(omega: Mapping[int, frozenset], parent: Mapping[int, int]):
    """Interference set of each transmitter's receiver, split by what the transmitter hears.

    I_r(i) is the receiver's CS set plus the receiver itself, minus i.  C1 holds
    the members i can sense (the receiver is always put there, being half
    duplex), C2 the hidden ones.
    """
    interf, c1, c2 = {}, {}, {}
    for i, r in parent.items():
        members = (set(omega.get(r, ())) | {r}) - {i}
        heard = members & (set(omega.get(i, ())) | {r})
        interf[i] = frozenset(members)
        c1[i] = frozenset(heard)
        c2[i] = frozenset(members - heard)
    return interf, c1, c2


def derive_neighborhoods(positions: Mapping[int, tuple[float, float]], cs_range: float, parent: Mapping[int, int]):
    omega = derive_cs_sets(positions, cs_range)
    interf, c1, c2 = partition_interference(omega, parent)
    return omega, c1, c2


@dataclass(frozen=True, eq=True)
class NetworkModel:
    nodes: tuple[NodeSpec, ...]
    bs: int
    parent: Mapping[int, int]
    omega: Mapping[int, frozenset]
    cs_range: float | None = None
    interference: Mapping[int, frozenset] = field(default_factory=dict)
    c1: Mapping[int, frozenset] = field(default_factory=dict)
    c2: Mapping[int, frozenset] = field(default_factory=dict)

    @classmethod
    def build(cls, nodes: Iterable[NodeSpec], bs: int, parent: Mapping[int, int],
              cs_range: float | None = None, cs_sets: Mapping[int, Iterable[int]] | None = None,
              validate: bool = True) -> "NetworkModel":
        nodes = tuple(sorted(nodes, key=lambda n: n.id))
        if cs_sets is not None:
            omega = {n.id: frozenset(cs_sets.get(n.id, ())) for n in nodes}
        elif cs_range is not None:
            omega = derive_cs_sets({n.id: n.position for n in nodes}, cs_range)
        else:
            raise ScenarioError(["either cs_range or cs_sets is required"])
        parent = {int(k): int(v) for k, v in sorted(parent.items())}
        interf, c1, c2 = partition_interference(omega, parent)
        model = cls(nodes, bs, parent, omega, cs_range, interf, c1, c2)
        if validate:
            model.validate()
        return model

    def validate(self) -> None:
        errors = []
        ids = [n.id for n in self.nodes]
        idset = set(ids)
        if len(idset) != len(ids):
            errors.append("duplicate node ids")
        if self.bs not in idset:
            errors.append(f"base station {self.bs} is not a node")
        if self.bs in self.parent:
            errors.append("base station must not have a parent")
        for n in self.nodes:
            if n.id == self.bs:
                continue
            if n.id not in self.parent:
                errors.append(f"node {n.id} has no parent")
            if not 0.0 <= n.link_per <= 1.0:
                errors.append(f"node {n.id}: link PER {n.link_per} outside [0,1]")
            if n.lambda_pps < 0:
                errors.append(f"node {n.id}: negative arrival rate")
            if n.role == "relay" and n.lambda_pps != 0:
                errors.append(f"node {n.id}: relay with nonzero arrival rate")
            if n.role not in ("source", "relay"):
                errors.append(f"node {n.id}: unknown role {n.role!r}")
        for c, p in self.parent.items():
            if c not in idset or p not in idset:
                errors.append(f"parent edge {c}->{p} references an unknown node")
        # every chain of parents must reach the BS without revisiting a node
        for start in self.parent:
            seen = {start}
            cur = start
            while cur in self.parent:
                cur = self.parent[cur]
                if cur in seen:
                    errors.append(f"not a tree: parent cycle through node {cur}")
                    break
                seen.add(cur)
            else:
                if cur != self.bs:
                    errors.append(f"not a tree: node {start} does not reach the base station")
        for i, s in self.omega.items():
            if i in s:
                errors.append(f"CS set of node {i} contains itself")
            for j in s:
                if j not in idset:
                    errors.append(f"CS set of node {i} references unknown node {j}")
                elif i not in self.omega.get(j, ()):
                    errors.append(f"asymmetric CS sets: {j} in CS set of {i} but not vice versa")
        for c, p in self.parent.items():
            if p in idset and p not in self.omega.get(c, ()):
                errors.append(f"node {c}: parent {p} is outside its CS range")
        if errors:
            # cycle messages repeat once per node on the cycle
            raise ScenarioError(dict.fromkeys(errors))

    # -- convenience views -------------------------------------------------
    @property
    def ids(self) -> list[int]:
        return [n.id for n in self.nodes]

    def node(self, i: int) -> NodeSpec:
        for n in self.nodes:
            if n.id == i:
                return n
        raise KeyError(i)

    @property
    def senders(self) -> list[int]:
        return [n.id for n in self.nodes if n.id != self.bs]

    @property
    def sources(self) -> list[int]:
        return [n.id for n in self.nodes if n.id != self.bs and n.role == "source"]

    def children(self, i: int) -> list[int]:
        return sorted(c for c, p in self.parent.items() if p == i)

    def path_to_bs(self, i: int) -> list[int]:
        """Transmitting nodes on the route of node i's packets (i included, BS excluded)."""
        path = [i]
        while self.parent[path[-1]] != self.bs:
            path.append(self.parent[path[-1]])
        return path

    def depth(self, i: int) -> int:
        return 0 if i == self.bs else len(self.path_to_bs(i))

    def leaf_to_root(self) -> list[int]:
        return sorted(self.senders, key=lambda i: (-self.depth(i), i))

    def has_hidden_nodes(self) -> bool:
        return any(self.c2.get(i) for i in self.senders)

    def with_rates(self, lambda_pps: float | Mapping[int, float]) -> "NetworkModel":
        """Copy with every source's arrival rate replaced."""
        if isinstance(lambda_pps, Mapping):
            get = lambda n: lambda_pps.get(n.id, n.lambda_pps)
        else:
            get = lambda n: lambda_pps
        nodes = tuple(replace(n, lambda_pps=float(get(n))) if n.role == "source" else n for n in self.nodes)
        return replace(self, nodes=nodes)


# -- scenario files ------------------------------------------------------------

def _protocol_overrides(params: ProtocolParams) -> dict:
    default = ProtocolParams()
    return {f.name: getattr(params, f.name) for f in fields(ProtocolParams)
            if f.name != "acks_enabled" and getattr(params, f.name) != getattr(default, f.name)}


def scenario_to_dict(model: NetworkModel, params: ProtocolParams | None = None, config=None) -> dict:
    params = params or ProtocolParams()
    doc = {
        "bs_id": model.bs,
        "nodes": [{"id": n.id, "x": n.x, "y": n.y, "role": n.role,
                   "lambda_pps": n.lambda_pps, "link_per": n.link_per} for n in model.nodes],
        "parent": {str(c): p for c, p in sorted(model.parent.items())},
        "acks_enabled": params.acks_enabled,
        "protocol": _protocol_overrides(params),
    }
    if model.cs_range is not None:
        doc["cs_range_m"] = model.cs_range
    else:
        doc["cs_sets"] = {str(i): sorted(s) for i, s in sorted(model.omega.items())}
    if config is not None:
        doc["analysis"] = config.to_dict()
    return doc


def save_scenario(path, model: NetworkModel, params: ProtocolParams | None = None, config=None) -> None:
    Path(path).write_text(json.dumps(scenario_to_dict(model, params, config), indent=2), encoding="utf-8")


def scenario_from_dict(doc: Mapping):
    from .fixedpoint import AnalysisConfig

    errors = []
    if not isinstance(doc, Mapping):
        raise ScenarioError(["scenario must be a JSON object"])
    for key in ("nodes", "bs_id", "parent"):
        if key not in doc:
            errors.append(f"missing key {key!r}")
    if "cs_range_m" not in doc and "cs_sets" not in doc:
        errors.append("one of 'cs_range_m' or 'cs_sets' is required")
    if errors:
        raise ScenarioError(errors)
    try:
        bs = int(doc["bs_id"])
        nodes = []
        for raw in doc["nodes"]:
            nid = int(raw["id"])
            role = raw.get("role", "bs" if nid == bs else "source")
            nodes.append(NodeSpec(nid, float(raw.get("x", 0.0)), float(raw.get("y", 0.0)), role,
                                  float(raw.get("lambda_pps", 0.0)), float(raw.get("link_per", 0.0))))
        parent = {int(k): int(v) for k, v in doc["parent"].items()}
        cs_sets = None
        if "cs_sets" in doc:  # explicit sets win over geometry
            cs_sets = {int(k): [int(x) for x in v] for k, v in doc["cs_sets"].items()}
        cs_range = None if cs_sets is not None else float(doc["cs_range_m"])
        overrides = dict(doc.get("protocol", {}))
        if "acks_enabled" in doc:
            overrides["acks_enabled"] = bool(doc["acks_enabled"])
        params = ProtocolParams(**overrides)
        config = AnalysisConfig.from_dict(doc.get("analysis", {}))
    except ScenarioError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ScenarioError([f"malformed scenario: {exc}"]) from exc
    model = NetworkModel.build(nodes, bs, parent, cs_range=cs_range, cs_sets=cs_sets)
    return model, params, config


def load_scenario(path):
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ScenarioError([f"malformed file {path}: {exc}"]) from exc
    return scenario_from_dict(doc)
