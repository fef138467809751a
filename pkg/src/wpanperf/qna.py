"""End-to-end delay (two-moment queueing network decomposition) and delivery probability."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .fixedpoint import FixedPointResult
from .model import NetworkModel, ProtocolParams, pps_to_per_symbol, symbols_to_seconds


class ServiceDivergence(ArithmeticError):
    pass


def service_mgf(z, beta, alpha, gamma, t_tx):
    """Laplace-Stieltjes transform E[exp(-zS)] of the HOL service time.

    Backoffs are exponential with rate beta, a backoff ends in a transmission
    with probability 1-alpha, and a transmission fails with probability gamma;
    CCA failures and retransmissions are not capped here.
    """
    a = beta * (1.0 - alpha)
    e = np.exp(-z * t_tx)
    return a * (1.0 - gamma) * e / (z + a * (1.0 - gamma * e))


def service_moments(beta: float, alpha: float, gamma: float, t_tx: float):
    """First two moments and squared coefficient of variation of the service time.

    Differentiating the transform at 0 gives the moments of a geometric
    (success probability 1-gamma) number of rounds, each an Exp(beta(1-alpha))
    wait followed by t_tx:
        E[S]   = m / (1-gamma),                  m = 1/a + t_tx
        Var[S] = 1/(a^2 (1-gamma)) + gamma m^2 / (1-gamma)^2
    """
    if gamma >= 1.0:
        raise ServiceDivergence("service time diverges: every transmission fails")
    if alpha >= 1.0 or beta <= 0.0:
        raise ServiceDivergence("service time diverges: no CCA ever succeeds")
    a = beta * (1.0 - alpha)
    succ = 1.0 - gamma
    m = 1.0 / a + t_tx
    mean = m / succ
    var = 1.0 / (a * a * succ) + gamma * m * m / (succ * succ)
    second = var + mean * mean
    return mean, second, second / (mean * mean) - 1.0


@dataclass
class NodeDelay:
    E_S: float
    E_S2: float
    c_S2: float
    arrival_rate: float
    rho: float
    c_A2: float
    c_D2: float
    sojourn: float  # symbols; inf when rho >= 1

    @property
    def stable(self) -> bool:
        return math.isfinite(self.sojourn)


@dataclass
class SourcePerf:
    delay_s: float
    p_del: float
    hops: int
    path: list = field(default_factory=list)

    @property
    def delay_ms(self) -> float:
        return self.delay_s * 1e3


@dataclass
class PerfReport:
    per_node: dict
    per_source: dict
    stability_sum: float = 0.0
    converged: bool = True

    def meets(self, p_del_min: float, d_max_s: float) -> bool:
        return self.converged and all(s.p_del >= p_del_min and s.delay_s <= d_max_s
                                      for s in self.per_source.values())


def qna_sweep(model: NetworkModel, fp: FixedPointResult, params: ProtocolParams | None = None) -> PerfReport:
    """Propagate arrival variability from the leaves to the base station and
    accumulate per-hop sojourn times and survival probabilities per source."""
    params = params or ProtocolParams()
    # one attempt holds the HOL packet for the sender's turnaround plus the activity period
    t_attempt = params.turnaround + params.t_tx
    per_node: dict[int, NodeDelay] = {}
    for i in model.leaf_to_root():
        u = fp.unknowns[i]
        lam = pps_to_per_symbol(model.node(i).lambda_pps)
        kids = model.children(i)
        arrivals = lam + sum(fp.unknowns[k].theta for k in kids)
        e_s, e_s2, c_s2 = service_moments(u.beta, u.alpha, u.gamma, t_attempt)
        if arrivals > 0.0:
            c_a2 = (lam + sum(per_node[k].arrival_rate * per_node[k].c_D2 for k in kids)) / arrivals
        else:
            c_a2 = 1.0
        rho = arrivals * e_s
        if rho < 1.0:
            sojourn = rho * e_s * (c_a2 + c_s2) / (2.0 * (1.0 - rho)) + e_s
            c_d2 = (1.0 - u.delta) * (1.0 + rho ** 2 * (c_s2 - 1.0) + (1.0 - rho ** 2) * (c_a2 - 1.0))
        else:
            sojourn = math.inf
            # a saturated server emits its service process
            c_d2 = (1.0 - u.delta) * c_s2
        per_node[i] = NodeDelay(e_s, e_s2, c_s2, arrivals, rho, c_a2, c_d2, sojourn)

    per_source = {}
    for s in model.sources:
        path = model.path_to_bs(s)
        delay = sum(per_node[i].sojourn for i in path)
        p_del = math.prod(1.0 - fp.unknowns[i].delta for i in path)
        per_source[s] = SourcePerf(symbols_to_seconds(delay), p_del, len(path), path)
    return PerfReport(per_node, per_source, fp.stability_sum, fp.converged)


def analyze(model: NetworkModel, params: ProtocolParams | None = None, config=None):
    """Fixed point followed by the delay sweep."""
    from .fixedpoint import solve

    params = params or ProtocolParams()
    fp = solve(model, params, config)
    return fp, qna_sweep(model, fp, params)
