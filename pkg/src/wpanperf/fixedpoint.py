"""Per-node steady-state equations and the global fixed-point iteration.

The equation helpers accept scalars or numpy arrays (elementwise) so that the
solver can evaluate every node of a sweep at once.  All rates are per symbol
time and all durations are in symbol times.
"""
from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .model import NetworkModel, ProtocolParams, pps_to_per_symbol

MAX_BOORSTYN_NEIGHBOURS = 25


class FixedPointError(ArithmeticError):
    """A model equation produced NaN/inf or an out-of-range value."""

    def __init__(self, message: str, node=None, equation: str | None = None):
        self.node = node
        self.equation = equation
        where = []
        if node is not None:
            where.append(f"node {node}")
        if equation:
            where.append(f"equation {equation}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


class TeffModel(str, enum.Enum):
    MD_INFINITY = "mdinf"
    BOORSTYN = "boorstyn"


@dataclass(frozen=True)
class AnalysisConfig:
    tol: float = 1e-6
    max_iter: int = 10000
    damping: float = 0.5
    teff_model: TeffModel = TeffModel.BOORSTYN
    init_tau_per_sec: float = 10.0
    q_clamp: bool = True

    def __post_init__(self):
        if not 0 < self.damping <= 1:
            raise ValueError("damping must lie in (0, 1]")
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        object.__setattr__(self, "teff_model", TeffModel(self.teff_model))

    def to_dict(self) -> dict:
        return {"tol": self.tol, "max_iter": self.max_iter, "damping": self.damping,
                "teff_model": self.teff_model.value, "init_tau_per_sec": self.init_tau_per_sec,
                "q_clamp": self.q_clamp}

    @classmethod
    def from_dict(cls, doc: Mapping) -> "AnalysisConfig":
        return cls(**dict(doc))


# -- equation groups -----------------------------------------------------------

def eta_g_c(beta, tau_sum, window: float = 12.0):
    """Probability of attempting first, mean time to first attempt, and the
    probability of attempting inside the turnaround window of another node."""
    beta = np.asarray(beta, dtype=float)
    total = beta + tau_sum
    eta = beta / total
    g = 1.0 / total
    c = -np.expm1(-window * beta)
    if eta.ndim == 0:
        return float(eta), float(g), float(c)
    return eta, g, c


def perceived_rate(beta_j, b_j, q_j, alpha_hidden):
    """Attempt rate of node j over its non-transmitting time, as seen by a neighbour."""
    hbar = 1.0 - q_j + q_j * b_j
    if np.any(np.asarray(hbar) <= 0):
        raise FixedPointError("node is transmitting permanently (q=1, b=0)", equation="perceived rate")
    return beta_j * b_j * q_j * (1.0 - alpha_hidden) / hbar


def hidden_blocking(beta_j, eta_j, c_j, teff_j, tau_hidden_sum, tau_total_sum, t_tx):
    """CCA failure probability of node j caused only by nodes hidden from the observer."""
    share = tau_hidden_sum / (beta_j + tau_total_sum)
    num = share * (1.0 - c_j) * beta_j * t_tx
    den = eta_j + (1.0 - eta_j) * c_j + (1.0 - eta_j) * (1.0 - c_j) * beta_j * teff_j
    return num / den


def teff_md_infinity(zeta, t_tx):
    """Mean busy period of an M/D/inf queue with arrival rate zeta and service t_tx."""
    zeta = np.asarray(zeta, dtype=float)
    x = zeta * t_tx
    small = x < 1e-8
    safe = np.where(small, 1.0, zeta)
    out = np.where(small, t_tx * (1.0 + x / 2.0), np.expm1(np.where(small, 0.0, x)) / safe)
    return float(out) if out.ndim == 0 else out


def independence_polynomial(weights: Sequence[float], adjacency: Sequence[int]) -> float:
    """Sum over all independent sets (empty set included) of the product of weights.

    ``adjacency[v]`` is a bitmask of the neighbours of vertex v.
    """
    single, multi = _independent_set_sums(weights, adjacency)
    return 1.0 + single + multi


def _independent_set_sums(weights, adjacency):
    """(sum over singletons, sum over independent sets of two or more vertices)."""
    nonempty: dict[int, float] = {0: 0.0}
    multi: dict[int, float] = {0: 0.0}

    def y(mask: int) -> float:
        hit = nonempty.get(mask)
        if hit is not None:
            return hit
        v = (mask & -mask).bit_length() - 1
        rest = mask & ~(1 << v)
        free = rest & ~adjacency[v]
        nonempty[mask] = y(rest) + weights[v] * (1.0 + y(free))
        return nonempty[mask]

    def h(mask: int) -> float:
        hit = multi.get(mask)
        if hit is not None:
            return hit
        v = (mask & -mask).bit_length() - 1
        rest = mask & ~(1 << v)
        multi[mask] = h(rest) + weights[v] * y(rest & ~adjacency[v])
        return multi[mask]

    return float(sum(weights)), h((1 << len(weights)) - 1)


def teff_boorstyn(beta_i: float, taus: Mapping[int, float], omega: Mapping[int, frozenset], t_tx: float,
                  node=None) -> float:
    """Dilated activity period from the stationary idle probability of the
    conflict-graph CTMC over the node and its CS set.

    The tagged node conflicts with all of its neighbours, so its only
    independent set is itself; what remains beyond 1 + beta*T + zeta*T is the
    weight of sets of two or more neighbours active together.
    """
    nbrs = sorted(taus)
    zeta = sum(taus.values())
    if not nbrs or zeta <= 0.0:
        return float(t_tx)
    if len(nbrs) > MAX_BOORSTYN_NEIGHBOURS:
        raise FixedPointError(f"CS set of size {len(nbrs)} exceeds the independent-set enumeration cap",
                              node=node, equation="T_eff (Boorstyn)")
    pos = {j: k for k, j in enumerate(nbrs)}
    adjacency = []
    for j in nbrs:
        mask = 0
        for k in omega.get(j, ()):
            if k in pos:
                mask |= 1 << pos[k]
        adjacency.append(mask)
    _, multi = _independent_set_sums([taus[j] * t_tx for j in nbrs], adjacency)
    return float(t_tx) + multi / zeta


def cca_failure(eta, c, beta, teff):
    busy = (1.0 - eta) * (1.0 - c) * beta * teff
    return busy / (eta + (1.0 - eta) * c + busy)


def collision_probability(eta, c, beta, zeta, tau_c1, hbar_c2_prod, tau_c2_uncond, t_tx, window: float = 12.0):
    """Packet collision probability from the five collision scenarios.

    tau_c1: summed perceived rates of the heard interferers; zeta: summed
    perceived rates over the whole CS set; hbar_c2_prod: probability that no
    hidden interferer is transmitting; tau_c2_uncond: summed unconditional
    successful-attempt rates of the hidden interferers.
    """
    total = beta + zeta
    none_busy = hbar_c2_prod
    later = 1.0 - np.exp(-window * tau_c1) * np.exp(-t_tx * tau_c2_uncond)
    r1 = eta * (1.0 - none_busy)
    r2 = (1.0 - eta) * c * (1.0 - none_busy)
    r3 = eta * none_busy * later
    r4 = (tau_c1 / total) * c * none_busy
    r5 = ((zeta - tau_c1) / total) * c * none_busy * later
    return (r1 + r2 + r3 + r4 + r5) / (eta + (1.0 - eta) * c)


def packet_failure(p, link_per):
    return p + (1.0 - p) * link_per


def backoff_constants(params: ProtocolParams):
    """Per-stage mean backoff+CCA durations and their running sums."""
    stages = [params.mean_backoff(m) + params.cca_duration for m in range(params.cca_attempts)]
    cumulative = list(np.cumsum(stages))
    return stages, cumulative


@dataclass
class ServiceTerms:
    sigma: object
    delta: object
    mean_backoff: object
    b: object
    beta: object
    t_success_backoff: object = None
    t_discard_backoff: object = None


def service_and_discard(alpha, gamma, params: ProtocolParams) -> ServiceTerms:
    """Service rate, discard probability, backoff fraction and CCA attempt rate."""
    alpha = np.asarray(alpha, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    if np.any(alpha >= 1.0):
        raise FixedPointError("CCA failure probability reached 1: backoff never ends", equation="sigma")
    stages, cumulative = backoff_constants(params)
    m = params.cca_attempts
    t_tx = params.t_tx
    powers = [alpha ** k for k in range(m)]
    a_all = alpha ** m  # every CCA of one attempt fails
    mean_backoff = sum(p * s for p, s in zip(powers, stages))
    beta = sum(powers) / mean_backoff
    b = mean_backoff / (mean_backoff + (1.0 - a_all) * t_tx)
    t_success = sum(p * (1.0 - alpha) * cum for p, cum in zip(powers, cumulative)) / (1.0 - a_all)
    t_discard = cumulative[-1]
    z = 0.0
    y = 0.0
    delta = 1.0
    for _ in range(params.max_transmissions):
        z = a_all * t_discard + (1.0 - a_all) * (t_success + gamma * z)
        y = (1.0 - a_all) * (t_tx + gamma * y)
        delta = a_all + (1.0 - a_all) * gamma * delta
    sigma = 1.0 / (z + y)
    return ServiceTerms(sigma, delta, mean_backoff, b, beta, t_success, t_discard)


def arrivals_and_queue(lam, child_thetas, delta, sigma, clamp: bool = True):
    nu = lam + sum(child_thetas)
    theta = nu * (1.0 - delta)
    q = nu / sigma
    if clamp:
        q = min(q, 1.0)
    return nu, theta, q


# -- solver --------------------------------------------------------------------

@dataclass
class NodeUnknowns:
    alpha: float
    q: float
    b: float
    beta: float
    gamma: float
    delta: float
    nu: float
    theta: float
    sigma: float
    t_eff: float
    tau_perceived: dict
    tau_uncond: float
    hbar: float
    p: float = 0.0
    eta: float = 0.0
    c: float = 0.0
    alpha_hidden: dict = field(default_factory=dict)


@dataclass
class FixedPointResult:
    unknowns: dict
    iterations: int
    converged: bool
    residual: float
    stability_sum: float
    teff_model: TeffModel = TeffModel.BOORSTYN
    history: list = field(default_factory=list, repr=False)


class Stability(str, enum.Enum):
    STABLE = "stable"
    MARGINAL = "marginal"
    UNSTABLE = "unstable"


class _Layout:
    """Index bookkeeping and constant masks for one model."""

    def __init__(self, model: NetworkModel):
        self.ids = model.ids
        self.n = len(self.ids)
        self.pos = {i: k for k, i in enumerate(self.ids)}
        n = self.n
        self.bs = self.pos[model.bs]
        self.active = np.ones(n, dtype=bool)
        self.active[self.bs] = False
        self.omega = np.zeros((n, n))
        self.c1 = np.zeros((n, n), dtype=bool)
        self.c2 = np.zeros((n, n), dtype=bool)
        for i in self.ids:
            for j in model.omega[i]:
                self.omega[self.pos[i], self.pos[j]] = 1.0
        for i in model.senders:
            for j in model.c1[i]:
                self.c1[self.pos[i], self.pos[j]] = True
            for j in model.c2[i]:
                self.c2[self.pos[i], self.pos[j]] = True
        self.omega_self = self.omega + np.eye(n)
        self.lam = np.array([pps_to_per_symbol(model.node(i).lambda_pps) if i != model.bs else 0.0
                             for i in self.ids])
        self.per = np.array([model.node(i).link_per for i in self.ids])
        self.children = np.zeros((n, n))
        for c, p in model.parent.items():
            self.children[self.pos[p], self.pos[c]] = 1.0
        # nodes that will ever hold a packet: a source somewhere in their subtree
        loaded = set()
        for s in model.senders:
            if model.node(s).lambda_pps > 0:
                loaded.update(model.path_to_bs(s))
        self.loaded = np.array([i in loaded for i in self.ids])
        self.omega_sets = {k: frozenset(self.pos[j] for j in model.omega[i]) for k, i in enumerate(self.ids)}
        self.hidden_free = not model.has_hidden_nodes()


def _check(name: str, values: np.ndarray, layout: _Layout, lo=None, hi=None, tol=1e-9) -> np.ndarray:
    bad = ~np.isfinite(values)
    if lo is not None:
        bad |= values < lo - tol
    if hi is not None:
        bad |= values > hi + tol
    if values.ndim == 2:
        bad = bad.any(axis=1)
    bad &= layout.active
    if bad.any():
        k = int(np.flatnonzero(bad)[0])
        raise FixedPointError("non-finite or out-of-range value", node=layout.ids[k], equation=name)
    if lo is not None or hi is not None:
        values = np.clip(values, lo if lo is not None else -np.inf, hi if hi is not None else np.inf)
    return values


def _sweep(state: dict, layout: _Layout, params: ProtocolParams, config: AnalysisConfig) -> dict:
    """One Jacobi evaluation of every equation group from the previous iterate."""
    t_tx = float(params.t_tx)
    alpha, q, tau, theta = state["alpha"], state["q"], state["tau"], state["theta"]
    act = layout.active

    svc = service_and_discard(alpha, np.zeros_like(alpha), params)
    beta, b = svc.beta, svc.b
    zeta = tau.sum(axis=1)
    eta, g, c = eta_g_c(beta, zeta)

    if layout.hidden_free:
        teff = np.full(layout.n, t_tx)
    elif config.teff_model is TeffModel.MD_INFINITY:
        teff = teff_md_infinity(zeta, t_tx)
    else:
        teff = np.full(layout.n, t_tx)
        for k in np.flatnonzero(act):
            nb = layout.omega_sets[k]
            taus = {j: tau[k, j] for j in nb if tau[k, j] > 0.0}
            teff[k] = teff_boorstyn(beta[k], taus, layout.omega_sets, t_tx, node=layout.ids[k])
    teff = _check("T_eff", teff, layout, lo=t_tx, hi=None)

    alpha_new = _check("alpha", cca_failure(eta, c, beta, teff), layout, 0.0, 1.0)

    # alpha_hidden[j, i]: failures of j caused by nodes that i (and only i's CS set) cannot hear
    hidden_sum = zeta[:, None] - tau @ layout.omega_self.T
    hidden_sum = np.maximum(hidden_sum, 0.0) * layout.omega.T
    alpha_hidden = hidden_blocking(beta[:, None], eta[:, None], c[:, None], teff[:, None],
                                   hidden_sum, zeta[:, None], t_tx)
    alpha_hidden = _check("alpha_hidden", alpha_hidden, layout, 0.0, 1.0)

    hbar = 1.0 - q + q * b
    rate_j = beta * b * q / hbar  # attempt rate over non-transmitting time, before blocking
    tau_new = layout.omega * rate_j[None, :] * (1.0 - alpha_hidden.T)
    tau_new = _check("tau_perceived", tau_new, layout, 0.0, None)
    tau_uncond = rate_j * (1.0 - alpha)

    tau_c1 = (tau * layout.c1).sum(axis=1)
    hbar_c2 = np.where(layout.c2, hbar[None, :], 1.0).prod(axis=1)
    tau_c2 = (layout.c2 * tau_uncond[None, :]).sum(axis=1)
    p = _check("p", collision_probability(eta, c, beta, zeta, tau_c1, hbar_c2, tau_c2, t_tx), layout, 0.0, 1.0)
    gamma = _check("gamma", packet_failure(p, layout.per), layout, 0.0, 1.0)

    svc = service_and_discard(np.where(act, alpha_new, 0.0), gamma, params)
    delta = _check("delta", svc.delta, layout, 0.0, 1.0)
    sigma = _check("sigma", svc.sigma, layout, 0.0, None)

    nu = layout.lam + layout.children @ theta
    q_new = nu / sigma
    if config.q_clamp:
        q_new = np.minimum(q_new, 1.0)
    # a saturated queue forwards at its service rate, not its arrival rate
    theta_new = np.minimum(nu, sigma) * (1.0 - delta)
    q_new = _check("q", q_new, layout, 0.0, 1.0)

    for arr in (alpha_new, q_new, theta_new, nu, gamma, delta, p):
        arr[layout.bs] = 0.0
    tau_new[layout.bs, :] = 0.0
    tau_new[:, layout.bs] = 0.0
    return {
        "alpha": alpha_new, "q": q_new, "tau": tau_new, "theta": theta_new,
        "b": svc.b, "beta": svc.beta, "gamma": gamma, "delta": delta, "nu": nu, "sigma": sigma,
        "t_eff": teff, "tau_uncond": tau_uncond, "hbar": hbar, "p": p, "eta": eta, "c": c,
        "alpha_hidden": alpha_hidden,
    }


_STATE_KEYS = ("alpha", "q", "tau", "theta")
_REPORT_KEYS = ("alpha", "q", "theta", "b", "beta", "gamma", "delta", "nu", "sigma", "t_eff", "tau_uncond")


def _relative_change(old: np.ndarray, new: np.ndarray) -> float:
    if old.size == 0:
        return 0.0
    return float(np.max(np.abs(new - old) / np.maximum(np.abs(old), 1e-12)))


def solve(model: NetworkModel, params: ProtocolParams | None = None,
          config: AnalysisConfig | None = None) -> FixedPointResult:
    """Iterate the per-node equations to a fixed point (damped Jacobi scheme)."""
    params = params or ProtocolParams()
    config = config or AnalysisConfig()
    layout = _Layout(model)
    n = layout.n
    init_tau = pps_to_per_symbol(config.init_tau_per_sec)
    state = {
        "alpha": np.zeros(n),
        "q": np.zeros(n),
        # nodes with no upstream source never attempt; start them (and the BS) at zero
        "tau": layout.omega * np.where(layout.loaded, init_tau, 0.0)[None, :],
        "theta": np.zeros(n),
    }
    state["tau"][:, layout.bs] = 0.0
    d = config.damping
    act = layout.active

    best = None
    prev_out = None
    residual = math.inf
    converged = False
    it = 0
    history = []
    for it in range(1, config.max_iter + 1):
        out = _sweep(state, layout, params, config)
        new_state = {k: state[k] + d * (out[k] - state[k]) if d < 1.0 else out[k] for k in _STATE_KEYS}
        changes = [_relative_change(state[k][act], new_state[k][act]) for k in ("alpha", "q", "theta")]
        mask = layout.omega.astype(bool)
        changes.append(_relative_change(state["tau"][mask], new_state["tau"][mask]))
        if prev_out is not None:
            changes += [_relative_change(prev_out[k][act], out[k][act]) for k in _REPORT_KEYS]
        residual = max(changes)
        history.append(residual)
        if best is None or residual < best[0]:
            best = (residual, out, it)
        state = new_state
        prev_out = out
        if residual <= config.tol:
            converged = True
            break

    if not converged:
        residual, out, _ = best
    unknowns = _collect(out, layout)
    total_q = float(sum(u.q for u in unknowns.values()))
    return FixedPointResult(unknowns, it, converged, residual, total_q, config.teff_model, history)


def _collect(out: dict, layout: _Layout) -> dict:
    unknowns = {}
    for k, i in enumerate(layout.ids):
        if k == layout.bs:
            continue
        nbrs = sorted(layout.omega_sets[k])
        unknowns[i] = NodeUnknowns(
            alpha=float(out["alpha"][k]), q=float(out["q"][k]), b=float(out["b"][k]),
            beta=float(out["beta"][k]), gamma=float(out["gamma"][k]), delta=float(out["delta"][k]),
            nu=float(out["nu"][k]), theta=float(out["theta"][k]), sigma=float(out["sigma"][k]),
            t_eff=float(out["t_eff"][k]),
            tau_perceived={layout.ids[j]: float(out["tau"][k, j]) for j in nbrs},
            tau_uncond=float(out["tau_uncond"][k]), hbar=float(out["hbar"][k]), p=float(out["p"][k]),
            eta=float(out["eta"][k]), c=float(out["c"][k]),
            alpha_hidden={layout.ids[j]: float(out["alpha_hidden"][j, k]) for j in nbrs},
        )
    return unknowns


def stability_check(result: FixedPointResult) -> Stability:
    """Classify the solution by the summed queue non-empty probabilities."""
    s = result.stability_sum
    if s < 0.9:
        return Stability.STABLE
    if s < 1.0:
        return Stability.MARGINAL
    warnings.warn(f"sum of queue non-empty probabilities is {s:.3f} >= 1: the sufficient stability "
                  "condition fails and fixed-point outputs may be invalid", RuntimeWarning, stacklevel=2)
    return Stability.UNSTABLE
