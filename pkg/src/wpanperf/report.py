"""CSV emission and analysis-versus-simulation comparison."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

from .fixedpoint import FixedPointResult
from .model import per_symbol_to_pps, symbols_to_seconds
from .qna import PerfReport
from .sim import SimStats

NODE_COLUMNS = ["lambda_pps", "node", "alpha", "gamma", "p", "delta", "q", "b", "beta_per_s", "sigma_per_s",
                "theta_pps", "t_eff_ms", "E_S_ms", "c_S2", "rho", "sojourn_ms"]
SOURCE_COLUMNS = ["lambda_pps", "source", "hops", "delay_ms", "p_del"]
SIM_NODE_CI = ["alpha", "gamma", "delta", "q", "b", "sojourn_ms"]
SIM_SOURCE_CI = ["delay_ms", "p_del"]
SIM_NODE_COLUMNS = NODE_COLUMNS + [c + "_ci" for c in SIM_NODE_CI]
SIM_SOURCE_COLUMNS = SOURCE_COLUMNS + [c + "_ci" for c in SIM_SOURCE_CI]
STABILITY_COLUMNS = ["lambda_pps", "sum_q", "status", "converged", "iterations", "residual"]
COMPARE_COLUMNS = ["lambda_pps", "kind", "id", "metric", "analysis", "simulation", "simulation_ci",
                   "rel_error", "band"]
SUMMARY_COLUMNS = ["lambda_pps", "metric", "mean_rel_error", "band", "low_rate"]

NODE_COMPARE_METRICS = ("alpha", "gamma", "delta", "q")
SOURCE_COMPARE_METRICS = ("delay_ms", "p_del")


def _ms(symbols: float) -> float:
    return symbols_to_seconds(symbols) * 1e3


def analysis_node_rows(lam: float, fp: FixedPointResult, perf: PerfReport) -> list[dict]:
    rows = []
    for i in sorted(fp.unknowns):
        u, d = fp.unknowns[i], perf.per_node[i]
        rows.append({
            "lambda_pps": lam, "node": i, "alpha": u.alpha, "gamma": u.gamma, "p": u.p, "delta": u.delta,
            "q": u.q, "b": u.b, "beta_per_s": per_symbol_to_pps(u.beta), "sigma_per_s": per_symbol_to_pps(u.sigma),
            "theta_pps": per_symbol_to_pps(u.theta), "t_eff_ms": _ms(u.t_eff), "E_S_ms": _ms(d.E_S),
            "c_S2": d.c_S2, "rho": d.rho, "sojourn_ms": _ms(d.sojourn),
        })
    return rows


def analysis_source_rows(lam: float, perf: PerfReport) -> list[dict]:
    return [{"lambda_pps": lam, "source": s, "hops": v.hops, "delay_ms": v.delay_ms, "p_del": v.p_del}
            for s, v in sorted(perf.per_source.items())]


def sim_node_rows(lam: float, st: SimStats) -> list[dict]:
    rows = []
    for i in sorted(st.per_node):
        v = st.per_node[i]
        row = {c: "" for c in SIM_NODE_COLUMNS}
        row.update(lambda_pps=lam, node=i)
        for c in SIM_NODE_CI:
            row[c] = v[c]
            row[c + "_ci"] = st.node_ci.get(i, {}).get(c, math.nan)
        rows.append(row)
    return rows


def sim_source_rows(lam: float, st: SimStats) -> list[dict]:
    rows = []
    for s in sorted(st.per_source):
        v = st.per_source[s]
        row = {"lambda_pps": lam, "source": s, "hops": v["hops"]}
        for c in SIM_SOURCE_CI:
            row[c] = v[c]
            row[c + "_ci"] = st.source_ci.get(s, {}).get(c, math.nan)
        rows.append(row)
    return rows


def _fmt(v):
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf"
        return f"{v:.10g}"
    return v


def write_csv(path, columns: list[str], rows: list[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k, "")) for k in columns})
    return path


# -- comparison ------------------------------------------------------------------

def rel_error(sim: float, analysis: float) -> float:
    """(simulation - analysis) / simulation."""
    if math.isnan(sim) or math.isnan(analysis):
        return math.nan
    if sim == analysis:
        return 0.0
    if sim == 0.0 or math.isinf(analysis):
        return -math.inf if analysis > sim else math.inf
    return (sim - analysis) / sim


def band(err: float) -> str:
    """ok within 10%; + / ++ analysis overestimates; - / -- analysis underestimates."""
    if math.isnan(err):
        return "na"
    if abs(err) <= 0.10:
        return "ok"
    if err < 0:
        return "+" if err >= -0.25 else "++"
    return "-" if err <= 0.25 else "--"


@dataclass
class CompareReport:
    rows: list = field(default_factory=list)
    summary: list = field(default_factory=list)
    violations: list = field(default_factory=list)

    def add_point(self, lam: float, fp: FixedPointResult, perf: PerfReport, st: SimStats,
                  tol_source: float = 0.15, tol_sum_q: float = 0.10, sum_q_max_lambda: float = 6.0):
        low_rate = max((u.delta for u in fp.unknowns.values()), default=0.0) <= 0.01
        errs: dict[str, list] = {}

        def add(kind, ident, metric, a, s, ci):
            e = rel_error(s, a)
            self.rows.append({"lambda_pps": lam, "kind": kind, "id": ident, "metric": metric, "analysis": a,
                              "simulation": s, "simulation_ci": ci, "rel_error": e, "band": band(e)})
            if not math.isnan(e):
                errs.setdefault(metric, []).append(e)
            return e

        for i in sorted(fp.unknowns):
            u = fp.unknowns[i]
            v = st.per_node[i]
            for m in NODE_COMPARE_METRICS:
                add("node", i, m, getattr(u, m), v[m], st.node_ci.get(i, {}).get(m, math.nan))
        for s in sorted(perf.per_source):
            a = perf.per_source[s]
            v = st.per_source[s]
            for m, av in (("delay_ms", a.delay_ms), ("p_del", a.p_del)):
                e = add("source", s, m, av, v[m], st.source_ci.get(s, {}).get(m, math.nan))
                if low_rate and not abs(e) <= tol_source:
                    self.violations.append(f"lambda={lam} source {s} {m}: relative error {e:.3f}")
        e = add("network", "all", "sum_q", fp.stability_sum, st.sum_q, st.sum_q_ci)
        if lam <= sum_q_max_lambda and not abs(e) <= tol_sum_q:
            self.violations.append(f"lambda={lam} sum_q: relative error {e:.3f}")
        for m, es in errs.items():
            mean = sum(es) / len(es)
            self.summary.append({"lambda_pps": lam, "metric": m, "mean_rel_error": mean, "band": band(mean),
                                 "low_rate": low_rate})

    @property
    def ok(self) -> bool:
        return not self.violations
