"""Command-line front end: analyze, simulate, compare, design, gen-scenario.

Exit codes: 0 success, 1 usage or input error, 2 fixed point did not
converge, 3 compare found an accuracy violation.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import warnings
from dataclasses import replace
from pathlib import Path

from . import design as dz
from .fixedpoint import AnalysisConfig, FixedPointError, TeffModel, solve, stability_check
from .model import ScenarioError, load_scenario, save_scenario
from .qna import ServiceDivergence, qna_sweep
from .report import (COMPARE_COLUMNS, NODE_COLUMNS, SIM_NODE_COLUMNS, SIM_SOURCE_COLUMNS, SOURCE_COLUMNS,
                     STABILITY_COLUMNS, SUMMARY_COLUMNS, CompareReport, analysis_node_rows, analysis_source_rows,
                     sim_node_rows, sim_source_rows, write_csv)
from .scenarios import from_name
from .sim import SimConfig, replicate

EXIT_OK, EXIT_USAGE, EXIT_CONVERGENCE, EXIT_ACCEPTANCE = 0, 1, 2, 3
OUT_DIR_ENV = "WPANPERF_OUT_DIR"

log = logging.getLogger("wpanperf")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _floats(text: str) -> list[float]:
    try:
        vals = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}")
    if not vals or any(v < 0 for v in vals):
        raise argparse.ArgumentTypeError("need at least one non-negative rate")
    return vals


def _qos(text: str) -> dz.QoS:
    try:
        return dz.QoS.parse(text)
    except (ValueError, TypeError) as exc:
        raise argparse.ArgumentTypeError(str(exc))


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="wpanperf", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, lambdas=True):
        sp.add_argument("--out-dir", type=Path, default=None,
                        help=f"output directory (default ${OUT_DIR_ENV} or ./out)")
        sp.add_argument("--seed", type=int, default=1)
        if lambdas:
            sp.add_argument("--lambda-list", type=_floats, default=None,
                            help="comma-separated per-source rates in packets/s (default: rates in the file)")

    def analysis(sp):
        sp.add_argument("--teff-model", choices=[m.value for m in TeffModel], default=None)
        sp.add_argument("--damping", type=float, default=None)
        sp.add_argument("--max-iter", type=int, default=None)

    def simulation(sp):
        sp.add_argument("--duration-s", type=float, default=1500.0)
        sp.add_argument("--warmup-s", type=float, default=50.0)
        sp.add_argument("--reps", type=int, default=25)
        sp.add_argument("--workers", type=int, default=1)
        sp.add_argument("--no-acks", action="store_true")

    sp = sub.add_parser("analyze", help="fixed point and delay analysis over a rate sweep")
    sp.add_argument("--scenario", type=Path, required=True)
    common(sp)
    analysis(sp)

    sp = sub.add_parser("simulate", help="replicated CSMA/CA simulation over a rate sweep")
    sp.add_argument("--scenario", type=Path, required=True)
    common(sp)
    simulation(sp)

    sp = sub.add_parser("compare", help="analysis versus simulation with error bands")
    sp.add_argument("--scenario", type=Path, required=True)
    common(sp)
    analysis(sp)
    simulation(sp)
    sp.add_argument("--tolerance", type=float, default=0.15,
                    help="allowed relative error of per-source delay and delivery in the low-rate regime")
    sp.add_argument("--sum-q-tolerance", type=float, default=0.10)

    sp = sub.add_parser("design", help="QoS-constrained tree design")
    sp.add_argument("--scenario", type=Path, default=None,
                    help="design problem JSON (default: a generated lattice scenario for --seed)")
    common(sp, lambdas=False)
    sp.add_argument("--qos", type=_qos, default=dz.QoS(), help="p=0.01,pdel=0.95,dmax-ms=25,lambda-pps=1")
    sp.add_argument("--h-max", type=int, default=None, help="override the lone-packet hop bound")
    sp.add_argument("--validate-sim", action="store_true", help="simulate the final design")
    sp.add_argument("--duration-s", type=float, default=300.0)
    sp.add_argument("--reps", type=int, default=10)

    sp = sub.add_parser("gen-scenario", help="write a generated scenario file")
    sp.add_argument("name", help="tree-nN-CSm[-PERl], treeR-..., star-..., line-..., or 'lattice'")
    sp.add_argument("--seed", type=int, default=1)
    sp.add_argument("--lambda-pps", type=float, default=1.0)
    sp.add_argument("--out", type=Path, required=True)
    return p


def _out_dir(args) -> Path:
    d = args.out_dir or Path(os.environ.get(OUT_DIR_ENV) or "out")
    d.mkdir(parents=True, exist_ok=True)
    return d


def _analysis_config(args, base: AnalysisConfig) -> AnalysisConfig:
    kw = {}
    if getattr(args, "teff_model", None):
        kw["teff_model"] = TeffModel(args.teff_model)
    if getattr(args, "damping", None) is not None:
        kw["damping"] = args.damping
    if getattr(args, "max_iter", None) is not None:
        kw["max_iter"] = args.max_iter
    return replace(base, **kw)


def _lambdas(args, model) -> list[float]:
    if args.lambda_list:
        return args.lambda_list
    rates = sorted({model.node(s).lambda_pps for s in model.sources})
    if len(rates) > 1:
        return [None]  # heterogeneous rates from the file, a single point
    return rates or [0.0]


def _sim_config(args) -> SimConfig:
    return SimConfig(duration_s=args.duration_s, replications=args.reps, seed=args.seed,
                     warmup_s=min(args.warmup_s, args.duration_s / 10), workers=args.workers)


def _run_analysis(model, params, config, lambdas):
    points = []
    for lam in lambdas:
        m = model if lam is None else model.with_rates(lam)
        fp = solve(m, params, config)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            status = stability_check(fp)
        for w in caught:
            print(f"warning (lambda={lam}): {w.message}", file=sys.stderr)
        points.append((lam, m, fp, qna_sweep(m, fp, params), status))
    return points


def _label(lam, model):
    return lam if lam is not None else "file"


def cmd_analyze(args) -> int:
    model, params, base = load_scenario(args.scenario)
    config = _analysis_config(args, base)
    out = _out_dir(args)
    nodes, sources, stab = [], [], []
    converged = True
    for lam, m, fp, perf, status in _run_analysis(model, params, config, _lambdas(args, model)):
        lab = _label(lam, model)
        nodes += analysis_node_rows(lab, fp, perf)
        sources += analysis_source_rows(lab, perf)
        stab.append({"lambda_pps": lab, "sum_q": fp.stability_sum, "status": status.value,
                     "converged": fp.converged, "iterations": fp.iterations, "residual": fp.residual})
        converged &= fp.converged
        if not fp.converged:
            print(f"error: no convergence at lambda={lab} (residual {fp.residual:.3g})", file=sys.stderr)
    write_csv(out / "analysis_nodes.csv", NODE_COLUMNS, nodes)
    write_csv(out / "analysis_sources.csv", SOURCE_COLUMNS, sources)
    write_csv(out / "stability.csv", STABILITY_COLUMNS, stab)
    print(f"wrote {out}/analysis_nodes.csv, analysis_sources.csv, stability.csv")
    return EXIT_OK if converged else EXIT_CONVERGENCE


def cmd_simulate(args) -> int:
    model, params, _ = load_scenario(args.scenario)
    if args.no_acks:
        params = replace(params, acks_enabled=False)
    cfg = _sim_config(args)
    out = _out_dir(args)
    nodes, sources = [], []
    for lam in _lambdas(args, model):
        m = model if lam is None else model.with_rates(lam)
        st = replicate(m, params, cfg)
        nodes += sim_node_rows(_label(lam, model), st)
        sources += sim_source_rows(_label(lam, model), st)
    write_csv(out / "sim_nodes.csv", SIM_NODE_COLUMNS, nodes)
    write_csv(out / "sim_sources.csv", SIM_SOURCE_COLUMNS, sources)
    print(f"wrote {out}/sim_nodes.csv, sim_sources.csv")
    return EXIT_OK


def cmd_compare(args) -> int:
    model, params, base = load_scenario(args.scenario)
    if args.no_acks:
        params = replace(params, acks_enabled=False)
    config = _analysis_config(args, base)
    cfg = _sim_config(args)
    out = _out_dir(args)
    rep = CompareReport()
    converged = True
    for lam, m, fp, perf, _ in _run_analysis(model, params, config, _lambdas(args, model)):
        converged &= fp.converged
        st = replicate(m, params, cfg)
        rep.add_point(_label(lam, model), fp, perf, st, tol_source=args.tolerance, tol_sum_q=args.sum_q_tolerance)
    write_csv(out / "compare.csv", COMPARE_COLUMNS, rep.rows)
    write_csv(out / "compare_summary.csv", SUMMARY_COLUMNS, rep.summary)
    for row in rep.summary:
        print(f"lambda={row['lambda_pps']:<6} {row['metric']:<9} mean error {row['mean_rel_error']:+.3f}  "
              f"{row['band']}")
    for v in rep.violations:
        print(f"violation: {v}", file=sys.stderr)
    if not converged:
        return EXIT_CONVERGENCE
    return EXIT_OK if rep.ok else EXIT_ACCEPTANCE


def cmd_design(args) -> int:
    if args.scenario is not None:
        doc = json.loads(args.scenario.read_text(encoding="utf-8"))
        problem = dz.problem_from_dict(doc, args.qos)
    else:
        problem = dz.generate_scenario(args.seed, qos=args.qos)
    out = _out_dir(args)
    result = dz.extended_sptiep(problem, h_max=args.h_max)
    trace = [vars(r) for r in result.trace]
    write_csv(out / "design_trace.csv", ["iteration", "phase", "max_edge", "max_hops", "verdict",
                                         "worst_delay_ms", "worst_p_del"], trace)
    doc = {"status": result.status.value, "h_max": result.h_max, "max_edge_m": result.max_edge_length,
           "parent": {str(k): v for k, v in sorted((result.tree or {}).items())},
           "hops": {str(k): v for k, v in sorted(result.hop_counts.items())}}
    print(f"status {result.status.value}, h_max {result.h_max}, max edge {result.max_edge_length:.3f} m")
    if args.validate_sim and result.tree:
        model = dz.tree_model(problem, result.tree)
        st = replicate(model, problem.params, SimConfig(duration_s=args.duration_s, replications=args.reps,
                                                        seed=args.seed, warmup_s=min(50.0, args.duration_s / 10)))
        worst_d = max(v["delay_ms"] for v in st.per_source.values())
        worst_p = min(v["p_del"] for v in st.per_source.values())
        met = worst_d <= problem.qos.d_max_s * 1e3 and worst_p >= problem.qos.p_del
        doc["simulation"] = {"worst_delay_ms": worst_d, "worst_p_del": worst_p, "qos_met": met}
        print(f"simulation: worst delay {worst_d:.2f} ms, worst delivery {worst_p:.4f}, "
              f"QoS {'met' if met else 'NOT met'}")
    (out / "design_tree.json").write_text(json.dumps(doc, indent=2), encoding="utf-8")
    print(f"wrote {out}/design_tree.json, design_trace.csv")
    return EXIT_OK if result.feasible else EXIT_ACCEPTANCE


def cmd_gen_scenario(args) -> int:
    if args.name == "lattice":
        problem = dz.generate_scenario(args.seed)
        args.out.write_text(json.dumps(dz.problem_to_dict(problem), indent=2), encoding="utf-8")
    else:
        try:
            model = from_name(args.name, seed=args.seed, lambda_pps=args.lambda_pps)
        except ValueError as exc:
            raise ScenarioError([str(exc)])
        save_scenario(args.out, model)
    print(f"wrote {args.out}")
    return EXIT_OK


COMMANDS = {"analyze": cmd_analyze, "simulate": cmd_simulate, "compare": cmd_compare,
            "design": cmd_design, "gen-scenario": cmd_gen_scenario}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ScenarioError as exc:
        for e in exc.errors or [str(exc)]:
            print(f"scenario error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FixedPointError, ServiceDivergence) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE


if __name__ == "__main__":
    sys.exit(main())
