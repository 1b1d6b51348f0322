"""Command-line interface: generate, match, plan, sweep, baseline and bench."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import random
import statistics
import sys
import time
from pathlib import Path
from typing import List, Optional, Sequence

from .catalog import CatalogError, load_catalog, load_policy, load_repo, position_text
from .graph import (GoalNotDerivable, GraphError, build_attack_graph, dumps_graph, export_graph,
                    mulval_csv)
from .logic import LogicError, parse_program
from .planner import (ADMISSIBLE, HEURISTICS, PlanningProblem, PlanResult, astar_plan,
                      budget_sweep, cvss_baseline_rank, severity_plan)
from .risk import CUT, UNFOLD, RiskModel, rebuild_oracle
from .scenario import Pipeline, Scenario, ScenarioError, load_scenario, load_vulns, run_pipeline

EXIT_OK, EXIT_USAGE, EXIT_PARSE, EXIT_UNDERIVABLE, EXIT_VALIDATION = 0, 1, 2, 3, 4

log = logging.getLogger("cmplan")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _budget_list(text: str) -> List[float]:
    out = []
    for part in text.split(","):
        part = part.strip()
        if ":" in part:  # start:stop:step, stop inclusive
            lo, hi, step = (float(x) for x in part.split(":"))
            if step <= 0:
                raise argparse.ArgumentTypeError("budget step must be positive")
            v = lo
            while v <= hi + 1e-9:
                out.append(v)
                v += step
        elif part:
            out.append(float(part))
    if any(b < 0 for b in out):
        raise argparse.ArgumentTypeError("budgets must be non-negative")
    return out


def _nonneg(text: str) -> float:
    v = float(text)
    if v < 0:
        raise argparse.ArgumentTypeError("budget must be non-negative")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    src = common.add_argument_group("inputs")
    src.add_argument("--scenario", help="scenario JSON, scenario directory or bundled name (dbserver, enterprise, cyclic)")
    src.add_argument("--program", help="logic program (overrides the scenario's)")
    src.add_argument("--goals", action="append", help="goal atom; repeat for several goals")
    src.add_argument("--catalog", help="mitigation-action catalog JSON")
    src.add_argument("--repo", help="countermeasure repository JSON")
    src.add_argument("--policy", help="policy deny-list JSON")
    src.add_argument("--vulns", help="CVSS data JSON")
    src.add_argument("--attacker", help="attacker profile; comma-separated for sweep")
    out = common.add_argument_group("output")
    out.add_argument("--out", help="output file (sweep: path prefix for .json/.csv/.png)")
    out.add_argument("--format", choices=("json", "csv"), default="json")
    out.add_argument("--seed", type=int, default=0)
    out.add_argument("--deterministic", action="store_true", help="omit wall-clock fields")
    out.add_argument("--cycles", choices=(UNFOLD, CUT), default=UNFOLD, help="cycle handling in risk equations")
    out.add_argument("--heuristic", choices=HEURISTICS, default=ADMISSIBLE)
    out.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="cmplan", description="Countermeasure planning over logical attack graphs.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True
    sub.add_parser("generate", parents=[common], help="build the attack graph")
    sub.add_parser("match", parents=[common], help="match mitigation actions to graph nodes")
    sp = sub.add_parser("plan", parents=[common], help="best plan for one budget")
    sp.add_argument("--budget", type=_nonneg, required=True)
    sw = sub.add_parser("sweep", parents=[common], help="plans over a list of budgets, with a figure")
    sw.add_argument("--budgets", type=_budget_list, required=True, help="e.g. 10,20,30 or 0:1000:50 (sorted)")
    sb = sub.add_parser("baseline", parents=[common], help="CVSS-severity ordering against the planner")
    sb.add_argument("--budget", type=_nonneg, required=True)
    be = sub.add_parser("bench", parents=[common], help="equation evaluation against graph regeneration")
    be.add_argument("-n", "--trials", type=int, default=1000)
    return p


# ---------------------------------------------------------------------------
# configuration

def _scenario(args, attacker: Optional[str] = None) -> Scenario:
    if args.scenario:
        sc = load_scenario(args.scenario, attacker)
    elif args.program:
        sc = Scenario(name=Path(args.program).stem, program_text="", goals=[])
    else:
        raise UsageError("either --scenario or --program is required")
    if args.program:
        sc.program_text = Path(args.program).read_text()
    if args.goals:
        sc.goals = list(args.goals)
    if args.catalog:
        sc.catalog = load_catalog(args.catalog)
    if args.repo:
        sc.repo = load_repo(args.repo, sc.catalog)
    if args.policy:
        sc.policy = load_policy(args.policy)
    if args.vulns:
        sc.vulns = load_vulns(args.vulns)
    if not sc.goals:
        raise UsageError("no goals given")
    return sc


def _pipeline(args, attacker: Optional[str] = None, budget: Optional[float] = None) -> Pipeline:
    sc = _scenario(args, attacker if attacker is not None else args.attacker)
    p = run_pipeline(sc, budget)
    if args.cycles != UNFOLD:
        p.model = RiskModel(p.graph, p.resolution.attachments, sc.aggregate, args.cycles)
    for msg in (*p.graph.diagnostics, *p.resolution.diagnostics, *p.model.diagnostics):
        print(f"warning: {msg}", file=sys.stderr)
    return p


def _emit(args, text: str) -> None:
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


def _csv(rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def _plan_names(result: PlanResult) -> str:
    return ";".join(d.name for d in result.plan)


# ---------------------------------------------------------------------------
# commands

def cmd_generate(args) -> int:
    sc = _scenario(args, args.attacker)
    graph = build_attack_graph(parse_program(sc.program_text), sc.goals, sc.vulns, sc.vuln_predicates)
    for msg in graph.diagnostics:
        print(f"warning: {msg}", file=sys.stderr)
    if args.out:
        export_graph(graph, args.out, "mulval" if args.format == "csv" else "json")
    elif args.format == "csv":
        v, a = mulval_csv(graph)
        sys.stdout.write(v + "\n" + a)
    else:
        sys.stdout.write(dumps_graph(graph))
    print(f"nodes {len(graph.nodes)} edges {len(graph.edges)} goals {len(graph.goals)}",
          file=sys.stderr)
    return EXIT_OK


def cmd_match(args) -> int:
    p = _pipeline(args)
    rows = []
    for nid in sorted(p.matches):
        for m in p.matches[nid]:
            cms = [d.name for d in p.resolution.attachments.get(nid, ()) if m.ma_id in d.ma_id.split(",")]
            rows.append((nid, p.graph.nodes[nid].label, m.ma_id, position_text(m.position), ";".join(cms)))
    if args.format == "csv":
        _emit(args, _csv([("node", "label", "ma_id", "position", "countermeasures")] + rows))
    else:
        data = {"matches": [dict(zip(("node", "label", "ma_id", "position", "countermeasures"), r)) for r in rows],
                "initial": [{"cm_id": d.cm_id, "ma_id": d.ma_id, "position": position_text(d.position),
                             "cost": d.cost} for d in p.resolution.initial],
                "diagnostics": p.resolution.diagnostics}
        _emit(args, json.dumps(data, indent=1) + "\n")
    return EXIT_OK


def _plan_row(profile: str, r: PlanResult):
    return (r.budget, profile, _plan_names(r), r.total_cost, repr(r.residual_risk))


PLAN_HEADER = ("budget", "profile", "plan", "total_cost", "residual_risk")


def cmd_plan(args) -> int:
    p = _pipeline(args)
    result = astar_plan(PlanningProblem.for_budget(p.model, args.budget, args.heuristic))
    if args.format == "csv":
        _emit(args, _csv([PLAN_HEADER, _plan_row(p.scenario.name, result)]))
    else:
        _emit(args, json.dumps(result.to_json(p.scenario.products, args.deterministic), indent=1) + "\n")
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .plotting import plot_risk_per_budget
    profiles = args.attacker.split(",") if args.attacker else [None]
    reports, rows, series = [], [PLAN_HEADER], {}
    for prof in profiles:
        p = _pipeline(args, attacker=prof)
        results = budget_sweep(p.model, sorted(args.budgets), args.heuristic)
        label = p.scenario.name
        for r in results:
            d = r.to_json(p.scenario.products, args.deterministic)
            d["profile"] = label
            reports.append(d)
            rows.append(_plan_row(label, r))
        series[label] = [(r.budget, r.residual_risk) for r in results]
    table = _csv(rows)
    if args.out:
        stem = Path(args.out)
        if stem.suffix in (".json", ".csv", ".png"):
            stem = stem.with_suffix("")
        stem.parent.mkdir(parents=True, exist_ok=True)
        Path(f"{stem}.json").write_text(json.dumps(reports, indent=1) + "\n")
        Path(f"{stem}.csv").write_text(table)
        plot_risk_per_budget(series, f"{stem}.png")
        print(f"wrote {stem}.json, {stem}.csv, {stem}.png", file=sys.stderr)
    elif args.format == "csv":
        sys.stdout.write(table)
    else:
        sys.stdout.write(json.dumps(reports, indent=1) + "\n")
    return EXIT_OK


def cmd_baseline(args) -> int:
    p = _pipeline(args)
    ranking = cvss_baseline_rank(p.scenario.vulns.values())
    naive = severity_plan(p.model, ranking, args.budget)
    best = astar_plan(PlanningProblem.for_budget(p.model, args.budget, args.heuristic))
    if args.format == "csv":
        rows = [("method", "budget", "plan", "total_cost", "residual_risk"),
                ("cvss-severity", args.budget, _plan_names(naive), naive.total_cost, repr(naive.residual_risk)),
                ("planner", args.budget, _plan_names(best), best.total_cost, repr(best.residual_risk))]
        _emit(args, _csv(rows))
    else:
        data = {"cvss_order": [{"id": v.vuln_id, "base_score": v.base_score,
                                "probability": v.exploit_probability()} for v in ranking],
                "severity_plan": naive.to_json(p.scenario.products, True),
                "planner_plan": best.to_json(p.scenario.products, args.deterministic)}
        _emit(args, json.dumps(data, indent=1) + "\n")
    return EXIT_OK


def cmd_bench(args) -> int:
    p = _pipeline(args)
    sc, model = p.scenario, p.model
    rng = random.Random(args.seed)
    variables = model.variables
    eq_times, rebuild_times, worst = [], [], 0.0
    for _ in range(max(0, args.trials)):
        subset = [d for d in variables if rng.random() < 0.5]
        t0 = time.perf_counter()
        a = model.values(subset)[model.goal_expr]
        t1 = time.perf_counter()
        b = rebuild_oracle(p.kb, sc.goals, p.graph, p.resolution.attachments, subset,
                           sc.vulns, sc.vuln_predicates, sc.aggregate, args.cycles)
        t2 = time.perf_counter()
        eq_times.append(t1 - t0)
        rebuild_times.append(t2 - t1)
        worst = max(worst, abs(a - b))
    report = {"scenario": sc.name, "trials": len(eq_times), "seed": args.seed}
    if eq_times:
        report.update({
            "equation_mean_s": statistics.fmean(eq_times),
            "equation_median_s": statistics.median(eq_times),
            "rebuild_mean_s": statistics.fmean(rebuild_times),
            "rebuild_median_s": statistics.median(rebuild_times),
            "speedup_mean": statistics.fmean(rebuild_times) / statistics.fmean(eq_times),
            "max_abs_difference": worst,
        })
    if args.format == "csv":
        _emit(args, _csv([list(report), list(report.values())]))
    else:
        _emit(args, json.dumps(report, indent=1) + "\n")
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "match": cmd_match, "plan": cmd_plan,
            "sweep": cmd_sweep, "baseline": cmd_baseline, "bench": cmd_bench}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"cmplan: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as e:
        print(f"cmplan: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except GoalNotDerivable as e:
        print(f"cmplan: empty attack graph: {e}", file=sys.stderr)
        return EXIT_UNDERIVABLE
    except (CatalogError, ScenarioError) as e:
        print(f"cmplan: invalid catalog or repository: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (LogicError, GraphError, json.JSONDecodeError) as e:
        print(f"cmplan: parse error: {e}", file=sys.stderr)
        return EXIT_PARSE


if __name__ == "__main__":
    sys.exit(main())
