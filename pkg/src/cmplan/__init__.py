"""Countermeasure planning over logical attack graphs.

Typical use::

    from cmplan import load_scenario, run_pipeline, PlanningProblem, astar_plan

    p = run_pipeline(load_scenario("dbserver"))
    plan = astar_plan(PlanningProblem.for_budget(p.model, 20))
"""

from .catalog import (Countermeasure, DeployedCM, MitigationAction, PositionSpec, extract_position,
                      load_catalog, load_policy, load_repo, match_graph, match_node,
                      resolve_countermeasures)
from .cvss import CvssInfo
from .graph import AGNode, AttackGraph, build_attack_graph, export_graph, import_graph
from .logic import Atom, HornRule, KnowledgeBase, parse_atom, parse_program, query
from .planner import (PlanningProblem, PlanResult, astar_plan, brute_force_plan, budget_sweep,
                      cvss_baseline_rank, heuristic)
from .risk import RiskModel, build_risk_model, leaf_probability, rebuild_oracle, remove_cycles
from .scenario import Scenario, load_scenario, run_pipeline

__all__ = [
    "AGNode", "Atom", "AttackGraph", "Countermeasure", "CvssInfo", "DeployedCM", "HornRule",
    "KnowledgeBase", "MitigationAction", "PlanResult", "PlanningProblem", "PositionSpec",
    "RiskModel", "Scenario", "astar_plan", "brute_force_plan", "budget_sweep", "build_attack_graph",
    "build_risk_model", "cvss_baseline_rank", "export_graph", "extract_position", "heuristic",
    "import_graph", "leaf_probability", "load_catalog", "load_policy", "load_repo", "load_scenario",
    "match_graph", "match_node", "parse_atom", "parse_program", "query", "rebuild_oracle",
    "remove_cycles", "resolve_countermeasures", "run_pipeline",
]
