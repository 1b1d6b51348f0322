"""Budget-constrained countermeasure selection.

Search starts from the plan that deploys every candidate countermeasure and
walks down the subset lattice, dropping one countermeasure per step, until a
plan within budget is popped.  Lower residual risk is better.
"""

from __future__ import annotations

import heapq
import itertools
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .catalog import DeployedCM, position_text
from .cvss import CvssInfo
from .risk import RiskModel

ADMISSIBLE = "admissible"
SUMMED = "sum"
HEURISTICS = (ADMISSIBLE, SUMMED, "zero")
BRUTE_FORCE_LIMIT = 20


class PlanningError(ValueError):
    pass


class SearchLimitError(PlanningError):
    pass


@dataclass(frozen=True)
class PlanningProblem:
    model: RiskModel
    initial: Tuple[DeployedCM, ...]
    budget: float
    heuristic: str = ADMISSIBLE

    def __post_init__(self):
        if self.budget < 0:
            raise PlanningError("budget must be non-negative")
        if self.heuristic not in HEURISTICS:
            raise PlanningError(f"unknown heuristic {self.heuristic!r}")
        unknown = [d for d in self.initial if d not in self.model.var_index]
        if unknown:
            raise PlanningError(f"initial state has unknown countermeasures {unknown}")
        object.__setattr__(self, "initial", tuple(sorted(set(self.initial))))

    @classmethod
    def for_budget(cls, model: RiskModel, budget: float, heuristic: str = ADMISSIBLE):
        """Every known countermeasure whose unit cost fits the budget."""
        return cls(model, tuple(d for d in model.variables if d.cost <= budget), budget, heuristic)


@dataclass(frozen=True)
class SearchState:
    deployed: Tuple[DeployedCM, ...]
    g: float
    h: float
    cost: float

    @property
    def f(self) -> float:
        return self.g + self.h

    @property
    def sort_key(self):
        return (self.f, -self.g, self.cost, tuple(d.key for d in self.deployed))

    def __str__(self) -> str:
        return "{" + ", ".join(d.name for d in self.deployed) + "}"


@dataclass
class PlanResult:
    budget: float
    plan: Tuple[DeployedCM, ...]
    residual_risk: float
    total_cost: float
    stats: Dict[str, float] = field(default_factory=dict)

    def to_json(self, products: Optional[Dict[str, str]] = None, deterministic: bool = False) -> dict:
        stats = dict(self.stats)
        if deterministic:
            stats.pop("wall_time", None)
        return {
            "budget": self.budget,
            "plan": [{"cm_id": d.cm_id, "product": (products or {}).get(d.cm_id, ""),
                      "position": position_text(d.position), "cost": d.cost} for d in self.plan],
            "total_cost": self.total_cost,
            "residual_risk": self.residual_risk,
            "stats": stats,
        }


def plan_cost(plan: Iterable[DeployedCM]) -> float:
    return sum(d.cost for d in plan)


def expand(state: SearchState) -> List[Tuple[DeployedCM, ...]]:
    """Successor plans, each omitting one countermeasure (in canonical order)."""
    return [state.deployed[:i] + state.deployed[i + 1:] for i in range(len(state.deployed))]


def removals_needed(plan: Sequence[DeployedCM], budget: float) -> int:
    """Fewest members to drop, dearest first, to get within budget."""
    excess = plan_cost(plan) - budget
    count = 0
    for c in sorted((d.cost for d in plan), reverse=True):
        if excess <= 0:
            break
        excess -= c
        count += 1
    return count


def heuristic_details(model: RiskModel, plan: Sequence[DeployedCM], budget: float,
                      mode: str = ADMISSIBLE) -> Tuple[float, int, List[float]]:
    """(h, X, sorted deltas) for a plan.

    ``X`` is the fewest countermeasures that must be dropped; the deltas are
    the risk increases from dropping each member alone.  The admissible mode
    returns the X-th smallest delta: any feasible descendant drops at least X
    members and, by monotonicity, re-admits at least the largest of their
    single deltas.  ``"sum"`` adds up the X smallest deltas instead, which can
    overestimate when attack paths are or-combined.
    """
    x = removals_needed(plan, budget)
    if x == 0 or mode == "zero":
        return 0.0, x, []
    base = model.evaluate(plan)
    deltas = sorted(model.evaluate(plan[:i] + plan[i + 1:]) - base for i in range(len(plan)))
    deltas = [max(0.0, d) for d in deltas]
    h = sum(deltas[:x]) if mode == SUMMED else deltas[x - 1]
    return h, x, deltas


def heuristic(model: RiskModel, plan: Sequence[DeployedCM], budget: float,
              mode: str = ADMISSIBLE) -> float:
    return heuristic_details(model, tuple(plan), budget, mode)[0]


def _state(problem: PlanningProblem, plan: Tuple[DeployedCM, ...]) -> SearchState:
    m = problem.model
    h = heuristic(m, plan, problem.budget, problem.heuristic)
    return SearchState(plan, m.evaluate(plan), h, plan_cost(plan))


def astar_plan(problem: PlanningProblem, max_expansions: Optional[int] = None,
               on_expand: Optional[Callable[[SearchState], None]] = None) -> PlanResult:
    """Best-first search over subsets of the initial plan."""
    start = time.perf_counter()
    tie = itertools.count()
    root = _state(problem, problem.initial)
    open_list = [(root.sort_key, next(tie), root)]
    in_open = {root.deployed}
    closed = set()
    expanded = generated = skipped = 0
    while open_list:
        _, _, state = heapq.heappop(open_list)
        in_open.discard(state.deployed)
        if state.deployed in closed:
            skipped += 1
            continue
        if state.cost <= problem.budget:
            stats = {"expanded": expanded, "generated": generated, "duplicates_skipped": skipped,
                     "wall_time": time.perf_counter() - start}
            return PlanResult(problem.budget, state.deployed, state.g, state.cost, stats)
        closed.add(state.deployed)
        expanded += 1
        if on_expand is not None:
            on_expand(state)
        if max_expansions is not None and expanded > max_expansions:
            raise SearchLimitError(f"no plan found within {max_expansions} expansions")
        for child in expand(state):
            if child in closed or child in in_open:
                skipped += 1
                continue
            s = _state(problem, child)
            heapq.heappush(open_list, (s.sort_key, next(tie), s))
            in_open.add(child)
            generated += 1
    # unreachable: the empty plan costs nothing and is always feasible
    raise PlanningError("search exhausted without a feasible plan")


def brute_force_plan(problem: PlanningProblem, chunk: int = 1 << 15) -> PlanResult:
    """Exhaustive optimum over all subsets of the initial plan."""
    start = time.perf_counter()
    items = problem.initial
    n = len(items)
    if n > BRUTE_FORCE_LIMIT:
        raise PlanningError(f"brute force limited to {BRUTE_FORCE_LIMIT} countermeasures, got {n}")
    model = problem.model
    cols = [model.var_index[d] for d in items]
    costs = np.array([d.cost for d in items])
    best = None
    for lo in range(0, 1 << n, chunk):
        ids = np.arange(lo, min(lo + chunk, 1 << n))
        bits = ((ids[:, None] >> np.arange(n)) & 1).astype(bool)
        total = bits @ costs if n else np.zeros(len(ids))
        ok = total <= problem.budget
        if not ok.any():
            continue
        masks = np.zeros((len(ids), len(model.variables)), dtype=bool)
        masks[:, cols] = bits
        risks = model.evaluate_many(masks[ok])
        for r, c, row in zip(risks, total[ok], bits[ok]):
            plan = tuple(d for d, b in zip(items, row) if b)
            cand = (float(r), float(c), tuple(d.key for d in plan), plan)
            if best is None or cand[:3] < best[:3]:
                best = cand
    risk, cost, _, plan = best
    return PlanResult(problem.budget, plan, model.evaluate(plan), cost,
                      {"subsets": 1 << n, "wall_time": time.perf_counter() - start})


def budget_sweep(model: RiskModel, budgets: Sequence[float], heuristic: str = ADMISSIBLE,
                 max_expansions: Optional[int] = None) -> List[PlanResult]:
    """One plan per budget; candidates dearer than the budget are left out."""
    return [astar_plan(PlanningProblem.for_budget(model, b, heuristic), max_expansions)
            for b in budgets]


def cvss_baseline_rank(vulns: Iterable[CvssInfo]) -> List[CvssInfo]:
    """Vulnerabilities by base score, most severe first; ties by identifier."""
    return sorted(vulns, key=lambda v: (-(v.base_score or 0.0), v.vuln_id or ""))


def severity_plan(model: RiskModel, vulns: Iterable[CvssInfo], budget: float) -> PlanResult:
    """Topology-blind baseline: fix vulnerabilities in severity order.

    For each vulnerability the cheapest countermeasure attached to one of its
    leaves is bought while the budget allows.
    """
    chosen: List[DeployedCM] = []
    spent = 0.0
    for v in cvss_baseline_rank(vulns):
        options = sorted(
            {d for nid, ds in model.attachments.items()
             if model.graph.nodes[nid].vuln is not None and model.graph.nodes[nid].vuln.vuln_id == v.vuln_id
             for d in ds},
            key=lambda d: (d.cost, d.key))
        for d in options:
            if d in chosen:
                break
            if spent + d.cost <= budget:
                chosen.append(d)
                spent += d.cost
                break
    plan = tuple(sorted(chosen))
    return PlanResult(budget, plan, model.evaluate(plan), spent, {})
