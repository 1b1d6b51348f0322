"""Random planning instances for optimality and admissibility checks."""

from __future__ import annotations

import random
from typing import Dict, List, Sequence, Tuple

from .catalog import DeployedCM
from .cvss import CvssInfo
from .graph import DERIVATION, DERIVED, PRIMITIVE, AGNode, AttackGraph
from .logic import parse_atom
from .planner import PlanningProblem
from .risk import RiskModel

COSTS = (10, 20, 50, 300, 500, 1000)
PROBABILITIES = (0.2, 0.25, 0.37, 0.4, 0.5, 0.65, 0.8, 1.0)


def random_graph(rng: random.Random, leaves: int = 8, derived: int = 6,
                 max_derivations: int = 3, max_premises: int = 3) -> AttackGraph:
    """Acyclic attack graph; every derived fact uses earlier facts only."""
    kinds: Dict[str, str] = {}
    probs: Dict[str, float] = {}
    facts: List[str] = []
    for i in range(leaves):
        name = f"leaf{i}"
        kinds[name] = PRIMITIVE
        probs[name] = rng.choice(PROBABILITIES)
        facts.append(name)
    derivations: List[Tuple[str, List[str]]] = []
    for i in range(derived):
        name = f"fact{i}"
        for _ in range(rng.randint(1, max_derivations)):
            k = rng.randint(1, min(max_premises, len(facts)))
            derivations.append((name, rng.sample(facts, k)))
        kinds[name] = DERIVED
        facts.append(name)
    goals = [f"fact{derived - 1}"]
    if derived > 1 and rng.random() < 0.5:
        goals.append(f"fact{derived - 2}")

    # keep only what leads to a goal
    keep = set(goals)
    changed = True
    while changed:
        changed = False
        for head, body in derivations:
            if head in keep and not keep.issuperset(body):
                keep.update(body)
                changed = True
    ids: Dict[str, int] = {}
    nodes: List[AGNode] = []
    for name in facts:
        if name in keep:
            ids[name] = len(nodes) + 1
            vuln = None
            if kinds[name] == PRIMITIVE and probs[name] < 1.0:
                vuln = CvssInfo("v3", "low", "none", explicit_probability=probs[name], vuln_id=name)
            nodes.append(AGNode(ids[name], kinds[name], f"{name}(x)", parse_atom(f"{name}(x)"), vuln=vuln))
    edges = []
    for n, (head, body) in enumerate(derivations):
        if head not in keep:
            continue
        did = len(nodes) + 1
        nodes.append(AGNode(did, DERIVATION, f"Rule r{n}: synthetic", rule_id=f"r{n}", rule_label="synthetic"))
        edges.extend((ids[b], did) for b in dict.fromkeys(body))
        edges.append((did, ids[head]))
    return AttackGraph(nodes, edges, [ids[g] for g in goals])


def random_instance(seed: int, max_cms: int = 12, costs: Sequence[int] = COSTS) -> PlanningProblem:
    """A random graph, 1..max_cms countermeasures on random fact nodes, random budget."""
    rng = random.Random(seed)
    graph = random_graph(rng, leaves=rng.randint(3, 9), derived=rng.randint(2, 7))
    fact_ids = [n.id for n in graph.nodes.values() if n.kind != DERIVATION]
    attachments: Dict[int, List[DeployedCM]] = {}
    cms = []
    for i in range(rng.randint(1, max_cms)):
        d = DeployedCM(f"{i:02d}", "m", (f"p{i}",), float(rng.choice(costs)))
        cms.append(d)
        for nid in rng.sample(fact_ids, rng.randint(1, min(3, len(fact_ids)))):
            attachments.setdefault(nid, []).append(d)
    model = RiskModel(graph, attachments)
    total = sum(d.cost for d in cms)
    budget = float(rng.choice([0, rng.randint(0, int(total)), rng.choice(costs), total]))
    initial = tuple(d for d in model.variables)
    return PlanningProblem(model, initial, budget)
