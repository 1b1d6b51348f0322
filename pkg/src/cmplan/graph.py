"""Logical attack graphs: construction from derivations, validation, file I/O.

The graph is tripartite.  Primitive facts and derived facts feed
derivation (rule application) nodes, and every derivation node feeds the
single derived fact it concludes.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

from .cvss import CvssInfo
from .logic import Atom, GroundKey, KnowledgeBase, parse_atom, render_key, unify

log = logging.getLogger(__name__)

DERIVATION = "derivation"
PRIMITIVE = "primitive-fact"
DERIVED = "derived-fact"
KINDS = (DERIVATION, PRIMITIVE, DERIVED)

# predicate -> argument index holding the vulnerability identifier
DEFAULT_VULN_PREDICATES = {"vulHost": 1, "vulProtocol": 1}

_MULVAL_KIND = {"AND": DERIVATION, "OR": DERIVED, "LEAF": PRIMITIVE}
_MULVAL_TOKEN = {v: k for k, v in _MULVAL_KIND.items()}
_MULVAL_RULE = re.compile(r"^RULE\s+(\S+)\s*\((.*)\)\s*$")


class GraphError(ValueError):
    pass


class GoalNotDerivable(GraphError):
    pass


class UnknownKindError(GraphError):
    pass


class DanglingEdgeError(GraphError):
    pass


class BipartiteError(GraphError):
    pass


@dataclass(frozen=True)
class AGNode:
    id: int
    kind: str
    label: str
    atom: Optional[Atom] = None
    rule_id: Optional[str] = None
    rule_label: Optional[str] = None
    vuln: Optional[CvssInfo] = None

    @property
    def is_fact(self) -> bool:
        return self.kind != DERIVATION


def derivation_label(rule_id: str, rule_label: str) -> str:
    return f"Rule {rule_id}: {rule_label}"


class AttackGraph:
    """Immutable tripartite graph (nodes, ordered edges, goal node ids)."""

    def __init__(self, nodes: Iterable[AGNode], edges: Iterable[Tuple[int, int]],
                 goals: Iterable[int], diagnostics: Sequence[str] = ()):
        self.nodes: Dict[int, AGNode] = {}
        for n in nodes:
            if n.kind not in KINDS:
                raise UnknownKindError(f"node {n.id}: unknown kind {n.kind!r}")
            if n.id in self.nodes:
                raise GraphError(f"duplicate node id {n.id}")
            self.nodes[n.id] = n
        self.edges: Tuple[Tuple[int, int], ...] = tuple((int(a), int(b)) for a, b in edges)
        self.goals: Tuple[int, ...] = tuple(goals)
        self.diagnostics = tuple(diagnostics)
        self.preds: Dict[int, List[int]] = {i: [] for i in self.nodes}
        self.succs: Dict[int, List[int]] = {i: [] for i in self.nodes}
        for a, b in self.edges:
            if a not in self.nodes or b not in self.nodes:
                raise DanglingEdgeError(f"edge ({a}, {b}) references an unknown node")
            self.succs[a].append(b)
            self.preds[b].append(a)
        self._validate()

    def _validate(self) -> None:
        if not self.goals:
            raise GraphError("attack graph has no goal")
        for g in self.goals:
            if g not in self.nodes:
                raise GraphError(f"goal {g} is not a node")
            if self.nodes[g].kind == DERIVATION:
                raise GraphError(f"goal {g} is a derivation node")
        for a, b in self.edges:
            ka, kb = self.nodes[a].kind, self.nodes[b].kind
            if not ((ka != DERIVATION and kb == DERIVATION) or (ka == DERIVATION and kb == DERIVED)):
                raise BipartiteError(f"edge ({a}, {b}) joins {ka} to {kb}")
        for n in self.nodes.values():
            if n.kind == DERIVATION and len(self.succs[n.id]) != 1:
                raise GraphError(f"derivation node {n.id} has {len(self.succs[n.id])} out-edges")
            if n.kind == DERIVED and not self.preds[n.id]:
                raise GraphError(f"derived fact {n.id} has no derivation")
            if n.kind == PRIMITIVE and self.preds[n.id]:
                raise GraphError(f"primitive fact {n.id} has in-edges")
        seen = set(self.goals)
        stack = list(self.goals)
        while stack:
            for p in self.preds[stack.pop()]:
                if p not in seen:
                    seen.add(p)
                    stack.append(p)
        stray = sorted(set(self.nodes) - seen)
        if stray:
            raise GraphError(f"nodes {stray[:5]} do not lead to any goal")

    def __len__(self) -> int:
        return len(self.nodes)

    def of_kind(self, kind: str) -> List[AGNode]:
        return [n for n in self.nodes.values() if n.kind == kind]

    def leaves(self) -> List[int]:
        return [i for i in sorted(self.nodes) if not self.preds[i]]

    def node_by_label(self, label: str) -> AGNode:
        for n in self.nodes.values():
            if n.label == label:
                return n
        raise KeyError(label)

    def canonical_edges(self) -> frozenset:
        """Edge set keyed by labels, stable under node renumbering."""
        names = {}
        for n in self.nodes.values():
            if n.kind == DERIVATION:
                ins = tuple(sorted(self.nodes[p].label for p in self.preds[n.id]))
                out = self.nodes[self.succs[n.id][0]].label
                names[n.id] = (n.label, ins, out)
            else:
                names[n.id] = n.label
        return frozenset((names[a], names[b]) for a, b in self.edges)

    def canonical_goals(self) -> Tuple[str, ...]:
        return tuple(sorted(self.nodes[g].label for g in self.goals))


def build_attack_graph(kb: KnowledgeBase, goals: Sequence[Union[Atom, str]],
                       vulns: Optional[Mapping[str, CvssInfo]] = None,
                       vuln_predicates: Mapping[str, int] = DEFAULT_VULN_PREDICATES) -> AttackGraph:
    """Build the attack graph for the given goal atoms.

    Node ids follow depth-first discovery from the goals, derivations of an
    atom in rule order and their premises in rule-body order.  Goals that
    cannot be derived are skipped with a diagnostic; if none is derivable
    :class:`GoalNotDerivable` is raised.
    """
    model = kb.model
    vulns = vulns or {}
    ids: Dict[GroundKey, int] = {}
    nodes: List[AGNode] = []
    edges: List[Tuple[int, int]] = []
    diagnostics: List[str] = []

    def new_id() -> int:
        return len(nodes) + 1

    def fact_node(key: GroundKey, kind: str) -> AGNode:
        atom = Atom.from_key(key)
        vuln = None
        idx = vuln_predicates.get(key[0])
        if kind == PRIMITIVE and idx is not None and idx < len(key[1]):
            vuln = vulns.get(key[1][idx])
            if vuln is None:
                diagnostics.append(f"no CVSS data for {render_key(key)}; leaf treated as certain")
        return AGNode(new_id(), kind, render_key(key), atom, vuln=vuln)

    def expand(key: GroundKey):
        # generator: yields premises to visit and receives their node ids;
        # a stated fact is unconditionally true, so rule derivations of it are ignored
        kind = PRIMITIVE if key in model.primitive else DERIVED
        node = fact_node(key, kind)
        ids[key] = node.id
        nodes.append(node)
        if kind == PRIMITIVE:
            return node.id
        for rule_id, body in model.support[key]:
            rule = kb.by_id[rule_id]
            d = AGNode(new_id(), DERIVATION, derivation_label(rule_id, rule.label),
                       rule_id=rule_id, rule_label=rule.label)
            nodes.append(d)
            for b in body:
                edges.append(((yield b), d.id))
            edges.append((d.id, node.id))
        return node.id

    def visit(key: GroundKey) -> int:
        # depth-first with an explicit stack so long chains do not hit the recursion limit
        if key in ids:
            return ids[key]
        stack = [expand(key)]
        result = None
        while stack:
            try:
                child = stack[-1].send(result)
            except StopIteration as done:
                stack.pop()
                result = done.value
                continue
            if child in ids:
                result = ids[child]
            else:
                stack.append(expand(child))
                result = None
        return result

    goal_ids: List[int] = []
    for g in goals:
        goal = parse_atom(g) if isinstance(g, str) else g
        matches = sorted(
            ((goal.predicate, vals) for vals in model.atoms(goal.key)
             if unify(goal, Atom.from_key((goal.predicate, vals))) is not None),
            key=render_key)
        if not matches:
            diagnostics.append(f"goal {goal} is not derivable")
            continue
        for key in matches:
            gid = visit(key)
            if gid not in goal_ids:
                goal_ids.append(gid)
    if not goal_ids:
        raise GoalNotDerivable("; ".join(diagnostics) or "no goals given")
    for msg in diagnostics:
        log.info(msg)
    return AttackGraph(nodes, edges, goal_ids, diagnostics)


# ---------------------------------------------------------------------------
# native JSON format

def graph_to_dict(g: AttackGraph) -> dict:
    nodes = []
    for i in sorted(g.nodes):
        n = g.nodes[i]
        d = {"id": n.id, "kind": n.kind, "label": n.label}
        if n.rule_id is not None:
            d["rule_id"] = n.rule_id
            d["rule_label"] = n.rule_label
        if n.vuln is not None:
            d["cvss"] = n.vuln.to_json()
        nodes.append(d)
    return {"nodes": nodes, "edges": [list(e) for e in g.edges], "goals": list(g.goals)}


def graph_from_dict(data: dict) -> AttackGraph:
    nodes = []
    for d in data["nodes"]:
        kind = d["kind"]
        if kind not in KINDS:
            raise UnknownKindError(f"node {d.get('id')}: unknown kind {kind!r}")
        atom = parse_atom(d["label"]) if kind != DERIVATION else None
        vuln = CvssInfo.from_json(d["cvss"]) if d.get("cvss") else None
        nodes.append(AGNode(int(d["id"]), kind, d["label"], atom,
                            d.get("rule_id"), d.get("rule_label"), vuln))
    return AttackGraph(nodes, [tuple(e) for e in data["edges"]], data["goals"])


def dumps_graph(g: AttackGraph) -> str:
    return json.dumps(graph_to_dict(g), indent=1) + "\n"


def loads_graph(text: str) -> AttackGraph:
    return graph_from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# MulVAL two-file CSV layout

def mulval_csv(g: AttackGraph) -> Tuple[str, str]:
    """Render as (VERTICES.CSV, ARCS.CSV) text.  Arc rows are ``to,from,-1``."""
    vbuf, abuf = io.StringIO(), io.StringIO()
    vw = csv.writer(vbuf, lineterminator="\n")
    for i in sorted(g.nodes):
        n = g.nodes[i]
        label = f"RULE {n.rule_id} ({n.rule_label})" if n.kind == DERIVATION else n.label
        metric = 1 if n.kind == PRIMITIVE else 0
        vw.writerow([n.id, label, _MULVAL_TOKEN[n.kind], metric])
    aw = csv.writer(abuf, lineterminator="\n")
    for a, b in g.edges:
        aw.writerow([b, a, -1])
    return vbuf.getvalue(), abuf.getvalue()


def parse_mulval_csv(vertices: str, arcs: str) -> AttackGraph:
    nodes = []
    for row in csv.reader(io.StringIO(vertices)):
        if not row:
            continue
        nid, label, token = int(row[0]), row[1], row[2].strip().upper()
        if token not in _MULVAL_KIND:
            raise UnknownKindError(f"vertex {nid}: unknown kind token {row[2]!r}")
        kind = _MULVAL_KIND[token]
        if kind == DERIVATION:
            m = _MULVAL_RULE.match(label)
            rule_id, rule_label = (m.group(1), m.group(2)) if m else (label, label)
            nodes.append(AGNode(nid, kind, derivation_label(rule_id, rule_label),
                                rule_id=rule_id, rule_label=rule_label))
        else:
            nodes.append(AGNode(nid, kind, label, parse_atom(label)))
    edges = []
    for row in csv.reader(io.StringIO(arcs)):
        if row:
            edges.append((int(row[1]), int(row[0])))
    has_out = {a for a, _ in edges}
    goals = [n.id for n in sorted(nodes, key=lambda n: n.id)
             if n.kind != DERIVATION and n.id not in has_out]
    return AttackGraph(nodes, edges, goals)


def export_graph(g: AttackGraph, path: Union[str, Path], fmt: str = "json") -> None:
    path = Path(path)
    if fmt == "json":
        path.write_text(dumps_graph(g))
    elif fmt == "mulval":
        path.mkdir(parents=True, exist_ok=True)
        v, a = mulval_csv(g)
        (path / "VERTICES.CSV").write_text(v)
        (path / "ARCS.CSV").write_text(a)
    else:
        raise ValueError(f"unknown graph format {fmt!r}")


def import_graph(path: Union[str, Path], fmt: str = "json") -> AttackGraph:
    path = Path(path)
    if fmt == "json":
        return loads_graph(path.read_text())
    if fmt == "mulval":
        return parse_mulval_csv((path / "VERTICES.CSV").read_text(), (path / "ARCS.CSV").read_text())
    raise ValueError(f"unknown graph format {fmt!r}")
