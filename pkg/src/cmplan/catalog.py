"""Mitigation actions, countermeasure products, and matching them to attack graphs.

A mitigation action (MA) describes what a defence does in logical terms: the
fact it cancels and the conditions under which it applies.  Each MA is
compiled into a goal-directed rule whose head is the cancelled predicate with
the MA identifier prepended, so asking ``p(MAID, args...)`` for a fact node
finds every applicable action along with its proof.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

from .graph import DERIVATION, AGNode, AttackGraph
from .logic import (CONST, VAR, Atom, HornRule, KnowledgeBase, LogicError, ProofTrace,
                    const, parse_atom, query, substitute, unify, var)

log = logging.getLogger(__name__)

CM_TYPES = ("host-firewall", "network-firewall", "host-ips", "network-ips", "patch", "antivirus")
POSITION_KINDS = ("vulnerable-host", "existing-component", "inter-subnet")
RULE_PREFIX = "ma"


class CatalogError(ValueError):
    pass


class PositionError(CatalogError):
    pass


@dataclass(frozen=True)
class PositionSpec:
    """Where a countermeasure is deployed, read from one atom of the match.

    ``source`` is ``"postcondition"`` (the cancelled atom) or
    ``"precondition"``; in the latter case ``predicate`` and ``occurrence``
    pick the n-th precondition with that predicate name.  Inter-subnet
    positions read two arguments and yield the ordered pair.
    """

    source: str
    arg_index: Tuple[int, ...]
    kind: str
    predicate: Optional[str] = None
    occurrence: int = 0

    def __post_init__(self):
        if self.source not in ("postcondition", "precondition"):
            raise CatalogError(f"unknown position source {self.source!r}")
        if self.kind not in POSITION_KINDS:
            raise CatalogError(f"unknown position kind {self.kind!r}")
        if self.source == "precondition" and not self.predicate:
            raise CatalogError("precondition position needs a predicate name")
        want = 2 if self.kind == "inter-subnet" else 1
        if len(self.arg_index) != want:
            raise CatalogError(f"{self.kind} position needs {want} argument index(es)")


@dataclass(frozen=True)
class MitigationAction:
    id: str
    cm_type: str
    action: str
    preconditions: Tuple[Tuple[bool, Atom], ...]  # (negated, atom)
    primary: Atom
    position: PositionSpec
    side_effects: Tuple[Atom, ...] = ()

    def __post_init__(self):
        if self.cm_type not in CM_TYPES:
            raise CatalogError(f"MA {self.id}: unknown defence mechanism {self.cm_type!r}")
        target = self.position_atom()
        for i in self.position.arg_index:
            if not 0 <= i < len(target.args):
                raise CatalogError(f"MA {self.id}: position index {i} outside {target}")
        bound = set(self.primary.variables())
        for neg, a in self.preconditions:
            if not neg:
                bound.update(a.variables())
        for i in self.position.arg_index:
            t = target.args[i]
            if t.kind == VAR and t.text not in bound:
                raise CatalogError(
                    f"MA {self.id}: position variable {t.text} is never bound by a "
                    "positive precondition or the postcondition")
            if t.kind not in (VAR, CONST):
                raise CatalogError(f"MA {self.id}: position argument is a wildcard")

    @property
    def rule_id(self) -> str:
        return f"{RULE_PREFIX}{self.id}"

    def position_atom(self) -> Atom:
        spec = self.position
        if spec.source == "postcondition":
            return self.primary
        hits = [a for _, a in self.preconditions if a.predicate == spec.predicate]
        if spec.occurrence >= len(hits):
            raise CatalogError(
                f"MA {self.id}: no occurrence {spec.occurrence} of {spec.predicate} in preconditions")
        return hits[spec.occurrence]

    def to_rule(self) -> HornRule:
        head = Atom(self.primary.predicate, (const(self.id),) + self.primary.args)
        body = tuple(a for neg, a in self.preconditions if not neg)
        negs = tuple(a for neg, a in self.preconditions if neg)
        return HornRule(self.rule_id, self.action, head, body, negs, demand=True)


@dataclass(frozen=True)
class Countermeasure:
    """A purchasable product implementing one or more mitigation actions.

    ``scope`` optionally restricts the product to fact nodes matching one of
    the given atom patterns (for instance a patch that fixes one CVE only).
    """

    id: str
    manufacturer: str
    product_id: str
    deploy_cost: float
    coin: str
    ma_ids: Tuple[str, ...]
    scope: Tuple[Atom, ...] = ()

    def __post_init__(self):
        if self.deploy_cost < 0:
            raise CatalogError(f"countermeasure {self.id}: negative cost")
        if not self.ma_ids:
            raise CatalogError(f"countermeasure {self.id}: no mitigation actions")

    def covers(self, atom: Atom) -> bool:
        return not self.scope or any(unify(p, atom) is not None for p in self.scope)


def position_text(position: Tuple[str, ...]) -> str:
    if len(position) == 1:
        return position[0]
    return "(" + ",".join(position) + ")"


@dataclass(frozen=True, order=True)
class DeployedCM:
    """A countermeasure placed at one position.  Ordering follows the
    canonical key (cm_id, ma_id, position)."""

    cm_id: str
    ma_id: str
    position: Tuple[str, ...]
    cost: float = field(compare=False)

    @property
    def key(self) -> Tuple[str, str, Tuple[str, ...]]:
        return (self.cm_id, self.ma_id, self.position)

    @property
    def name(self) -> str:
        return f"C{self.cm_id}@{position_text(self.position)}"

    def __str__(self) -> str:
        return self.name


@dataclass(frozen=True)
class Match:
    ma_id: str
    trace: ProofTrace
    position: Tuple[str, ...]


@dataclass
class Resolution:
    initial: Tuple[DeployedCM, ...]
    attachments: Dict[int, Tuple[DeployedCM, ...]]
    diagnostics: List[str] = field(default_factory=list)


# ---------------------------------------------------------------------------
# compilation and matching

def compile_matching_rules(catalog: Sequence[MitigationAction],
                           kb: Optional[KnowledgeBase] = None,
                           strict: bool = True) -> List[HornRule]:
    """One goal-directed rule per MA.  With ``kb`` given, MAs whose cancelled
    predicate is not part of its vocabulary raise (or are skipped with a
    warning when ``strict`` is false)."""
    rules = []
    seen = set()
    for ma in catalog:
        if ma.id in seen:
            raise CatalogError(f"duplicate MA id {ma.id!r}")
        seen.add(ma.id)
        if kb is not None and not kb.knows(ma.primary.key):
            msg = f"MA {ma.id}: predicate {ma.primary.predicate}/{len(ma.primary.args)} is not in the program"
            if strict:
                raise CatalogError(msg)
            log.warning(msg)
            continue
        rules.append(ma.to_rule())
    return rules


def matching_kb(kb: KnowledgeBase, catalog: Sequence[MitigationAction],
                strict: bool = True) -> KnowledgeBase:
    return kb.extend(compile_matching_rules(catalog, kb, strict))


def _ma_of_rule(rule_id: str) -> Optional[str]:
    return rule_id[len(RULE_PREFIX):] if rule_id.startswith(RULE_PREFIX) else None


def match_node(kb_with_rules: KnowledgeBase, node: AGNode) -> List[Tuple[str, ProofTrace]]:
    """All (MA id, proof) pairs whose cancelled atom is this node's fact."""
    if node.kind == DERIVATION or node.atom is None:
        return []
    goal = Atom(node.atom.predicate, (var("MAID"),) + node.atom.args)
    out = []
    for ans in query(kb_with_rules, goal):
        for tr in ans.traces:
            rule = kb_with_rules.by_id.get(tr.rule_id)
            ma_id = _ma_of_rule(tr.rule_id)
            if ma_id is not None and rule is not None and rule.demand:
                out.append((ma_id, tr))
    return sorted(out, key=lambda p: (p[0], p[1].render()))


def extract_position(ma: MitigationAction, trace: ProofTrace) -> Tuple[str, ...]:
    """Ground deployment position of a match."""
    rule = ma.to_rule()
    s = unify(rule.head, trace.atom)
    if s is None or len(trace.children) != len(rule.body):
        raise PositionError(f"trace {trace} is not a match of MA {ma.id}")
    for a, child in zip(rule.body, trace.children):
        s = unify(a, child.atom, s)
        if s is None:
            raise PositionError(f"trace {trace} is not a match of MA {ma.id}")
    atom = substitute(ma.position_atom(), s)
    out = []
    for i in ma.position.arg_index:
        t = atom.args[i]
        if t.kind != CONST:
            raise PositionError(f"MA {ma.id}: position argument {i} of {atom} is unbound")
        out.append(t.text)
    return tuple(out)


def match_graph(graph: AttackGraph, kb: KnowledgeBase,
                catalog: Sequence[MitigationAction], strict: bool = True) -> Dict[int, List[Match]]:
    """Matches for every fact node that has at least one."""
    by_id = {ma.id: ma for ma in catalog}
    mkb = matching_kb(kb, catalog, strict)
    result: Dict[int, List[Match]] = {}
    for nid in sorted(graph.nodes):
        found = match_node(mkb, graph.nodes[nid])
        if found:
            result[nid] = [Match(m, tr, extract_position(by_id[m], tr)) for m, tr in found]
    return result


def resolve_countermeasures(graph: AttackGraph, matches: Mapping[int, Sequence[Match]],
                            repo: Sequence[Countermeasure],
                            policy: Sequence[Atom] = (),
                            budget: Optional[float] = None) -> Resolution:
    """Turn matches into deployable countermeasures.

    A product placed at one position costs once, however many nodes or
    mitigation actions it serves there.  Nodes matching a policy pattern keep
    no countermeasures; products dearer than the budget are left out.
    """
    diagnostics: List[str] = []
    if not repo and matches:
        diagnostics.append("countermeasure repository is empty; nothing can be deployed")
        log.warning(diagnostics[-1])
    by_ma: Dict[str, List[Countermeasure]] = {}
    for cm in repo:
        for m in cm.ma_ids:
            by_ma.setdefault(m, []).append(cm)
    placements: Dict[Tuple[str, Tuple[str, ...]], set] = {}
    costs: Dict[str, float] = {cm.id: cm.deploy_cost for cm in repo}
    node_links: Dict[int, set] = {}
    for nid in sorted(matches):
        atom = graph.nodes[nid].atom
        if any(unify(p, atom) is not None for p in policy):
            diagnostics.append(f"node {nid} ({graph.nodes[nid].label}) is protected by policy")
            continue
        for m in matches[nid]:
            for cm in by_ma.get(m.ma_id, ()):
                if budget is not None and cm.deploy_cost > budget:
                    continue
                if not cm.covers(atom):
                    continue
                placements.setdefault((cm.id, m.position), set()).add(m.ma_id)
                node_links.setdefault(nid, set()).add((cm.id, m.position))
    deployed = {
        k: DeployedCM(k[0], ",".join(sorted(mas)), k[1], costs[k[0]])
        for k, mas in placements.items()
    }
    attachments = {nid: tuple(sorted(deployed[k] for k in links))
                   for nid, links in node_links.items()}
    return Resolution(tuple(sorted(deployed.values())), attachments, diagnostics)


# ---------------------------------------------------------------------------
# file formats

def _load_json(src: Union[str, Path, list, dict]):
    if isinstance(src, (list, dict)):
        return src
    return json.loads(Path(src).read_text())


def _literal(text: str) -> Tuple[bool, Atom]:
    text = text.strip()
    for prefix in ("!", "\\+"):
        if text.startswith(prefix):
            return True, parse_atom(text[len(prefix):])
    return False, parse_atom(text)


def mitigation_action_from_json(d: dict) -> MitigationAction:
    try:
        pos = d["position"]
        idx = pos["arg_index"]
        spec = PositionSpec(
            source=pos["source"],
            arg_index=tuple(idx) if isinstance(idx, list) else (int(idx),),
            kind=pos["kind"],
            predicate=pos.get("predicate"),
            occurrence=int(pos.get("occurrence", 0)),
        )
        post = d["post"]
        return MitigationAction(
            id=str(d["id"]),
            cm_type=d["cm_type"],
            action=d.get("action", ""),
            preconditions=tuple(_literal(p) for p in d.get("pre", [])),
            primary=parse_atom(post["primary"]),
            position=spec,
            side_effects=tuple(parse_atom(a) for a in post.get("side_effects", [])),
        )
    except KeyError as e:
        raise CatalogError(f"MA {d.get('id')}: missing field {e}") from None
    except LogicError as e:
        raise CatalogError(f"MA {d.get('id')}: {e}") from None


def load_catalog(src) -> List[MitigationAction]:
    catalog = [mitigation_action_from_json(d) for d in _load_json(src)]
    ids = [ma.id for ma in catalog]
    if len(set(ids)) != len(ids):
        raise CatalogError("duplicate MA ids in catalog")
    return catalog


def load_repo(src, catalog: Optional[Sequence[MitigationAction]] = None) -> List[Countermeasure]:
    known = {ma.id for ma in catalog} if catalog is not None else None
    repo = []
    for d in _load_json(src):
        try:
            cm = Countermeasure(
                id=str(d["id"]),
                manufacturer=d.get("manufacturer", ""),
                product_id=d.get("product_id", ""),
                deploy_cost=float(d["deploy_cost"]),
                coin=d.get("coin", "USD"),
                ma_ids=tuple(str(m) for m in d["ma_ids"]),
                scope=tuple(parse_atom(p) for p in d.get("scope", [])),
            )
        except KeyError as e:
            raise CatalogError(f"countermeasure {d.get('id')}: missing field {e}") from None
        if known is not None:
            missing = [m for m in cm.ma_ids if m not in known]
            if missing:
                raise CatalogError(f"countermeasure {cm.id}: unknown MA ids {missing}")
        repo.append(cm)
    if len({cm.id for cm in repo}) != len(repo):
        raise CatalogError("duplicate countermeasure ids in repository")
    coins = {cm.coin for cm in repo}
    if len(coins) > 1:
        raise CatalogError(f"mixed currencies in repository: {sorted(coins)}")
    return repo


def load_policy(src) -> List[Atom]:
    return [parse_atom(p) for p in _load_json(src)]
