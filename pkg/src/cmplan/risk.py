"""Risk equations over attack graphs.

Each attack-graph node is compiled into an expression in a shared DAG of
constants, countermeasure variables, products and or-combinations
(``1 - prod(1 - e_i)``).  A countermeasure variable is 0 when the
countermeasure is deployed and 1 otherwise, so evaluating the goal
expression under a deployment set gives the residual risk.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .catalog import DeployedCM
from .cvss import CvssInfo
from .graph import (DEFAULT_VULN_PREDICATES, DERIVATION, DERIVED, PRIMITIVE, AGNode,
                    AttackGraph, GoalNotDerivable, build_attack_graph)
from .logic import KnowledgeBase, deep_recursion

log = logging.getLogger(__name__)

CONST_OP, VAR_OP, PROD_OP, OR_OP, SUM_OP = "const", "var", "prod", "or", "sum"
CUT, UNFOLD = "cut", "unfold"


class RiskError(ValueError):
    pass


class CycleRemovalError(RiskError):
    pass


class UnfoldLimitError(RiskError):
    pass


class UnknownVariableError(RiskError):
    pass


def leaf_probability(node: AGNode) -> float:
    """Probability that a primitive fact can be used by the attacker."""
    if node.vuln is None:
        return 1.0
    return node.vuln.exploit_probability()


def or_combine(values: Iterable[float]) -> float:
    miss = 1.0
    for v in values:
        miss *= 1.0 - v
    return 1.0 - miss


def remove_cycles(g: AttackGraph) -> Tuple[List[Tuple[int, int]], List[int]]:
    """Processing order of the graph plus the edges that had to be cut.

    Nodes are processed in waves: a node is ready once all its in-neighbours
    are processed.  When nothing is ready, the derived fact with several
    derivations and the earliest-processed parent is unblocked by cutting the
    edges from its still-unprocessed derivations.
    """
    preds = {i: list(g.preds[i]) for i in g.nodes}
    processed: Dict[int, int] = {}  # node -> wave number
    order: List[int] = []
    removed: List[Tuple[int, int]] = []
    wave = 0
    limit = len(g.nodes) + len(g.edges) + 1
    for _ in range(limit * 2):
        if len(processed) == len(g.nodes):
            break
        ready = [i for i in sorted(g.nodes)
                 if i not in processed and all(p in processed for p in preds[i])]
        if ready:
            for i in ready:
                processed[i] = wave
                order.append(i)
            wave += 1
            continue
        candidates = []
        for i in sorted(g.nodes):
            if i in processed or g.nodes[i].kind != DERIVED or len(preds[i]) < 2:
                continue
            done = [processed[p] for p in preds[i] if p in processed]
            if done:
                candidates.append((min(done), i))
        if not candidates:
            raise CycleRemovalError("attack graph cannot be processed: no cycle entry point found")
        _, target = min(candidates)
        for p in sorted(preds[target]):
            if p not in processed:
                removed.append((p, target))
        preds[target] = [p for p in preds[target] if p in processed]
    else:
        raise CycleRemovalError("cycle removal did not terminate")
    return order, removed


def strongly_connected(g: AttackGraph) -> Dict[int, int]:
    """Component number of every node (iterative Tarjan)."""
    index: Dict[int, int] = {}
    low: Dict[int, int] = {}
    comp: Dict[int, int] = {}
    stack: List[int] = []
    on_stack = set()
    counter = 0
    for root in sorted(g.nodes):
        if root in index:
            continue
        work = [(root, iter(g.succs[root]))]
        index[root] = low[root] = counter
        counter += 1
        stack.append(root)
        on_stack.add(root)
        while work:
            v, it = work[-1]
            advanced = False
            for w in it:
                if w not in index:
                    index[w] = low[w] = counter
                    counter += 1
                    stack.append(w)
                    on_stack.add(w)
                    work.append((w, iter(g.succs[w])))
                    advanced = True
                    break
                if w in on_stack:
                    low[v] = min(low[v], index[w])
            if advanced:
                continue
            work.pop()
            if work:
                low[work[-1][0]] = min(low[work[-1][0]], low[v])
            if low[v] == index[v]:
                while True:
                    w = stack.pop()
                    on_stack.discard(w)
                    comp[w] = v
                    if w == v:
                        break
    return comp


@dataclass(frozen=True)
class Monomial:
    coef: float
    variables: Tuple[str, ...]

    def __str__(self) -> str:
        return "*".join([f"{self.coef:.10g}"] + list(self.variables))


class RiskModel:
    """Compiled risk equations for one attack graph and one set of attachments."""

    def __init__(self, graph: AttackGraph, attachments: Mapping[int, Sequence[DeployedCM]] = (),
                 aggregate: str = "or", cycles: str = UNFOLD, max_ops: int = 1_000_000):
        if aggregate not in (OR_OP, SUM_OP):
            raise RiskError(f"unknown goal aggregation {aggregate!r}")
        if cycles not in (CUT, UNFOLD):
            raise RiskError(f"unknown cycle handling {cycles!r}")
        attachments = dict(attachments)
        self.graph = graph
        self.attachments = attachments
        self.aggregate = aggregate
        self.variables: Tuple[DeployedCM, ...] = tuple(sorted({d for ds in attachments.values() for d in ds}))
        self.var_index = {d: i for i, d in enumerate(self.variables)}
        self.ops: List[Tuple[str, object]] = []
        self._interned: Dict[Tuple[str, object], int] = {}
        self._cache: Dict[FrozenSet[DeployedCM], float] = {}
        self.cycles = cycles
        self._attached = {nid: [self._var(d) for d in sorted(set(ds))] for nid, ds in attachments.items()}
        self.order, self.removed_edges = remove_cycles(graph)
        self.node_expr: Dict[int, int] = {}
        self.diagnostics: List[str] = []
        if cycles == UNFOLD and self.removed_edges:
            try:
                self._build_unfolded(max_ops)
            except UnfoldLimitError as e:
                msg = f"{e}; falling back to cutting {len(self.removed_edges)} cycle edge(s)"
                log.warning(msg)
                self.diagnostics.append(msg)
                self.cycles = CUT
                self.ops, self._interned, self.node_expr = [], {}, {}
                self._attached = {nid: [self._var(d) for d in sorted(set(ds))]
                                  for nid, ds in attachments.items()}
        if self.cycles == CUT or not self.removed_edges:
            self._build_cut()
        goal_exprs = [self.node_expr[g] for g in graph.goals]
        if aggregate == SUM_OP and len(goal_exprs) > 1:
            self.goal_expr = self._add((SUM_OP, tuple(goal_exprs)))
        else:
            self.goal_expr = self._or(goal_exprs)

    # -- construction
    def _build_cut(self) -> None:
        """One expression per node, processed in worklist order with cut cycles."""
        g = self.graph
        removed = set(self.removed_edges)
        for nid in self.order:
            node = g.nodes[nid]
            ins = [self.node_expr[p] for p in g.preds[nid] if (p, nid) not in removed]
            cms = self._attached.get(nid, [])
            if node.kind == PRIMITIVE:
                self.node_expr[nid] = self._prod(cms + [self._const(leaf_probability(node))])
            elif node.kind == DERIVATION:
                self.node_expr[nid] = self._prod(ins)
            else:
                self.node_expr[nid] = self._prod(cms + [self._or(ins)])

    def _build_unfolded(self, max_ops: int) -> None:
        """Expressions that only count non-circular derivations.

        A derived fact reached along a path of facts may not be derived again
        through any fact on that path.  Only the part of the path inside the
        fact's strongly connected component can matter, so expressions are
        shared per (node, path restricted to its component).
        """
        g = self.graph
        comp = strongly_connected(g)
        members: Dict[int, FrozenSet[int]] = {}
        for nid, c in comp.items():
            members.setdefault(c, set()).add(nid)
        members = {c: frozenset(m) for c, m in members.items()}
        memo: Dict[Tuple[int, FrozenSet[int]], int] = {}
        work = 0

        def unfold(nid: int, path: FrozenSet[int]) -> int:
            nonlocal work
            node = g.nodes[nid]
            if node.kind == PRIMITIVE:
                path = frozenset()
            elif node.kind == DERIVED and nid in path:
                return self._const(0.0)
            ctx = path & members[comp[nid]]
            key = (nid, ctx)
            hit = memo.get(key)
            if hit is not None:
                return hit
            work += 1 + len(ctx)
            if work > max_ops:
                raise UnfoldLimitError(f"unfolding the cycles needs more than {max_ops} steps")
            cms = self._attached.get(nid, [])
            if node.kind == PRIMITIVE:
                out = self._prod(cms + [self._const(leaf_probability(node))])
            elif node.kind == DERIVATION:
                out = self._prod([unfold(p, ctx) for p in g.preds[nid]])
            else:
                inner = ctx | {nid}
                out = self._prod(cms + [self._or([unfold(p, inner) for p in g.preds[nid]])])
            memo[key] = out
            return out

        with deep_recursion():
            for nid in self.order:
                self.node_expr[nid] = unfold(nid, frozenset())

    # -- construction helpers
    def _add(self, op: Tuple[str, object]) -> int:
        idx = self._interned.get(op)
        if idx is None:
            idx = len(self.ops)
            self.ops.append(op)
            self._interned[op] = idx
        return idx

    def _const(self, c: float) -> int:
        if not 0.0 <= c <= 1.0:
            raise RiskError(f"constant {c} outside [0, 1]")
        return self._add((CONST_OP, float(c)))

    def _var(self, d: DeployedCM) -> int:
        return self._add((VAR_OP, self.var_index[d]))

    def _prod(self, children: List[int]) -> int:
        if any(self.ops[c] == (CONST_OP, 0.0) for c in children):
            return self._const(0.0)
        children = [c for c in children if self.ops[c] != (CONST_OP, 1.0)]
        if not children:
            return self._const(1.0)
        if len(children) == 1:
            return children[0]
        return self._add((PROD_OP, tuple(children)))

    def _or(self, children: List[int]) -> int:
        if any(self.ops[c] == (CONST_OP, 1.0) for c in children):
            return self._const(1.0)
        children = [c for c in children if self.ops[c] != (CONST_OP, 0.0)]
        if not children:
            return self._const(0.0)
        if len(children) == 1:
            return children[0]
        return self._add((OR_OP, tuple(children)))

    # -- evaluation
    def _check(self, deployed: Iterable[DeployedCM]) -> FrozenSet[DeployedCM]:
        s = frozenset(deployed)
        unknown = [d for d in s if d not in self.var_index]
        if unknown:
            raise UnknownVariableError(f"unknown countermeasure(s): {', '.join(map(str, sorted(unknown)))}")
        return s

    def values(self, deployed: Iterable[DeployedCM] = ()) -> List[float]:
        """Value of every expression node under a deployment set."""
        off = {self.var_index[d] for d in self._check(deployed)}
        vals: List[float] = []
        for op, arg in self.ops:
            if op == CONST_OP:
                vals.append(arg)
            elif op == VAR_OP:
                vals.append(0.0 if arg in off else 1.0)
            elif op == PROD_OP:
                v = 1.0
                for c in arg:
                    v *= vals[c]
                vals.append(v)
            elif op == OR_OP:
                vals.append(or_combine(vals[c] for c in arg))
            else:
                vals.append(sum(vals[c] for c in arg))
        return vals

    def evaluate(self, deployed: Iterable[DeployedCM] = ()) -> float:
        key = self._check(deployed)
        hit = self._cache.get(key)
        if hit is None:
            hit = self.values(key)[self.goal_expr]
            self._cache[key] = hit
        return hit

    def node_risk(self, node_id: int, deployed: Iterable[DeployedCM] = ()) -> float:
        return self.values(deployed)[self.node_expr[node_id]]

    def evaluate_many(self, masks: np.ndarray) -> np.ndarray:
        """Goal risk for many deployment sets at once.

        ``masks`` is a boolean array of shape (sets, variables); True means
        deployed.
        """
        masks = np.asarray(masks, dtype=bool)
        if masks.ndim != 2 or masks.shape[1] != len(self.variables):
            raise RiskError(f"mask shape {masks.shape} does not match {len(self.variables)} variables")
        n = masks.shape[0]
        vals: List[np.ndarray] = []
        for op, arg in self.ops:
            if op == CONST_OP:
                vals.append(np.full(n, arg))
            elif op == VAR_OP:
                vals.append(np.where(masks[:, arg], 0.0, 1.0))
            elif op == PROD_OP:
                v = np.ones(n)
                for c in arg:
                    v = v * vals[c]
                vals.append(v)
            elif op == OR_OP:
                miss = np.ones(n)
                for c in arg:
                    miss = miss * (1.0 - vals[c])
                vals.append(1.0 - miss)
            else:
                vals.append(np.sum([vals[c] for c in arg], axis=0))
        return vals[self.goal_expr]

    def delta_risk(self, plan: Iterable[DeployedCM], cm: DeployedCM) -> float:
        """Risk increase from taking ``cm`` out of ``plan``."""
        plan = self._check(plan)
        if cm not in plan:
            raise RiskError(f"{cm} is not part of the plan")
        return self.evaluate(plan - {cm}) - self.evaluate(plan)

    # -- inspection
    def _name(self, var_idx: int) -> str:
        return self.variables[var_idx].name

    def render(self, idx: Optional[int] = None) -> str:
        """Canonical text of an expression (the goal expression by default)."""
        idx = self.goal_expr if idx is None else idx
        op, arg = self.ops[idx]
        if op == CONST_OP:
            return f"{arg:.10g}"
        if op == VAR_OP:
            return self._name(arg)
        if op == PROD_OP:
            coef, names, rest = 1.0, set(), []
            stack = list(arg)
            while stack:
                c = stack.pop()
                cop, carg = self.ops[c]
                if cop == CONST_OP:
                    coef *= carg
                elif cop == VAR_OP:
                    names.add(self._name(carg))
                elif cop == PROD_OP:
                    stack.extend(carg)
                else:
                    rest.append(self.render(c))
            parts = ([] if coef == 1.0 else [f"{coef:.10g}"]) + sorted(names) + sorted(rest)
            return "*".join(parts) if parts else "1"
        name = "or" if op == OR_OP else "sum"
        return f"{name}({', '.join(sorted(self.render(c) for c in arg))})"

    def monomials(self, idx: Optional[int] = None) -> List[Monomial]:
        """Expansion into one monomial per attack path (or-nodes split into branches)."""
        idx = self.goal_expr if idx is None else idx
        op, arg = self.ops[idx]
        if op == CONST_OP:
            return [Monomial(arg, ())]
        if op == VAR_OP:
            return [Monomial(1.0, (self._name(arg),))]
        if op in (OR_OP, SUM_OP):
            out = []
            for c in arg:
                out.extend(self.monomials(c))
            return sorted(set(out), key=str)
        acc = [Monomial(1.0, ())]
        for c in arg:
            acc = [Monomial(a.coef * b.coef, tuple(sorted(set(a.variables) | set(b.variables))))
                   for a in acc for b in self.monomials(c)]
        return sorted(set(acc), key=str)

    def parent_count(self, idx: int) -> int:
        return sum(idx in arg for op, arg in self.ops if op in (PROD_OP, OR_OP, SUM_OP))


def build_risk_model(graph: AttackGraph, attachments: Mapping[int, Sequence[DeployedCM]] = (),
                     aggregate: str = "or", cycles: str = UNFOLD) -> RiskModel:
    return RiskModel(graph, attachments, aggregate, cycles)


def rebuild_oracle(kb: KnowledgeBase, goals: Sequence, graph: AttackGraph,
                   attachments: Mapping[int, Sequence[DeployedCM]],
                   deployed: Iterable[DeployedCM],
                   vulns: Optional[Mapping[str, CvssInfo]] = None,
                   vuln_predicates: Mapping[str, int] = DEFAULT_VULN_PREDICATES,
                   aggregate: str = "or", cycles: str = UNFOLD) -> float:
    """Risk obtained by deleting the cancelled facts and regenerating the graph."""
    deployed = set(deployed)
    cancelled = [graph.nodes[nid].atom.ground_key() for nid, ds in attachments.items()
                 if deployed.intersection(ds)]
    try:
        fresh = build_attack_graph(kb.without(cancelled), goals, vulns, vuln_predicates)
    except GoalNotDerivable:
        return 0.0
    return RiskModel(fresh, {}, aggregate, cycles).evaluate()
