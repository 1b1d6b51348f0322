"""Datalog subset with stratified negation and proof traces.

Programs are sets of Horn clauses over constants and variables (no
function symbols, no arithmetic).  Evaluation is bottom-up and records
every rule instance that derives an atom, so callers can walk all
derivations of an answer rather than only the first one found.

Ground atoms are handled internally as ``(predicate, args)`` tuples of
plain strings; the public :class:`Atom` / :class:`Term` types wrap them.
"""

from __future__ import annotations

import itertools
import sys
import re
from collections import defaultdict
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

CONST = "constant"
VAR = "variable"
WILD = "wildcard"

DEFAULT_PROOF_LIMIT = 64

GroundKey = Tuple[str, Tuple[str, ...]]
Substitution = Dict[str, "Term"]


class LogicError(ValueError):
    pass


class ParseError(LogicError):
    def __init__(self, message: str, line: int = 0, column: int = 0):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


class ArityError(LogicError):
    pass


class RangeRestrictionError(LogicError):
    pass


class StratificationError(LogicError):
    pass


class ProofOverflowError(LogicError):
    pass


_PLAIN_CONST = re.compile(r"^[a-z0-9][A-Za-z0-9_]*$")


@dataclass(frozen=True)
class Term:
    kind: str
    text: str

    def __post_init__(self):
        if self.kind == WILD:
            if self.text != "_":
                raise ValueError("wildcard text must be '_'")
        elif not self.text:
            raise ValueError("empty term")
        elif self.kind == VAR and not (self.text[0].isupper() or self.text[0] == "_"):
            raise ValueError(f"variable must start upper-case: {self.text!r}")

    @property
    def is_const(self) -> bool:
        return self.kind == CONST

    def __str__(self) -> str:
        if self.kind == CONST:
            return quote_constant(self.text)
        return self.text


def quote_constant(text: str) -> str:
    if _PLAIN_CONST.match(text):
        return text
    return "'" + text.replace("'", "''") + "'"


def const(text: str) -> Term:
    return Term(CONST, str(text))


def var(name: str) -> Term:
    return Term(WILD, "_") if name == "_" else Term(VAR, name)


WILDCARD = Term(WILD, "_")


@dataclass(frozen=True)
class Atom:
    predicate: str
    args: Tuple[Term, ...] = ()

    @property
    def key(self) -> Tuple[str, int]:
        return (self.predicate, len(self.args))

    @property
    def is_ground(self) -> bool:
        return all(t.kind == CONST for t in self.args)

    def variables(self) -> List[str]:
        return [t.text for t in self.args if t.kind == VAR]

    def ground_key(self) -> GroundKey:
        if not self.is_ground:
            raise ValueError(f"atom is not ground: {self}")
        return (self.predicate, tuple(t.text for t in self.args))

    @classmethod
    def from_key(cls, key: GroundKey) -> "Atom":
        return cls(key[0], tuple(Term(CONST, a) for a in key[1]))

    def __str__(self) -> str:
        return f"{self.predicate}({', '.join(str(t) for t in self.args)})"


def render_key(key: GroundKey) -> str:
    return f"{key[0]}({', '.join(quote_constant(a) for a in key[1])})"


@dataclass(frozen=True)
class HornRule:
    """One clause.  ``demand`` rules have head variables that are only bound
    by the query goal (mitigation-action matching rules); they are answered
    top-down and never take part in the bottom-up fixpoint."""

    id: str
    label: str
    head: Atom
    body: Tuple[Atom, ...] = ()
    negated_body: Tuple[Atom, ...] = ()
    demand: bool = False

    @property
    def is_fact(self) -> bool:
        return not self.body and not self.negated_body

    def __str__(self) -> str:
        if self.is_fact:
            return f"{self.head}."
        parts = [str(a) for a in self.body] + [f"!{a}" for a in self.negated_body]
        return f"{self.head} :- {', '.join(parts)}."


def check_rule(rule: HornRule) -> None:
    """Raise RangeRestrictionError for unsafe clauses."""
    if rule.is_fact:
        if not rule.head.is_ground:
            raise RangeRestrictionError(
                f"fact {rule.head} must be ground (no variables or wildcards)")
        return
    bound = {v for a in rule.body for v in a.variables()}
    if not rule.demand:
        missing = [v for v in rule.head.variables() if v not in bound]
        if missing:
            raise RangeRestrictionError(
                f"head variable(s) {', '.join(sorted(set(missing)))} of rule "
                f"{rule.id} do not occur in the positive body")
        if any(t.kind == WILD for t in rule.head.args):
            raise RangeRestrictionError(f"wildcard in head of rule {rule.id}")


class Model:
    """Least model of the range-restricted part of a knowledge base."""

    def __init__(self):
        self.facts: Dict[Tuple[str, int], set] = defaultdict(set)
        # primitive facts: ground key -> rule id of the stated fact
        self.primitive: Dict[GroundKey, str] = {}
        # derived atom -> ordered list of (rule id, body ground keys)
        self.support: Dict[GroundKey, List[Tuple[str, Tuple[GroundKey, ...]]]] = {}

    def __contains__(self, key: GroundKey) -> bool:
        return key[1] in self.facts.get((key[0], len(key[1])), ())

    def atoms(self, pred_key: Tuple[str, int]) -> set:
        return self.facts.get(pred_key, set())

    def __len__(self) -> int:
        return sum(len(s) for s in self.facts.values())


@dataclass(frozen=True)
class ProofTrace:
    atom: Atom
    rule_id: str
    children: Tuple["ProofTrace", ...] = ()

    def atoms(self) -> Iterator[Atom]:
        yield self.atom
        for c in self.children:
            yield from c.atoms()

    def render(self) -> str:
        if not self.children:
            return f"{self.atom}@{self.rule_id}"
        inner = ", ".join(c.render() for c in self.children)
        return f"{self.atom}@{self.rule_id}[{inner}]"

    def __str__(self) -> str:
        return self.render()


@dataclass(frozen=True)
class Answer:
    atom: Atom
    substitution: Dict[str, Term] = field(hash=False, compare=False)
    traces: Tuple[ProofTrace, ...] = ()


class KnowledgeBase:
    """An immutable collection of rules, indexed by (predicate, arity)."""

    def __init__(self, rules: Iterable[HornRule] = (), proof_limit: int = DEFAULT_PROOF_LIMIT,
                 blocked: Iterable[GroundKey] = ()):
        self.rules: Tuple[HornRule, ...] = tuple(rules)
        self.proof_limit = proof_limit
        # atoms that may never hold (used to simulate cancelled facts)
        self.blocked = frozenset(blocked)
        self.by_id: Dict[str, HornRule] = {}
        self.index: Dict[Tuple[str, int], List[str]] = defaultdict(list)
        self._order: Dict[str, int] = {}
        for pos, r in enumerate(self.rules):
            if r.id in self.by_id:
                raise LogicError(f"duplicate rule id {r.id!r}")
            check_rule(r)
            self.by_id[r.id] = r
            self.index[r.head.key].append(r.id)
            self._order[r.id] = pos
        self._model: Optional[Model] = None

    def extend(self, rules: Iterable[HornRule]) -> "KnowledgeBase":
        return KnowledgeBase(self.rules + tuple(rules), self.proof_limit, self.blocked)

    def without(self, keys: Iterable[GroundKey]) -> "KnowledgeBase":
        """Copy in which the given ground atoms can neither be stated nor derived."""
        return KnowledgeBase(self.rules, self.proof_limit, self.blocked | frozenset(keys))

    def rule_order(self, rule_id: str) -> int:
        return self._order[rule_id]

    def knows(self, key: Tuple[str, int]) -> bool:
        return key in self.index

    @property
    def model(self) -> Model:
        if self._model is None:
            self._model = evaluate_program(self)
        return self._model

    def __len__(self) -> int:
        return len(self.rules)


# ---------------------------------------------------------------------------
# parsing

_TOKEN = re.compile(
    r"""
    (?P<ws>[ \t\r\n]+)
  | (?P<label>%[ \t]*label:[^\n]*)
  | (?P<comment>%[^\n]*)
  | (?P<block>/\*.*?\*/)
  | (?P<quoted>'(?:[^']|'')*')
  | (?P<neck>:-)
  | (?P<neg>!|\\\+)
  | (?P<ident>[A-Za-z0-9_]+)
  | (?P<punct>[(),.])
    """,
    re.VERBOSE | re.DOTALL,
)


def _tokenize(text: str):
    pos, line, col = 0, 1, 1
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m:
            raise ParseError(f"unexpected character {text[pos]!r}", line, col)
        kind = m.lastgroup
        value = m.group()
        if kind not in ("ws", "comment", "block"):
            yield kind, value, line, col
        nl = value.count("\n")
        if nl:
            line += nl
            col = len(value) - value.rfind("\n")
        else:
            col += len(value)
        pos = m.end()
    yield "eof", "", line, col


class _Parser:
    def __init__(self, text: str):
        self.tokens = list(_tokenize(text))
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self, kind=None, value=None):
        tok = self.tokens[self.i]
        if (kind and tok[0] != kind) or (value and tok[1] != value):
            want = value or kind
            raise ParseError(f"expected {want!r}, found {tok[1] or 'end of input'!r}", tok[2], tok[3])
        self.i += 1
        return tok

    def term(self) -> Term:
        kind, value, line, col = self.peek()
        if kind == "quoted":
            self.i += 1
            return Term(CONST, value[1:-1].replace("''", "'"))
        if kind == "ident":
            self.i += 1
            if value == "_":
                return WILDCARD
            if value[0].isupper() or value[0] == "_":
                return Term(VAR, value)
            return Term(CONST, value)
        raise ParseError(f"expected a term, found {value or 'end of input'!r}", line, col)

    def atom(self) -> Atom:
        kind, value, line, col = self.take("ident")
        if value[0].isupper() or value[0] == "_":
            raise ParseError(f"predicate name must start lower-case: {value!r}", line, col)
        args: List[Term] = []
        if self.peek()[1] == "(":
            self.take("punct", "(")
            if self.peek()[1] != ")":
                args.append(self.term())
                while self.peek()[1] == ",":
                    self.take("punct", ",")
                    args.append(self.term())
            self.take("punct", ")")
        return Atom(value, tuple(args))

    def literal(self) -> Tuple[bool, Atom]:
        if self.peek()[0] == "neg":
            self.i += 1
            return True, self.atom()
        return False, self.atom()


def parse_atom(text: str) -> Atom:
    p = _Parser(text)
    a = p.atom()
    if p.peek()[1] == ".":
        p.i += 1
    p.take("eof")
    return a


def parse_clauses(text: str) -> List[Tuple[Optional[str], Atom, List[Atom], List[Atom], int, int]]:
    """Return raw clauses as (label, head, body, negated_body, line, col)."""
    p = _Parser(text)
    out = []
    pending_label = None
    while True:
        kind, value, line, col = p.peek()
        if kind == "eof":
            break
        if kind == "label":
            pending_label = value.split(":", 1)[1].strip() or None
            p.i += 1
            continue
        head = p.atom()
        body, neg = [], []
        if p.peek()[0] == "neck":
            p.i += 1
            while True:
                is_neg, a = p.literal()
                (neg if is_neg else body).append(a)
                if p.peek()[1] == ",":
                    p.i += 1
                    continue
                break
        p.take("punct", ".")
        out.append((pending_label, head, body, neg, line, col))
        pending_label = None
    return out


def parse_program(text: str, proof_limit: int = DEFAULT_PROOF_LIMIT) -> KnowledgeBase:
    """Parse program text into a knowledge base.

    Proper rules get ids "1", "2", ... and facts "f1", "f2", ... in source
    order.  A ``%label: ...`` comment names the clause that follows it.
    """
    rules = []
    arity: Dict[str, Tuple[int, int]] = {}
    n_rules = n_facts = 0
    for label, head, body, neg, line, col in parse_clauses(text):
        for a in [head, *body, *neg]:
            seen = arity.setdefault(a.predicate, (len(a.args), line))
            if seen[0] != len(a.args):
                raise ArityError(
                    f"line {line}: predicate {a.predicate!r} used with arity "
                    f"{len(a.args)} but arity {seen[0]} on line {seen[1]}")
        if body or neg:
            n_rules += 1
            rid = str(n_rules)
        else:
            n_facts += 1
            rid = f"f{n_facts}"
        rule = HornRule(rid, label or head.predicate, head, tuple(body), tuple(neg))
        try:
            check_rule(rule)
        except RangeRestrictionError as exc:
            raise RangeRestrictionError(f"line {line}, column {col}: {exc}") from None
        rules.append(rule)
    return KnowledgeBase(rules, proof_limit=proof_limit)


# ---------------------------------------------------------------------------
# unification

def _walk(t: Term, s: Dict[str, Term]) -> Term:
    while t.kind == VAR and t.text in s:
        t = s[t.text]
    return t


def unify(a: Atom, b: Atom, subst: Optional[Substitution] = None) -> Optional[Substitution]:
    """Most general unifier of two atoms, or None.  Wildcards bind nothing."""
    if a.key != b.key:
        return None
    s = dict(subst or {})
    for x, y in zip(a.args, b.args):
        x, y = _walk(x, s), _walk(y, s)
        if x.kind == WILD or y.kind == WILD:
            continue
        if x == y:
            continue
        if x.kind == VAR:
            s[x.text] = y
        elif y.kind == VAR:
            s[y.text] = x
        else:
            return None
    return {k: _walk(v, s) for k, v in s.items()}


def substitute(atom: Atom, subst: Substitution) -> Atom:
    if not subst:
        return atom
    return Atom(atom.predicate, tuple(_walk(t, subst) for t in atom.args))


# ---------------------------------------------------------------------------
# bottom-up evaluation

def _match(atom: Atom, values: Tuple[str, ...], env: Dict[str, str]) -> Optional[Dict[str, str]]:
    new = None
    for t, v in zip(atom.args, values):
        k = t.kind
        if k == CONST:
            if t.text != v:
                return None
        elif k == VAR:
            cur = env.get(t.text) if new is None else new.get(t.text)
            if cur is None:
                if new is None:
                    new = dict(env)
                new[t.text] = v
            elif cur != v:
                return None
    return env if new is None else new


def _bound_positions(body: Sequence[Atom], initial=()) -> List[Tuple[int, ...]]:
    """Argument positions of each body atom that are fixed when the join reaches it."""
    bound = set(initial)
    out = []
    for atom in body:
        out.append(tuple(j for j, t in enumerate(atom.args)
                         if t.kind == CONST or (t.kind == VAR and t.text in bound)))
        bound.update(t.text for t in atom.args if t.kind == VAR)
    return out


def _indexed(body: Sequence[Atom], sources: Sequence, initial=()) -> list:
    indexes = []
    for positions, src in zip(_bound_positions(body, initial), sources):
        index: Dict[tuple, list] = defaultdict(list)
        for values in src:
            index[tuple(values[j] for j in positions)].append(values)
        indexes.append((positions, index))
    return indexes


def _join(body: Sequence[Atom], indexes: Sequence, env: Dict[str, str], i: int = 0):
    if i == len(body):
        yield env
        return
    atom = body[i]
    positions, index = indexes[i]
    args = atom.args
    probe = tuple(args[j].text if args[j].kind == CONST else env[args[j].text] for j in positions)
    for values in index.get(probe, ()):
        e = _match(atom, values, env)
        if e is not None:
            yield from _join(body, indexes, e, i + 1)


def _ground(atom: Atom, env: Dict[str, str]) -> GroundKey:
    return (atom.predicate, tuple(t.text if t.kind == CONST else env[t.text] for t in atom.args))


def _negation_holds(neg: Sequence[Atom], env: Dict[str, str], model: Model) -> bool:
    """True when no negated atom has a matching fact."""
    for atom in neg:
        for values in model.atoms(atom.key):
            if _match(atom, values, env) is not None:
                return False
    return True


def stratify(rules: Sequence[HornRule]) -> Dict[Tuple[str, int], int]:
    preds = set()
    deps = []
    for r in rules:
        preds.add(r.head.key)
        for a in r.body:
            preds.add(a.key)
            deps.append((r.head.key, a.key, 0))
        for a in r.negated_body:
            preds.add(a.key)
            deps.append((r.head.key, a.key, 1))
    stratum = {p: 0 for p in preds}
    limit = len(preds)
    changed = True
    while changed:
        changed = False
        for head, dep, weight in deps:
            need = stratum[dep] + weight
            if stratum[head] < need:
                if need > limit:
                    raise StratificationError(
                        f"negation through recursion involving {head[0]}/{head[1]}")
                stratum[head] = need
                changed = True
    return stratum


def evaluate_program(kb: KnowledgeBase) -> Model:
    """Semi-naive bottom-up fixpoint, recording every derivation."""
    model = Model()
    blocked = kb.blocked
    rules = [r for r in kb.rules if not r.demand]
    for r in rules:
        if r.is_fact:
            key = r.head.ground_key()
            if key in blocked or key in model.primitive:
                continue
            model.primitive[key] = r.id
            model.facts[r.head.key].add(key[1])
    proper = [r for r in rules if not r.is_fact]
    strata = stratify(proper)
    levels = sorted({strata[r.head.key] for r in proper})
    seen_derivations = set()

    def fire(rule, sources, out):
        for env in _join(rule.body, _indexed(rule.body, sources), {}):
            if rule.negated_body and not _negation_holds(rule.negated_body, env, model):
                continue
            head = _ground(rule.head, env)
            if head in blocked or head in model.primitive:
                continue
            body = tuple(_ground(a, env) for a in rule.body)
            d = (rule.id, head, body)
            if d in seen_derivations:
                continue
            seen_derivations.add(d)
            model.support.setdefault(head, []).append((rule.id, body))
            out.append(head)

    for level in levels:
        layer = [r for r in proper if strata[r.head.key] == level]
        layer_preds = {r.head.key for r in layer}
        new: List[GroundKey] = []
        for r in layer:
            fire(r, [list(model.atoms(a.key)) for a in r.body], new)
        delta = _absorb(model, new)
        users: Dict[Tuple[str, int], List[HornRule]] = defaultdict(list)
        position = {id(r): n for n, r in enumerate(layer)}
        for r in layer:
            for key in dict.fromkeys(a.key for a in r.body if a.key in layer_preds):
                users[key].append(r)
        while delta:
            new = []
            for r in _rules_using(users, position, delta):
                for i, a in enumerate(r.body):
                    if not delta.get(a.key):
                        continue
                    sources = [list(model.atoms(b.key)) for b in r.body]
                    sources[i] = delta[a.key]
                    fire(r, sources, new)
            delta = _absorb(model, new)
    for derivs in model.support.values():
        derivs.sort(key=lambda d: (kb.rule_order(d[0]), [render_key(b) for b in d[1]]))
    return model


def _rules_using(users, position: Dict[int, int], delta) -> List[HornRule]:
    """Rules with a body atom over a predicate that just grew, in layer order."""
    hit = {id(r): r for key in delta for r in users.get(key, ())}
    return [hit[k] for k in sorted(hit, key=position.__getitem__)]


def _absorb(model: Model, new: List[GroundKey]) -> Dict[Tuple[str, int], list]:
    delta: Dict[Tuple[str, int], list] = defaultdict(list)
    for pred, args in new:
        bucket = model.facts[(pred, len(args))]
        if args not in bucket:
            bucket.add(args)
            delta[(pred, len(args))].append(args)
    return delta


# ---------------------------------------------------------------------------
# proofs and queries

class _Prover:
    def __init__(self, kb: KnowledgeBase):
        self.kb = kb
        self.model = kb.model
        self.limit = kb.proof_limit
        self.memo: Dict[GroundKey, Tuple[ProofTrace, ...]] = {}

    def proofs(self, key: GroundKey, path: frozenset = frozenset()) -> Tuple[ProofTrace, ...]:
        """All non-circular proof trees of a ground atom."""
        if key in self.model.primitive:
            return (ProofTrace(Atom.from_key(key), self.model.primitive[key]),)
        memo_ok = not path
        if memo_ok and key in self.memo:
            return self.memo[key]
        inner = path | {key}
        out: List[ProofTrace] = []
        atom = Atom.from_key(key)
        for rule_id, body in self.model.support.get(key, ()):
            if any(b in inner for b in body):
                continue
            child_sets = [self.proofs(b, inner) for b in body]
            for combo in itertools.product(*child_sets):
                out.append(ProofTrace(atom, rule_id, combo))
                if len(out) > self.limit:
                    raise ProofOverflowError(
                        f"more than {self.limit} proofs for {render_key(key)}")
        result = tuple(out)
        if memo_ok:
            self.memo[key] = result
        return result


def _answers_from_model(kb: KnowledgeBase, goal: Atom) -> List[GroundKey]:
    out = []
    for values in kb.model.atoms(goal.key):
        cand = (goal.predicate, values)
        if unify(goal, Atom.from_key(cand)) is not None:
            out.append(cand)
    return out


def _solve_demand(kb: KnowledgeBase, rule: HornRule, goal: Atom, prover: _Prover):
    s = unify(rule.head, goal)
    if s is None:
        return
    env = {k: v.text for k, v in s.items() if v.kind == CONST}
    sources = [list(kb.model.atoms(a.key)) for a in rule.body]
    for e in _join(rule.body, _indexed(rule.body, sources, env), env):
        if rule.negated_body and not _negation_holds(rule.negated_body, e, kb.model):
            continue
        try:
            head = _ground(rule.head, e)
        except KeyError:
            raise RangeRestrictionError(
                f"goal {goal} leaves head of rule {rule.id} non-ground") from None
        body = tuple(_ground(a, e) for a in rule.body)
        yield head, body, e


@contextmanager
def deep_recursion(limit: int = 20000):
    """Proof trees are nested one frame per derivation step; allow long chains."""
    old = sys.getrecursionlimit()
    sys.setrecursionlimit(max(old, limit))
    try:
        yield
    finally:
        sys.setrecursionlimit(old)


def query(kb: KnowledgeBase, goal: Atom) -> List[Answer]:
    """Every ground answer to ``goal`` with all of its proof traces.

    Answers are ordered by the text of the ground atom.
    """
    if not kb.knows(goal.key):
        return []
    with deep_recursion():
        return _query(kb, goal)


def _query(kb: KnowledgeBase, goal: Atom) -> List[Answer]:
    prover = _Prover(kb)
    found: Dict[GroundKey, List[ProofTrace]] = {}
    for key in _answers_from_model(kb, goal):
        found[key] = list(prover.proofs(key))
    for rid in kb.index.get(goal.key, ()):
        rule = kb.by_id[rid]
        if not rule.demand:
            continue
        for head, body, _ in _solve_demand(kb, rule, goal, prover):
            bucket = found.setdefault(head, [])
            child_sets = [prover.proofs(b) for b in body]
            atom = Atom.from_key(head)
            for combo in itertools.product(*child_sets):
                bucket.append(ProofTrace(atom, rule.id, combo))
                if len(bucket) > kb.proof_limit:
                    raise ProofOverflowError(
                        f"more than {kb.proof_limit} proofs for {render_key(head)}")
    answers = []
    for key in sorted(found, key=render_key):
        atom = Atom.from_key(key)
        subst = unify(goal, atom) or {}
        subst = {k: v for k, v in subst.items() if v.kind == CONST}
        traces = tuple(sorted(set(found[key]), key=lambda t: t.render()))
        answers.append(Answer(atom, subst, traces))
    return answers


def replay(kb: KnowledgeBase, trace: ProofTrace) -> Atom:
    """Re-derive the root atom of a trace from its leaves; raises on mismatch."""
    rule = kb.by_id[trace.rule_id]
    if rule.is_fact:
        if rule.head != trace.atom:
            raise LogicError(f"leaf {trace.atom} is not fact {rule.id}")
        return trace.atom
    if len(trace.children) != len(rule.body):
        raise LogicError(f"trace for rule {rule.id} has wrong number of children")
    s: Optional[Substitution] = {}
    for body_atom, child in zip(rule.body, trace.children):
        derived = replay(kb, child)
        s = unify(body_atom, derived, s)
        if s is None:
            raise LogicError(f"child {derived} does not match body atom {body_atom}")
    s = unify(rule.head, trace.atom, s)
    if s is None:
        raise LogicError(f"head of rule {rule.id} does not match {trace.atom}")
    head = substitute(rule.head, s)
    if head != trace.atom:
        raise LogicError(f"rule {rule.id} derives {head}, trace claims {trace.atom}")
    env = {k: v.text for k, v in s.items() if v.kind == CONST}
    if rule.negated_body and not _negation_holds(rule.negated_body, env, kb.model):
        raise LogicError(f"negated condition of rule {rule.id} fails for {trace.atom}")
    return head
