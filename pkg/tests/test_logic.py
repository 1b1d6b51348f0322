import itertools

import pytest
from hypothesis import given, settings, strategies as st

from cmplan.logic import (ArityError, Atom, KnowledgeBase, LogicError, ParseError,
                          ProofOverflowError, RangeRestrictionError, StratificationError,
                          Term, const, parse_atom, parse_program, query, replay, unify, var)
from cmplan.scenario import bundled_path


@pytest.fixture(scope="module")
def dbserver_kb():
    return parse_program((bundled_path("dbserver").parent / "program.pl").read_text())


def test_fact_parses_to_empty_body():
    kb = parse_program("malicious(attacker).")
    (rule,) = kb.rules
    assert rule.is_fact and str(rule.head) == "malicious(attacker)" and rule.body == ()


def test_net_access_rule_shape():
    kb = parse_program("""
    netAccess(Principal, SrcHost, DstHost, Prot, Port) :-
        aclNW(SrcHost, DstHost, Prot, Port),
        aclH(SrcHost, SrcUser, SrcHost, DstHost, Prot, Port),
        localAccess(Principal, SrcHost, SrcUser).
    """)
    (rule,) = kb.rules
    assert rule.head.key == ("netAccess", 5)
    assert [a.predicate for a in rule.body] == ["aclNW", "aclH", "localAccess"]
    assert rule.label == "netAccess"


def test_labels_and_ids_follow_source_order(dbserver_kb):
    rules = [r for r in dbserver_kb.rules if not r.is_fact]
    assert [r.id for r in rules] == ["1", "2", "3", "4", "5"]
    assert rules[0].label == "DoS by remote exploit"
    assert rules[4].label == "DoS by code execution"


@pytest.mark.parametrize("text, error", [
    ("foo(X) :- bar(Y).", RangeRestrictionError),
    ("foo(X).", RangeRestrictionError),
    ("foo(_).", RangeRestrictionError),
    ("p(a). p(a, b).", ArityError),
    ("p(a) :- q(a", ParseError),
    ("p(a) q(b).", ParseError),
    ("p(X) :- q(X), !p(X).", StratificationError),
])
def test_parse_errors(text, error):
    with pytest.raises(error):
        parse_program(text).model


def test_parse_error_reports_position():
    with pytest.raises(ParseError) as exc:
        parse_program("p(a).\nq(X :- p(X).")
    assert (exc.value.line, exc.value.column) == (2, 5)


def test_quoted_constants_keep_their_text():
    a = parse_atom("vulHost(dbServer, 'CVE-2019-2510', x)")
    assert a.args[1] == const("CVE-2019-2510")
    assert str(a) == "vulHost(dbServer, 'CVE-2019-2510', x)"


def test_term_invariants():
    with pytest.raises(ValueError):
        Term("variable", "lower")
    with pytest.raises(ValueError):
        Term("constant", "")


@pytest.mark.parametrize("a, b, expected", [
    ("p(X, a)", "p(b, a)", {"X": "b"}),
    ("p(X, X)", "p(a, b)", None),
    ("p(_, a)", "p(c, a)", {}),
    ("p(X, Y)", "p(Y, c)", {"X": "c", "Y": "c"}),
    ("p(a)", "q(a)", None),
    ("p(a)", "p(a, b)", None),
])
def test_unify(a, b, expected):
    s = unify(parse_atom(a), parse_atom(b))
    if expected is None:
        assert s is None
    else:
        assert {k: v.text for k, v in s.items()} == expected


def test_dos_has_two_proofs(dbserver_kb):
    (answer,) = query(dbserver_kb, parse_atom("dos(attacker, dbServer)"))
    assert [t.rule_id for t in answer.traces] == ["1", "5"]


def test_exec_code_single_proof(dbserver_kb):
    (answer,) = query(dbserver_kb, parse_atom("execCode(attacker, dbServer, admin)"))
    assert len(answer.traces) == 1 and answer.traces[0].rule_id == "3"


def test_unknown_predicate_is_empty(dbserver_kb):
    assert query(dbserver_kb, parse_atom("unknownPred(x)")) == []


def test_answers_carry_substitution(dbserver_kb):
    (answer,) = query(dbserver_kb, parse_atom("dos(X, _)"))
    assert {k: v.text for k, v in answer.substitution.items()} == {"X": "attacker"}


def test_traces_replay_to_root(dbserver_kb):
    for goal in ("dos(X, Y)", "netAccess(A, B, C, D, E)", "localAccess(P, H, U)"):
        for answer in query(dbserver_kb, parse_atom(goal)):
            for trace in answer.traces:
                assert replay(dbserver_kb, trace) == answer.atom
                leaves = [t for t in _walk(trace) if not t.children]
                assert all(dbserver_kb.by_id[t.rule_id].is_fact for t in leaves)


def _walk(trace):
    yield trace
    for c in trace.children:
        yield from _walk(c)


def test_replay_rejects_forged_trace(dbserver_kb):
    (answer,) = query(dbserver_kb, parse_atom("execCode(attacker, dbServer, admin)"))
    trace = answer.traces[0]
    forged = type(trace)(parse_atom("execCode(attacker, otherHost, admin)"), trace.rule_id, trace.children)
    with pytest.raises(LogicError):
        replay(dbserver_kb, forged)


def test_recursive_program_terminates():
    kb = parse_program("""
    reach(X, Y) :- edge(X, Y).
    reach(X, Z) :- reach(X, Y), edge(Y, Z).
    edge(a, b). edge(b, a). edge(b, c).
    """)
    answers = query(kb, parse_atom("reach(a, Z)"))
    assert [str(a.atom) for a in answers] == ["reach(a, a)", "reach(a, b)", "reach(a, c)"]
    for a in answers:
        for t in a.traces:
            assert replay(kb, t) == a.atom


def test_negation_as_failure():
    kb = parse_program("""
    exposed(H) :- host(H), !firewalled(H).
    host(a). host(b). firewalled(b).
    """)
    assert [str(a.atom) for a in query(kb, parse_atom("exposed(H)"))] == ["exposed(a)"]


def test_proof_limit_overflow():
    # 2 * 2 * 2 * 2 * 2 ways to prove the goal
    text = "\n".join(f"s{i}(x) :- p{i}(x).\ns{i}(x) :- q{i}(x).\np{i}(x).\nq{i}(x)." for i in range(5))
    text += "\ngoal(x) :- " + ", ".join(f"s{i}(x)" for i in range(5)) + "."
    assert len(query(parse_program(text), parse_atom("goal(x)"))[0].traces) == 32
    with pytest.raises(ProofOverflowError):
        query(parse_program(text, proof_limit=8), parse_atom("goal(x)"))


def test_blocked_atoms_disappear(dbserver_kb):
    kb = dbserver_kb.without([("hasAccount", ("attacker", "dbServer", "admin"))])
    (answer,) = query(kb, parse_atom("dos(attacker, dbServer)"))
    assert [t.rule_id for t in answer.traces] == ["1"]


def test_duplicate_rule_ids_rejected():
    rule = parse_program("p(a).").rules[0]
    with pytest.raises(LogicError):
        KnowledgeBase([rule, rule])


def test_serialized_answers_are_deterministic(dbserver_kb):
    def dump(kb):
        return [(str(a.atom), [t.render() for t in a.traces])
                for a in query(kb, parse_atom("localAccess(P, H, U)"))]
    text = (bundled_path("dbserver").parent / "program.pl").read_text()
    assert dump(parse_program(text)) == dump(parse_program(text)) == dump(dbserver_kb)


# -- completeness against naive fixpoint enumeration -----------------------

CONSTS = ["a", "b", "c"]


def _naive(facts, rules):
    """Naive fixpoint: facts as (pred, args) tuples, rules as (head, body)."""
    known = set(facts)
    while True:
        new = set()
        for head, body in rules:
            names = sorted({t for _, args in body for t in args if t.isupper()})
            for values in itertools.product(CONSTS, repeat=len(names)):
                env = dict(zip(names, values))
                if all((p, tuple(env.get(t, t) for t in args)) in known for p, args in body):
                    new.add((head[0], tuple(env.get(t, t) for t in head[1])))
        if new <= known:
            return known
        known |= new


@st.composite
def programs(draw):
    preds = {"e": 2, "f": 1, "p0": 2, "p1": 1, "p2": 2}
    facts = draw(st.sets(st.one_of(
        st.tuples(st.just("e"), st.tuples(st.sampled_from(CONSTS), st.sampled_from(CONSTS))),
        st.tuples(st.just("f"), st.tuples(st.sampled_from(CONSTS))),
    ), min_size=1, max_size=8))
    rules = []
    available = ["e", "f"]
    for head in ("p0", "p1", "p2"):
        for _ in range(draw(st.integers(1, 2))):
            body = []
            for _ in range(draw(st.integers(1, 2))):
                pred = draw(st.sampled_from(available + [head]))
                body.append((pred, tuple(draw(st.sampled_from(["X", "Y", "a"])) for _ in range(preds[pred]))))
            body_vars = [t for _, args in body for t in args if t.isupper()]
            if not body_vars:
                continue
            args = tuple(draw(st.sampled_from(body_vars)) for _ in range(preds[head]))
            rules.append(((head, args), body))
        available.append(head)
    return facts, rules


def _render(pred, args):
    return f"{pred}({', '.join(args)})"


@settings(max_examples=60, deadline=None)
@given(programs())
def test_model_matches_naive_fixpoint(program):
    facts, rules = program
    text = "".join(f"{_render(p, a)}.\n" for p, a in sorted(facts))
    text += "".join(f"{_render(*h)} :- {', '.join(_render(*b) for b in body)}.\n" for h, body in rules)
    kb = parse_program(text)
    expected = _naive(facts, rules)
    got = {(p, args) for (p, _), vals in kb.model.facts.items() for args in vals}
    assert got == expected
    for pred in ("p0", "p1", "p2"):
        arity = 1 if pred == "p1" else 2
        goal = Atom(pred, tuple(var(f"V{i}") for i in range(arity)))
        for answer in query(kb, goal):
            assert answer.traces
            for t in answer.traces:
                assert replay(kb, t) == answer.atom


def test_long_chain_query():
    n = 2000
    text = "p0(a).\n" + "".join(f"p{i + 1}(X) :- p{i}(X).\n" for i in range(n))
    (answer,) = query(parse_program(text), parse_atom(f"p{n}(X)"))
    assert len(answer.traces) == 1
