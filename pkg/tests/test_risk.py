import itertools
import random

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cmplan.catalog import DeployedCM
from cmplan.cvss import CvssInfo
from cmplan.graph import DERIVATION, DERIVED, PRIMITIVE, AGNode, AttackGraph, build_attack_graph
from cmplan.logic import parse_atom, parse_program
from cmplan.risk import (CUT, UNFOLD, CycleRemovalError, RiskError, RiskModel,
                         UnknownVariableError, leaf_probability, or_combine, rebuild_oracle,
                         remove_cycles)
from cmplan.synthetic import random_graph, random_instance

from conftest import by_name


def test_leaf_probability(dbserver):
    g = dbserver.graph
    assert leaf_probability(g.nodes[9]) == 0.65
    assert leaf_probability(g.nodes[15]) == 0.37
    assert leaf_probability(g.nodes[8]) == 1.0


@given(st.lists(st.floats(0, 1), max_size=6))
def test_or_combine_is_inclusion_exclusion(ps):
    expected = 0.0
    for k in range(1, len(ps) + 1):
        for combo in itertools.combinations(ps, k):
            expected += (-1) ** (k + 1) * float(np.prod(combo))
    assert or_combine(ps) == pytest.approx(expected, abs=1e-9)


def test_dbserver_render(dbserver):
    assert dbserver.model.render() == (
        "or(0.37*C1@dbServer*C2@(internet,dbSubnet)*C4@dbServer*C5@dbServer, "
        "0.65*C1@dbServer*C2@(internet,dbSubnet)*C3@dbServer)")


@pytest.mark.parametrize("deployed, risk", [
    ((), 0.7795),
    (("C3@dbServer",), 0.37),
    (("C5@dbServer",), 0.65),
    (("C3@dbServer", "C5@dbServer"), 0.0),
    (("C1@dbServer",), 0.0),
    (("C2@(internet,dbSubnet)",), 0.0),
    (("C4@dbServer",), 0.65),
])
def test_dbserver_evaluate(dbserver, deployed, risk):
    assert dbserver.model.evaluate(by_name(dbserver.model, *deployed)) == pytest.approx(risk, abs=1e-12)


def test_delta_risk(dbserver):
    m = dbserver.model
    plan = by_name(m, "C3@dbServer", "C4@dbServer", "C5@dbServer")
    c3, c4, _ = plan
    assert m.delta_risk(plan, c3) == pytest.approx(0.65)
    assert m.delta_risk(plan, c4) == 0.0
    with pytest.raises(RiskError):
        m.delta_risk(plan[1:], c3)


def test_unknown_variable(dbserver):
    with pytest.raises(UnknownVariableError):
        dbserver.model.evaluate([DeployedCM("99", "x", ("nowhere",), 1)])


def test_node_risk(dbserver):
    m = dbserver.model
    # the code-execution fact carries only the local exploit and C4
    assert m.node_risk(13) == pytest.approx(0.37)
    assert m.node_risk(13, by_name(m, "C4@dbServer")) == 0.0


def test_rebuild_oracle_example(dbserver):
    p = dbserver
    risk = rebuild_oracle(p.kb, p.scenario.goals, p.graph, p.resolution.attachments,
                          by_name(p.model, "C3@dbServer"), p.scenario.vulns)
    assert risk == pytest.approx(0.37)
    gone = rebuild_oracle(p.kb, p.scenario.goals, p.graph, p.resolution.attachments,
                          by_name(p.model, "C1@dbServer"), p.scenario.vulns)
    assert gone == 0.0


def test_evaluate_many_matches_evaluate(enterprise_external):
    m = enterprise_external.model
    rng = np.random.default_rng(0)
    masks = rng.random((64, len(m.variables))) < 0.5
    batch = m.evaluate_many(masks)
    for mask, value in zip(masks, batch):
        plan = [d for d, on in zip(m.variables, mask) if on]
        assert value == pytest.approx(m.evaluate(plan), abs=1e-12)
    with pytest.raises(RiskError):
        m.evaluate_many(np.zeros((1, len(m.variables) + 1), dtype=bool))


def test_sum_aggregation_bounds_or(enterprise_external):
    p = enterprise_external
    summed = RiskModel(p.graph, p.resolution.attachments, aggregate="sum")
    assert summed.evaluate() >= p.model.evaluate()
    with pytest.raises(RiskError):
        RiskModel(p.graph, p.resolution.attachments, aggregate="max")


# -- properties over random acyclic graphs ----------------------------------

def _naive_risk(graph, attachments, deployed):
    """Straight recursion over the graph, no sharing."""
    def value(nid):
        node = graph.nodes[nid]
        off = any(d in deployed for d in attachments.get(nid, ()))
        if node.kind == PRIMITIVE:
            return 0.0 if off else leaf_probability(node)
        if node.kind == DERIVATION:
            return float(np.prod([value(p) for p in graph.preds[nid]]))
        return 0.0 if off else or_combine(value(p) for p in graph.preds[nid])
    return or_combine(value(g) for g in graph.goals)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.data())
def test_model_matches_naive_recursion(seed, data):
    problem = random_instance(seed)
    m = problem.model
    subset = data.draw(st.sets(st.sampled_from(m.variables))) if m.variables else set()
    expected = _naive_risk(m.graph, m.attachments, subset)
    assert m.evaluate(subset) == pytest.approx(expected, abs=1e-12)
    assert 0.0 <= m.evaluate(subset) <= 1.0


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.data())
def test_deploying_more_never_raises_risk(seed, data):
    m = random_instance(seed).model
    if not m.variables:
        return
    small = data.draw(st.sets(st.sampled_from(m.variables)))
    extra = data.draw(st.sets(st.sampled_from(m.variables)))
    assert m.evaluate(small | extra) <= m.evaluate(small) + 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_unfold_and_cut_agree_without_cycles(seed):
    problem = random_instance(seed)
    g, att = problem.model.graph, problem.model.attachments
    cut, unfold = RiskModel(g, att, cycles=CUT), RiskModel(g, att, cycles=UNFOLD)
    assert cut.removed_edges == [] and cut.render() == unfold.render()


def test_shared_subexpressions_are_interned():
    # two derivations share a premise: its expression appears once in the DAG
    graph = random_graph(random.Random(3), leaves=4, derived=4)
    m = RiskModel(graph)
    assert len(m.ops) == len(set(m.ops))


# -- cycles -----------------------------------------------------------------

def test_cyclic_fixture(cyclic):
    m = cyclic.model
    assert m.removed_edges == [(8, 7), (17, 3)]
    assert m.cycles == UNFOLD
    assert m.render() == "0.12*Cpatch@b*Cpatch@c*Cpatch@d"


def test_cyclic_fixture_matches_regeneration(cyclic):
    p = cyclic
    for r in range(len(p.model.variables) + 1):
        for subset in itertools.combinations(p.model.variables, r):
            b = rebuild_oracle(p.kb, p.scenario.goals, p.graph, p.resolution.attachments, subset,
                               p.scenario.vulns)
            assert p.model.evaluate(subset) == pytest.approx(b, abs=1e-12)


def test_cut_mode_on_cyclic_fixture(cyclic):
    m = RiskModel(cyclic.graph, cyclic.resolution.attachments, cycles=CUT)
    assert m.removed_edges == cyclic.model.removed_edges
    assert 0.0 <= m.evaluate() <= 1.0


def test_remove_cycles_is_deterministic(cyclic):
    assert remove_cycles(cyclic.graph) == remove_cycles(cyclic.graph)


def test_remove_cycles_reports_unbreakable_cycle():
    # a cycle whose derived facts each have a single derivation has no entry point
    nodes = [AGNode(1, DERIVED, "a(x)", parse_atom("a(x)")),
             AGNode(2, DERIVATION, "Rule 1: r", rule_id="1", rule_label="r"),
             AGNode(3, DERIVED, "b(x)", parse_atom("b(x)")),
             AGNode(4, DERIVATION, "Rule 2: r", rule_id="2", rule_label="r")]
    g = AttackGraph(nodes, [(1, 2), (2, 3), (3, 4), (4, 1)], [1])
    with pytest.raises(CycleRemovalError):
        remove_cycles(g)


def test_unfold_falls_back_to_cutting_on_large_cycles():
    n = 60
    text = "start(a).\n" + "".join(f"p{i + 1}(X) :- p{i}(X).\n" for i in range(n))
    text += f"p0(X) :- start(X).\np0(X) :- p{n}(X).\n"
    g = build_attack_graph(parse_program(text), [f"p{n}(a)"])
    exact = RiskModel(g)
    limited = RiskModel(g, max_ops=50)
    assert exact.cycles == UNFOLD and limited.cycles == CUT and limited.diagnostics
    assert limited.evaluate() == exact.evaluate() == 1.0


def test_cvss_leaves_in_equations():
    kb = parse_program("g(x) :- v(x).\nv(x).")
    g = build_attack_graph(kb, ["g(x)"], {"x": CvssInfo("v3", "high", "none")}, {"v": 0})
    assert RiskModel(g).evaluate() == 0.37


@settings(max_examples=40, deadline=None)
@given(st.sets(st.tuples(st.integers(0, 4), st.integers(0, 4)), min_size=3, max_size=12),
       st.lists(st.sampled_from([0.2, 0.5, 0.9]), min_size=5, max_size=5), st.data())
def test_unfolded_cycles_match_regeneration(links, probs, data):
    text = "reach(X) :- start(X).\nreach(Y) :- reach(X), link(X, Y), vul(Y).\nstart(h0).\n"
    text += "".join(f"link(h{a}, h{b}).\n" for a, b in sorted(links) if a != b)
    text += "".join(f"vul(h{i}).\n" for i in range(1, 5))
    kb = parse_program(text)
    reachable = [f"reach(h{i})" for i in range(1, 5) if ("reach", (f"h{i}",)) in kb.model]
    if not reachable:
        return
    goal = data.draw(st.sampled_from(reachable))
    vulns = {f"h{i}": CvssInfo("v3", "low", "none", explicit_probability=probs[i], vuln_id=f"h{i}")
             for i in range(5)}
    graph = build_attack_graph(kb, [goal], vulns, {"vul": 0})
    attachments = {n.id: [DeployedCM("p", "1", (n.atom.args[0].text,), 1)]
                   for n in graph.nodes.values() if n.kind == PRIMITIVE and n.atom.predicate == "vul"}
    m = RiskModel(graph, attachments)
    subset = data.draw(st.sets(st.sampled_from(m.variables))) if m.variables else set()
    expected = rebuild_oracle(kb, [goal], graph, attachments, subset, vulns, {"vul": 0})
    assert m.evaluate(subset) == pytest.approx(expected, abs=1e-12)
