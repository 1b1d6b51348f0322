import pytest

from cmplan.graph import (DERIVATION, DERIVED, PRIMITIVE, AGNode, AttackGraph, BipartiteError,
                          DanglingEdgeError, GoalNotDerivable, GraphError, UnknownKindError,
                          build_attack_graph, dumps_graph, export_graph, graph_from_dict,
                          graph_to_dict, import_graph, loads_graph, mulval_csv, parse_mulval_csv)
from cmplan.logic import parse_atom, parse_program
from cmplan.scenario import load_scenario


def test_dbserver_shape(dbserver):
    g = dbserver.graph
    assert len(g.nodes) == 26 and len(g.edges) == 27
    assert [len(g.of_kind(k)) for k in (DERIVATION, PRIMITIVE, DERIVED)] == [6, 15, 5]
    assert g.goals == (1,)
    assert g.nodes[1].label == "dos(attacker, dbServer)"


def test_dbserver_goal_has_two_derivations(dbserver):
    g = dbserver.graph
    assert sorted(g.nodes[p].label for p in g.preds[1]) == [
        "Rule 1: DoS by remote exploit", "Rule 5: DoS by code execution"]


def test_cvss_attached_only_to_vulnerability_leaves(dbserver):
    with_vuln = {n.label for n in dbserver.graph.nodes.values() if n.vuln is not None}
    assert with_vuln == {
        "vulHost(dbServer, 'CVE-2019-2510', oracle_mysql, remoteExploit, dos)",
        "vulHost(dbServer, 'CVE-2017-8714', windows_server_2012, localExploit, completePrivEsc)",
    }
    assert all(dbserver.graph.nodes[i].kind == PRIMITIVE for i in dbserver.graph.leaves())


def test_derivation_in_edges_are_body_atoms(dbserver):
    g = dbserver.graph
    rule4 = g.node_by_label("Rule 4: Principal has account and can access host via network")
    assert [g.nodes[p].atom.predicate for p in g.preds[rule4.id]] == [
        "isLoginService", "aclH", "netAccess", "networkService", "hasAccount"]
    assert [g.nodes[s].label for s in g.succs[rule4.id]] == ["localAccess(attacker, dbServer, admin)"]


def test_build_is_deterministic(dbserver):
    sc = dbserver.scenario
    again = build_attack_graph(parse_program(sc.program_text), sc.goals, sc.vulns)
    assert dumps_graph(again) == dumps_graph(dbserver.graph)


def test_json_round_trip_is_byte_identical(dbserver, enterprise_external):
    for g in (dbserver.graph, enterprise_external.graph):
        text = dumps_graph(g)
        assert dumps_graph(loads_graph(text)) == text


def test_mulval_round_trip(dbserver, tmp_path):
    export_graph(dbserver.graph, tmp_path / "mv", "mulval")
    back = import_graph(tmp_path / "mv", "mulval")
    assert back.canonical_edges() == dbserver.graph.canonical_edges()
    assert back.canonical_goals() == dbserver.graph.canonical_goals()
    vertices, arcs = mulval_csv(dbserver.graph)
    assert vertices.splitlines()[1] == '2,RULE 1 (DoS by remote exploit),AND,0'
    assert "2,3,-1" in arcs.splitlines()


def test_json_file_round_trip(dbserver, tmp_path):
    export_graph(dbserver.graph, tmp_path / "g.json")
    assert import_graph(tmp_path / "g.json").canonical_edges() == dbserver.graph.canonical_edges()


def test_underivable_goal():
    kb = parse_program("p(a).")
    with pytest.raises(GoalNotDerivable):
        build_attack_graph(kb, ["q(a)"])


def test_partly_derivable_goals_give_diagnostics():
    kb = parse_program("q(X) :- p(X).\np(a).")
    g = build_attack_graph(kb, ["q(a)", "q(b)"])
    assert [g.nodes[i].label for i in g.goals] == ["q(a)"]
    assert any("q(b)" in d for d in g.diagnostics)


def test_wildcard_goal_expands_to_all_answers():
    kb = parse_program("q(X) :- p(X).\np(a). p(b).")
    g = build_attack_graph(kb, [parse_atom("q(_)")])
    assert sorted(g.nodes[i].label for i in g.goals) == ["q(a)", "q(b)"]


def test_stated_fact_is_primitive_even_if_derivable():
    kb = parse_program("q(X) :- p(X).\np(a). q(a). r(X) :- q(X).")
    g = build_attack_graph(kb, ["r(a)"])
    assert g.node_by_label("q(a)").kind == PRIMITIVE


def _tiny():
    return [AGNode(1, DERIVED, "g(a)", parse_atom("g(a)")),
            AGNode(2, DERIVATION, "Rule 1: r", rule_id="1", rule_label="r"),
            AGNode(3, PRIMITIVE, "p(a)", parse_atom("p(a)"))]


def test_valid_tiny_graph():
    g = AttackGraph(_tiny(), [(3, 2), (2, 1)], [1])
    assert g.leaves() == [3]


@pytest.mark.parametrize("edges, goals, error", [
    ([(3, 1), (2, 1)], [1], BipartiteError),
    ([(3, 2), (2, 1), (2, 3)], [1], BipartiteError),
    ([(3, 2), (2, 9)], [1], DanglingEdgeError),
    ([(3, 2)], [1], GraphError),
    ([(3, 2), (2, 1)], [], GraphError),
    ([(3, 2), (2, 1)], [2], GraphError),
])
def test_invalid_graphs(edges, goals, error):
    with pytest.raises(error):
        AttackGraph(_tiny(), edges, goals)


def test_unknown_kind_rejected():
    data = graph_to_dict(AttackGraph(_tiny(), [(3, 2), (2, 1)], [1]))
    data["nodes"][2]["kind"] = "mystery"
    with pytest.raises(UnknownKindError):
        graph_from_dict(data)
    with pytest.raises(UnknownKindError):
        parse_mulval_csv("1,g(a),MAYBE,0\n", "")


def test_enterprise_internal_skips_unreachable_goal(enterprise_internal):
    g = enterprise_internal.graph
    assert len(g.goals) == 4
    assert any("emailServer" in d for d in g.diagnostics)


def test_cyclic_fixture_has_cycles(cyclic):
    g = cyclic.graph
    # some derived fact is its own ancestor
    def ancestors(n):
        seen, stack = set(), [n]
        while stack:
            for p in g.preds[stack.pop()]:
                if p not in seen:
                    seen.add(p)
                    stack.append(p)
        return seen
    assert any(n in ancestors(n) for n in g.nodes)


def test_missing_cvss_data_is_reported():
    sc = load_scenario("dbserver")
    g = build_attack_graph(parse_program(sc.program_text), sc.goals, {})
    assert any("CVE-2019-2510" in d for d in g.diagnostics)


def test_long_chain_does_not_exhaust_the_stack():
    n = 3000
    text = "p0(a).\n" + "".join(f"p{i + 1}(X) :- p{i}(X).\n" for i in range(n))
    g = build_attack_graph(parse_program(text), [f"p{n}(a)"])
    assert len(g.nodes) == 2 * n + 1 and g.nodes[1].label == f"p{n}(a)"
