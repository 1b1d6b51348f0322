"""Scenario files: a program, a catalog, products, policy and attacker profiles.

A scenario is a JSON file whose paths are relative to the file itself::

    {"program": "program.pl", "catalog": "catalog.json", "repo": "repo.json",
     "policy": "policy.json", "vulns": "vulns.json",
     "goals": ["dos(attacker, dbServer)"],
     "profiles": {"internal": {"facts": ["localAccess(attacker, host23, user)"]}},
     "default_profile": "internal"}
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence

from .catalog import (Countermeasure, Match, MitigationAction, Resolution, load_catalog,
                      load_policy, load_repo, match_graph, resolve_countermeasures)
from .cvss import CvssInfo
from .graph import DEFAULT_VULN_PREDICATES, AttackGraph, build_attack_graph
from .logic import Atom, KnowledgeBase, parse_program
from .risk import RiskModel


class ScenarioError(ValueError):
    pass


@dataclass
class Scenario:
    name: str
    program_text: str
    goals: List[str]
    catalog: List[MitigationAction] = field(default_factory=list)
    repo: List[Countermeasure] = field(default_factory=list)
    policy: List[Atom] = field(default_factory=list)
    vulns: Dict[str, CvssInfo] = field(default_factory=dict)
    vuln_predicates: Mapping[str, int] = field(default_factory=lambda: dict(DEFAULT_VULN_PREDICATES))
    aggregate: str = "or"

    @property
    def products(self) -> Dict[str, str]:
        return {cm.id: f"{cm.manufacturer} {cm.product_id}".strip() for cm in self.repo}


@dataclass
class Pipeline:
    scenario: Scenario
    kb: KnowledgeBase
    graph: AttackGraph
    matches: Dict[int, List[Match]]
    resolution: Resolution
    model: RiskModel


def load_vulns(src) -> Dict[str, CvssInfo]:
    data = src if isinstance(src, list) else json.loads(Path(src).read_text())
    out = {}
    for d in data:
        info = CvssInfo.from_json(d)
        if info.vuln_id is None:
            raise ScenarioError(f"vulnerability entry without id: {d}")
        out[info.vuln_id] = info
    return out


def bundled_path(name: str) -> Path:
    """Scenario file of a bundled fixture (``dbserver``, ``enterprise``, ``cyclic``)."""
    path = Path(str(resources.files("cmplan") / "data" / name / "scenario.json"))
    if not path.exists():
        raise ScenarioError(f"no bundled scenario named {name!r}")
    return path


def load_scenario(path, attacker: Optional[str] = None) -> Scenario:
    path = Path(path)
    if path.is_dir():
        path = path / "scenario.json"
    if not path.exists() and not path.suffix:
        path = bundled_path(str(path))
    spec = json.loads(path.read_text())
    base = path.parent

    def rel(key):
        return base / spec[key] if spec.get(key) else None

    program = rel("program").read_text()
    goals = list(spec.get("goals", []))
    profiles = spec.get("profiles", {})
    attacker = attacker or spec.get("default_profile")
    if attacker is not None:
        if attacker not in profiles:
            raise ScenarioError(f"unknown attacker profile {attacker!r}; known: {sorted(profiles)}")
        prof = profiles[attacker]
        program += "\n" + "".join(f"{f}.\n" for f in prof.get("facts", []))
        goals = list(prof.get("goals", goals))
    catalog = load_catalog(rel("catalog")) if rel("catalog") else []
    return Scenario(
        name=spec.get("name", base.name) + (f"/{attacker}" if attacker else ""),
        program_text=program,
        goals=goals,
        catalog=catalog,
        repo=load_repo(rel("repo"), catalog) if rel("repo") else [],
        policy=load_policy(rel("policy")) if rel("policy") else [],
        vulns=load_vulns(rel("vulns")) if rel("vulns") else {},
        vuln_predicates=spec.get("vuln_predicates", dict(DEFAULT_VULN_PREDICATES)),
        aggregate=spec.get("aggregate", "or"),
    )


def run_pipeline(sc: Scenario, budget: Optional[float] = None,
                 goals: Optional[Sequence[str]] = None) -> Pipeline:
    """Parse, build the attack graph, match countermeasures and compile risk."""
    kb = parse_program(sc.program_text)
    graph = build_attack_graph(kb, list(goals or sc.goals), sc.vulns, sc.vuln_predicates)
    matches = match_graph(graph, kb, sc.catalog, strict=False)
    resolution = resolve_countermeasures(graph, matches, sc.repo, sc.policy, budget)
    model = RiskModel(graph, resolution.attachments, sc.aggregate)
    return Pipeline(sc, kb, graph, matches, resolution, model)
