"""Typed bipartite factor graph over state-variable increments."""

from __future__ import annotations

import enum
from collections import defaultdict
from dataclasses import dataclass

from .measurements import Angle, Magnitude, Measurement, Var, incident_variables
from .network import AdmittanceEntries, NetworkCase, build_admittance


class FactorKind(enum.Enum):
    SLACK = "slack"
    DIRECT = "direct"
    INDIRECT = "indirect"
    INITIALIZATION = "initialization"
    VIRTUAL = "virtual"

    @property
    def is_local(self):
        return self is not FactorKind.INDIRECT


class IsolatedVariable(ValueError):
    """A state variable is touched by no measurement (locally unobservable)."""

    def __init__(self, var):
        self.var = var
        super().__init__(f"state variable {var} is not covered by any measurement")


@dataclass(frozen=True)
class FactorNode:
    kind: FactorKind
    incident: tuple[Var, ...]
    measurement: Measurement | None = None

    def label(self, idx):
        if self.measurement is not None:
            return f"f{idx}:{self.measurement.label}"
        return f"f{idx}:{self.kind.value}"


@dataclass(frozen=True)
class FactorGraph:
    n_bus: int
    slack_bus: int
    variables: tuple[Var, ...]
    factors: tuple[FactorNode, ...]
    var_factors: dict  # Var -> tuple of factor indices (the set F of each variable)

    @property
    def n_edges(self):
        return sum(len(f.incident) for f in self.factors)

    def edges(self):
        for k, f in enumerate(self.factors):
            for var in f.incident:
                yield k, var

    def count(self, kind):
        return sum(f.kind is kind for f in self.factors)

    def indirect_degree(self, var):
        return sum(self.factors[k].kind is FactorKind.INDIRECT for k in self.var_factors[var])

    def local_factor(self, var, kind):
        for k in self.var_factors[var]:
            if self.factors[k].kind is kind:
                return k
        return None

    def edge_list(self):
        """``factor_id variable_id`` lines describing the incidence."""
        return "\n".join(f"{self.factors[k].label(k)} {var}" for k, var in self.edges())


def variable_order(n_bus):
    return tuple([Angle(b) for b in range(1, n_bus + 1)]
                 + [Magnitude(b) for b in range(1, n_bus + 1)])


def build_graph(case: NetworkCase, measurements, adm: AdmittanceEntries | None = None):
    if adm is None:
        adm = build_admittance(case)
    variables = variable_order(case.n_bus)
    slack = case.slack_bus
    factors = [FactorNode(FactorKind.SLACK, (Angle(slack),))]
    for m in measurements:
        incident = tuple(incident_variables(m.kind, m.location, adm))
        kind = FactorKind.DIRECT if m.kind.is_direct else FactorKind.INDIRECT
        factors.append(FactorNode(kind, incident, m))

    touched = defaultdict(set)
    for f in factors:
        for var in f.incident:
            touched[var].add(f.kind)
    indirect_deg = defaultdict(int)
    for f in factors:
        if f.kind is FactorKind.INDIRECT:
            for var in f.incident:
                indirect_deg[var] += 1

    for var in variables:
        if touched[var] & {FactorKind.SLACK, FactorKind.DIRECT}:
            continue
        deg = indirect_deg[var]
        if deg == 0:
            raise IsolatedVariable(var)
        kind = FactorKind.VIRTUAL if deg <= 1 else FactorKind.INITIALIZATION
        factors.append(FactorNode(kind, (var,)))

    var_factors = {var: [] for var in variables}
    for k, f in enumerate(factors):
        for var in f.incident:
            var_factors[var].append(k)
    return FactorGraph(
        n_bus=case.n_bus,
        slack_bus=slack,
        variables=variables,
        factors=tuple(factors),
        var_factors={v: tuple(ks) for v, ks in var_factors.items()},
    )


def is_tree(graph: FactorGraph) -> bool:
    n_nodes = len(graph.variables) + len(graph.factors)
    if graph.n_edges != n_nodes - 1:
        return False
    # union-find over factor ids 0..F-1 and variables offset by F
    offset = len(graph.factors)
    var_id = {v: offset + i for i, v in enumerate(graph.variables)}
    parent = list(range(n_nodes))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    components = n_nodes
    for k, var in graph.edges():
        ra, rb = find(k), find(var_id[var])
        if ra == rb:
            return False
        parent[ra] = rb
        components -= 1
    return components == 1


def diameter(graph: FactorGraph) -> int:
    """Longest shortest path (in edges) between any two nodes of a connected graph."""
    offset = len(graph.factors)
    var_id = {v: offset + i for i, v in enumerate(graph.variables)}
    adj = defaultdict(list)
    for k, var in graph.edges():
        adj[k].append(var_id[var])
        adj[var_id[var]].append(k)
    best = 0
    for src in range(offset + len(graph.variables)):
        dist = {src: 0}
        frontier = [src]
        while frontier:
            nxt = []
            for a in frontier:
                for b in adj[a]:
                    if b not in dist:
                        dist[b] = dist[a] + 1
                        nxt.append(b)
            frontier = nxt
        best = max(best, max(dist.values()))
    return best
