"""Bus/branch network model in per-unit, case-file I/O and bus admittance entries."""

from __future__ import annotations

import json
from collections import defaultdict, deque
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Mapping

import numpy as np


class CaseError(ValueError):
    """Raised when a case file cannot be parsed or fails validation."""

    def __init__(self, message, location=None):
        self.location = location
        super().__init__(f"{location}: {message}" if location else message)


@dataclass(frozen=True)
class Bus:
    id: int
    is_slack: bool
    true_voltage_magnitude: float
    true_voltage_angle: float


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    g: float
    b: float
    g_sf: float = 0.0
    b_sf: float = 0.0
    g_st: float = 0.0
    b_st: float = 0.0

    def end_params(self, bus):
        """Return ``(g_ij, b_ij, g_si, b_si)`` seen from ``bus``'s end of the branch."""
        if bus == self.from_bus:
            return self.g, self.b, self.g_sf, self.b_sf
        if bus == self.to_bus:
            return self.g, self.b, self.g_st, self.b_st
        raise KeyError(f"bus {bus} is not an end of branch {self.from_bus}-{self.to_bus}")


@dataclass(frozen=True)
class NetworkCase:
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    name: str = ""
    _branch_index: Mapping[frozenset, Branch] = field(
        init=False, repr=False, compare=False)

    def __post_init__(self):
        index = {frozenset((br.from_bus, br.to_bus)): br for br in self.branches}
        object.__setattr__(self, "_branch_index", MappingProxyType(index))

    @property
    def n_bus(self):
        return len(self.buses)

    @property
    def slack_bus(self):
        return next(b.id for b in self.buses if b.is_slack)

    def branch(self, i, j):
        """Branch joining buses ``i`` and ``j`` in either orientation."""
        try:
            return self._branch_index[frozenset((i, j))]
        except KeyError:
            raise KeyError(f"no branch between buses {i} and {j}") from None

    def has_branch(self, i, j):
        return frozenset((i, j)) in self._branch_index

    def true_state(self):
        from .measurements import StateVector
        return StateVector(
            theta=np.array([b.true_voltage_angle for b in self.buses]),
            v=np.array([b.true_voltage_magnitude for b in self.buses]),
        )


@dataclass(frozen=True)
class AdmittanceEntries:
    """Sparse bus admittance matrix split into ``G`` and ``B``.

    ``neighbors[i]`` is the set of buses incident to ``i`` including ``i``.
    """

    G: Mapping[tuple[int, int], float]
    B: Mapping[tuple[int, int], float]
    neighbors: Mapping[int, frozenset]


def build_admittance(case: NetworkCase) -> AdmittanceEntries:
    G: dict = defaultdict(float)
    B: dict = defaultdict(float)
    nbrs = {bus.id: {bus.id} for bus in case.buses}
    for bus in case.buses:
        G[bus.id, bus.id] += 0.0
        B[bus.id, bus.id] += 0.0
    for br in case.branches:
        i, j = br.from_bus, br.to_bus
        G[i, i] += br.g + br.g_sf
        B[i, i] += br.b + br.b_sf
        G[j, j] += br.g + br.g_st
        B[j, j] += br.b + br.b_st
        G[i, j] = G[j, i] = -br.g
        B[i, j] = B[j, i] = -br.b
        nbrs[i].add(j)
        nbrs[j].add(i)
    return AdmittanceEntries(
        G=MappingProxyType(dict(G)),
        B=MappingProxyType(dict(B)),
        neighbors=MappingProxyType({k: frozenset(v) for k, v in nbrs.items()}),
    )


def _number(rec, key, where, default=None):
    if key not in rec:
        if default is not None:
            return default
        raise CaseError(f"missing field '{key}'", where)
    val = rec[key]
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise CaseError(f"field '{key}' must be a number, got {val!r}", where)
    if not np.isfinite(val):
        raise CaseError(f"field '{key}' must be finite", where)
    return float(val)


def case_from_dict(doc, source="<case>") -> NetworkCase:
    """Build and validate a ``NetworkCase`` from the parsed JSON document."""
    if not isinstance(doc, dict):
        raise CaseError("top level must be an object", source)
    for key in ("buses", "branches"):
        if not isinstance(doc.get(key), list):
            raise CaseError(f"'{key}' must be an array", source)

    buses = []
    seen = set()
    for k, rec in enumerate(doc["buses"]):
        where = f"{source}: buses[{k}]"
        if not isinstance(rec, dict):
            raise CaseError("bus entry must be an object", where)
        bid = rec.get("id")
        if isinstance(bid, bool) or not isinstance(bid, int):
            raise CaseError(f"bus id must be an integer, got {bid!r}", where)
        if bid in seen:
            raise CaseError(f"duplicate bus id {bid}", where)
        seen.add(bid)
        slack = rec.get("slack", False)
        if not isinstance(slack, bool):
            raise CaseError("'slack' must be a boolean", where)
        v = _number(rec, "v_true", where)
        if v <= 0:
            raise CaseError("'v_true' must be positive", where)
        buses.append(Bus(bid, slack, v, _number(rec, "theta_true", where)))

    if not buses:
        raise CaseError("case has no buses", source)
    if seen != set(range(1, len(buses) + 1)):
        raise CaseError("bus ids must be contiguous 1..N", source)
    n_slack = sum(b.is_slack for b in buses)
    if n_slack != 1:
        raise CaseError(f"expected exactly one slack bus, found {n_slack}", source)
    buses.sort(key=lambda b: b.id)

    branches = []
    pairs = set()
    for k, rec in enumerate(doc["branches"]):
        where = f"{source}: branches[{k}]"
        if not isinstance(rec, dict):
            raise CaseError("branch entry must be an object", where)
        ends = []
        for key in ("from", "to"):
            val = rec.get(key)
            if isinstance(val, bool) or not isinstance(val, int):
                raise CaseError(f"'{key}' must be an integer bus id", where)
            if val not in seen:
                raise CaseError(f"'{key}' refers to unknown bus {val}", where)
            ends.append(val)
        i, j = ends
        if i == j:
            raise CaseError("branch endpoints must differ", where)
        pair = frozenset((i, j))
        if pair in pairs:
            raise CaseError(f"parallel branch between buses {i} and {j}", where)
        pairs.add(pair)
        g = _number(rec, "g", where)
        b = _number(rec, "b", where)
        if g == 0.0 and b == 0.0:
            raise CaseError("series admittance must be nonzero", where)
        branches.append(Branch(
            i, j, g, b,
            _number(rec, "g_sf", where, 0.0), _number(rec, "b_sf", where, 0.0),
            _number(rec, "g_st", where, 0.0), _number(rec, "b_st", where, 0.0),
        ))

    _check_connected(buses, branches, source)
    return NetworkCase(tuple(buses), tuple(branches), name=str(doc.get("name", "")))


def _check_connected(buses, branches, source):
    adj = defaultdict(list)
    for br in branches:
        adj[br.from_bus].append(br.to_bus)
        adj[br.to_bus].append(br.from_bus)
    start = buses[0].id
    reached = {start}
    queue = deque([start])
    while queue:
        for nb in adj[queue.popleft()]:
            if nb not in reached:
                reached.add(nb)
                queue.append(nb)
    missing = sorted({b.id for b in buses} - reached)
    if missing:
        raise CaseError(f"network is disconnected; unreachable buses {missing}", source)


def load_case(path) -> NetworkCase:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CaseError(f"malformed JSON at line {exc.lineno} column {exc.colno}: {exc.msg}",
                        str(path)) from exc
    return case_from_dict(doc, str(path))


def case_to_dict(case: NetworkCase) -> dict:
    doc = {
        "buses": [
            {"id": b.id, "slack": b.is_slack, "v_true": b.true_voltage_magnitude,
             "theta_true": b.true_voltage_angle}
            for b in case.buses
        ],
        "branches": [
            {"from": br.from_bus, "to": br.to_bus, "g": br.g, "b": br.b,
             "g_sf": br.g_sf, "b_sf": br.b_sf, "g_st": br.g_st, "b_st": br.b_st}
            for br in case.branches
        ],
    }
    if case.name:
        doc = {"name": case.name, **doc}
    return doc


def save_case(case: NetworkCase, path):
    Path(path).write_text(json.dumps(case_to_dict(case), indent=1) + "\n")
