"""Graph analytics: simple-cycle enumeration and radiality checks.

All source buses are merged into one root node before any graph work.  Two
feeders hanging off different substations are then still seen as a loop
when a tie between them closes, and a virtual DG edge (source -> DG bus)
behaves exactly like a tie switch.
"""
from __future__ import annotations

import json
import logging
from collections import defaultdict, deque
from dataclasses import dataclass
from pathlib import Path

from .netmodel import (
    OPERABLE_KINDS, VIRTUAL, FaultScenario, NetworkModel,
)

logger = logging.getLogger(__name__)

ROOT = "__root__"
DEFAULT_CYCLE_CAP = 100_000


class CycleExplosionError(RuntimeError):
    pass


@dataclass(frozen=True)
class Cycle:
    edges: tuple[str, ...]
    switch_members: tuple[str, ...]

    @property
    def key(self) -> tuple[str, ...]:
        return tuple(sorted(self.edges))


@dataclass(frozen=True)
class TopologyState:
    """Open/closed status of every operable edge plus edges forced out of service.

    ``closed`` lists the operable edges that are closed; non-operable edges are
    always closed unless listed in ``out``.
    """

    closed: frozenset[str]
    out: frozenset[str] = frozenset()

    def is_closed(self, model: NetworkModel, edge_id: str) -> bool:
        if edge_id in self.out:
            return False
        if model.edge[edge_id].kind in OPERABLE_KINDS:
            return edge_id in self.closed
        return True

    def switch_map(self, model: NetworkModel) -> dict[str, bool]:
        return {e: self.is_closed(model, e) for e in model.operable_edges}

    @classmethod
    def normal(cls, model: NetworkModel) -> "TopologyState":
        return cls(frozenset(e.id for e in model.edges if e.operable and e.normal_closed))

    @classmethod
    def post_fault(cls, model: NetworkModel, scenario: FaultScenario) -> "TopologyState":
        out = frozenset(scenario.forced_open)
        return cls(cls.normal(model).closed - out, out)

    def toggled(self, edge_id: str) -> "TopologyState":
        return TopologyState(self.closed ^ {edge_id}, self.out)


@dataclass
class RadialReport:
    radial: bool
    energized_buses: set[str]
    violations: list[str]


def _node(model: NetworkModel, bus_id: str) -> str:
    return ROOT if model.bus[bus_id].is_source else bus_id


def closed_adjacency(model: NetworkModel, state: TopologyState) -> dict[str, list[tuple[str, str]]]:
    adj: dict[str, list[tuple[str, str]]] = defaultdict(list)
    for e in model.edges:
        if not state.is_closed(model, e.id):
            continue
        u, v = _node(model, e.from_bus), _node(model, e.to_bus)
        adj[u].append((e.id, v))
        if u != v:
            adj[v].append((e.id, u))
    return adj


def is_radial_connected(model: NetworkModel, state: TopologyState) -> RadialReport:
    """Check that the closed-edge graph is a forest and find the energized buses.

    A bus is energized when it is reachable from a source through closed edges
    (islanded grid-forming DGs hang off the root through their virtual edge).
    Any loop, energized or not, is reported as a violation.
    """
    adj = closed_adjacency(model, state)
    violations: list[str] = []
    seen: dict[str, tuple[str | None, str | None]] = {}  # node -> (parent node, parent edge)
    energized_nodes: set[str] = set()
    reported: set[str] = set()

    def path_to(node: str) -> list[str]:
        out = []
        while seen[node][0] is not None:
            out.append(seen[node][1])
            node = seen[node][0]
        return out

    nodes = [ROOT] + [b.id for b in model.buses if not b.is_source]
    for start in nodes:
        if start in seen:
            continue
        seen[start] = (None, None)
        queue = deque([start])
        comp = [start]
        while queue:
            u = queue.popleft()
            for eid, v in adj.get(u, ()):
                if seen[u][1] == eid:
                    continue
                if v in seen:
                    if eid in reported:
                        continue
                    reported.add(eid)
                    pu, pv = path_to(u), path_to(v)
                    common = set(pu) & set(pv)
                    loop = sorted({eid, *(x for x in pu + pv if x not in common)})
                    violations.append(f"loop through edges {loop}")
                    continue
                seen[v] = (u, eid)
                queue.append(v)
                comp.append(v)
        if start == ROOT:
            energized_nodes.update(comp)
    energized = {b for b in energized_nodes if b != ROOT}
    energized.update(model.sources)
    return RadialReport(radial=not violations, energized_buses=energized, violations=violations)


def energized_buses(model: NetworkModel, state: TopologyState) -> set[str]:
    return is_radial_connected(model, state).energized_buses


def switchless_cycle(model: NetworkModel) -> set[str] | None:
    """Return the edges of some cycle made only of non-operable edges, if any."""
    parent: dict[str, str] = {}

    def find(a: str) -> str:
        while parent.setdefault(a, a) != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for e in model.edges:
        if e.operable:
            continue
        u, v = find(_node(model, e.from_bus)), find(_node(model, e.to_bus))
        if u == v:
            return {e.id}
        parent[u] = v
    return None


def feeder_of(model: NetworkModel) -> dict[str, str]:
    """Map every bus to its feeder head in the normal operating tree."""
    state = TopologyState.normal(model)
    adj = closed_adjacency(model, state)
    owner: dict[str, str] = {}
    for s in model.sources:
        owner[s] = s
    queue = deque()
    for eid, v in adj.get(ROOT, ()):
        if model.edge[eid].kind == VIRTUAL:
            continue
        owner[v] = v
        queue.append(v)
    while queue:
        u = queue.popleft()
        for eid, v in adj.get(u, ()):
            if v == ROOT or v in owner:
                continue
            owner[v] = owner[u]
            queue.append(v)
    return owner


# ---------------------------------------------------------------------------
# cycle enumeration

def _kernel(model: NetworkModel):
    """Prune leaves and contract degree-2 chains.

    Returns (super_edges, self_loops) where each super edge is
    ``(u, v, [edge ids from u to v])``.
    """
    adj: dict[str, dict[str, str]] = defaultdict(dict)  # node -> {edge: other}
    self_loops: list[list[str]] = []
    for e in model.edges:
        u, v = _node(model, e.from_bus), _node(model, e.to_bus)
        if u == v:
            self_loops.append([e.id])
            continue
        adj[u][e.id] = v
        adj[v][e.id] = u

    leaves = deque(n for n, nb in adj.items() if len(nb) <= 1)
    while leaves:
        n = leaves.popleft()
        if n not in adj:
            continue
        for eid, m in list(adj[n].items()):
            del adj[m][eid]
            if len(adj[m]) == 1:
                leaves.append(m)
        del adj[n]

    branch = {n for n, nb in adj.items() if len(nb) != 2}
    used: set[str] = set()
    super_edges: list[tuple[str, str, list[str]]] = []

    def walk(start: str, eid: str) -> None:
        chain = [eid]
        prev_edge, node = eid, adj[start][eid]
        while node not in branch:
            (nxt_edge, nxt), = [(k, w) for k, w in adj[node].items() if k != prev_edge]
            chain.append(nxt_edge)
            prev_edge, node = nxt_edge, nxt
        used.update(chain)
        super_edges.append((start, node, chain))

    for n in sorted(branch):
        for eid in sorted(adj[n]):
            if eid not in used:
                walk(n, eid)
    # components that are a bare ring of degree-2 nodes
    for n in sorted(adj):
        for eid in sorted(adj[n]):
            if eid not in used:
                branch.add(n)
                walk(n, eid)
    return super_edges, self_loops


def _orient(model: NetworkModel, edges: list[str]) -> tuple[str, ...]:
    """Rotate/reflect a closed walk so it starts at its smallest edge id."""
    k = edges.index(min(edges))
    fwd = edges[k:] + edges[:k]
    if len(fwd) > 2 and fwd[-1] < fwd[1]:
        fwd = [fwd[0]] + fwd[1:][::-1]
    return tuple(fwd)


def enumerate_cycles(model: NetworkModel, cap: int = DEFAULT_CYCLE_CAP) -> list[Cycle]:
    """All simple cycles of the graph with every switch closed.

    Leaves are pruned and degree-2 chains contracted, then an iterative DFS
    enumerates cycles of the small kernel multigraph; each cycle is kept once
    (canonical start at its smallest vertex, deduplicated by edge set).
    """
    super_edges, self_loops = _kernel(model)
    nodes = sorted({u for u, _, _ in super_edges} | {v for _, v, _ in super_edges})
    index = {n: i for i, n in enumerate(nodes)}
    kadj: dict[int, list[tuple[int, int]]] = defaultdict(list)  # node -> [(super edge idx, other)]
    raw: list[list[str]] = [list(s) for s in self_loops]
    for k, (u, v, _) in enumerate(super_edges):
        iu, iv = index[u], index[v]
        if iu == iv:
            raw.append(list(super_edges[k][2]))
            continue
        kadj[iu].append((k, iv))
        kadj[iv].append((k, iu))
    for lst in kadj.values():
        lst.sort()

    found: set[frozenset[int]] = set()
    cycles_k: list[tuple[int, list[int]]] = []
    for s in range(len(nodes)):
        # stack frames: (node, neighbour list position)
        path_nodes = [s]
        path_edges: list[int] = []
        on_path = {s}
        stack = [0]
        while stack:
            u = path_nodes[-1]
            pos = stack[-1]
            nbrs = kadj[u]
            if pos >= len(nbrs):
                stack.pop()
                on_path.discard(path_nodes.pop())
                if path_edges:
                    path_edges.pop()
                continue
            stack[-1] = pos + 1
            k, w = nbrs[pos]
            if path_edges and k == path_edges[-1]:
                continue
            if w == s and path_edges:
                key = frozenset(path_edges + [k])
                if key not in found:
                    found.add(key)
                    cycles_k.append((s, path_edges + [k]))
                    if len(found) + len(raw) > cap:
                        raise CycleExplosionError(
                            f"more than {cap} simple cycles; raise the cap or simplify the network")
                continue
            if w < s or w in on_path:
                continue
            path_nodes.append(w)
            path_edges.append(k)
            on_path.add(w)
            stack.append(0)

    for s, ks in cycles_k:
        walk: list[str] = []
        node = nodes[s]
        for k in ks:
            u, v, chain = super_edges[k]
            if u == node:
                walk.extend(chain)
                node = v
            else:
                walk.extend(reversed(chain))
                node = u
        raw.append(walk)

    out = []
    for walk in raw:
        ordered = _orient(model, walk)
        members = tuple(e for e in ordered if model.edge[e].kind in OPERABLE_KINDS)
        out.append(Cycle(edges=ordered, switch_members=members))
    out.sort(key=lambda c: c.key)
    return out


_CACHE: dict[tuple[str, int], list[Cycle]] = {}


def cached_cycles(model: NetworkModel, cap: int = DEFAULT_CYCLE_CAP) -> list[Cycle]:
    """``enumerate_cycles`` memoised on the model content hash."""
    key = (model.content_hash, cap)
    if key not in _CACHE:
        _CACHE[key] = enumerate_cycles(model, cap)
    return _CACHE[key]


def save_cycle_cache(model: NetworkModel, cycles: list[Cycle], path: str | Path) -> None:
    doc = {"schema_version": 1, "model_hash": model.content_hash,
           "cycles": [list(c.edges) for c in cycles]}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)


def load_cycle_cache(model: NetworkModel, path: str | Path) -> list[Cycle] | None:
    """Load cached cycles; ``None`` when the file belongs to a different model."""
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("model_hash") != model.content_hash:
        logger.info("cycle cache %s is stale, ignoring", path)
        return None
    cycles = [Cycle(tuple(c), tuple(e for e in c if model.edge[e].kind in OPERABLE_KINDS))
              for c in doc["cycles"]]
    _CACHE[(model.content_hash, DEFAULT_CYCLE_CAP)] = cycles
    return cycles


@dataclass
class OrientedTree:
    """Closed edges oriented away from their supply.

    ``roots`` maps each root bus to the DG bus's virtual edge (or ``None`` for
    a substation source).  ``order`` lists ``(edge, parent, child)`` in BFS
    order, so reversing it visits children before parents.
    """

    roots: dict[str, str | None]
    order: list[tuple[str, str, str]]
    parent_edge: dict[str, str]


def oriented_tree(model: NetworkModel, state: TopologyState) -> OrientedTree:
    """Orient the closed, non-virtual edges from substation sources and islanded DGs.

    Raises ``ValueError`` if the state has a loop (two supplies meet).
    """
    roots: dict[str, str | None] = {s: None for s in model.sources}
    for e in model.edges:
        if e.kind == VIRTUAL and state.is_closed(model, e.id):
            roots[e.to_bus] = e.id
    adj: dict[str, list[tuple[str, str]]] = defaultdict(list)
    for e in model.edges:
        if e.kind == VIRTUAL or not state.is_closed(model, e.id):
            continue
        adj[e.from_bus].append((e.id, e.to_bus))
        adj[e.to_bus].append((e.id, e.from_bus))
    order: list[tuple[str, str, str]] = []
    parent_edge: dict[str, str] = {}
    seen: set[str] = set()
    for r in roots:
        if r in seen:
            raise ValueError(f"supply {r} is connected to another supply (loop through the root)")
        seen.add(r)
        queue = deque([r])
        while queue:
            u = queue.popleft()
            for eid, v in adj[u]:
                if parent_edge.get(u) == eid:
                    continue
                if v in seen:
                    raise ValueError(f"closed loop detected at edge {eid}")
                seen.add(v)
                parent_edge[v] = eid
                order.append((eid, u, v))
                queue.append(v)
    return OrientedTree(roots, order, parent_edge)
