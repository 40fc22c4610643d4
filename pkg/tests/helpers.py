"""Shared builders and independent oracles for the test-suite."""
from __future__ import annotations

import itertools
import math

import numpy as np

from feederrestore.netmodel import (
    SECTIONALIZING, TIE, VIRTUAL, FaultScenario, NetworkModel, network_from_dict,
)
from feederrestore.powerflow import head_apparent_power, linear_pf, settled_loads, sweep_pf
from feederrestore.synth import synth_multifeeder
from feederrestore.topology import TopologyState, energized_buses

PF_TAN = math.tan(math.acos(0.95))


def diag(v: float, phases: str = "abc") -> list[list[float]]:
    return [[v if (i == j and "abc"[i] in phases) else 0.0 for j in range(3)] for i in range(3)]


def two_bus_doc(load_p=(100.0, 100.0, 100.0), load_q=(30.0, 30.0, 30.0), phases="abc",
                r=0.5, x=1.0, kva=1000.0, kv=12.47, s_rated=1000.0) -> dict:
    """Source bus, one line, one load bus; r/x are diagonal ohms."""
    return {
        "schema_version": 1, "name": "two-bus",
        "bases": {"kva": kva, "kv_ll": kv},
        "buses": [{"id": "s", "phases": "abc", "is_source": True},
                  {"id": "b", "phases": phases, "load_p": list(load_p), "load_q": list(load_q)}],
        "edges": [{"id": "l", "from": "s", "to": "b", "kind": "plain_line", "phases": phases,
                   "r": diag(r, phases), "x": diag(x, phases), "s_rated": s_rated}],
    }


def two_bus(**kw) -> NetworkModel:
    return network_from_dict(two_bus_doc(**kw))


def ten_bus_two_feeder(tie_rating: float = 2000.0, head_rating: float = 2000.0, dg: bool = False,
                       dg_p: float = 300.0, load_kw: float = 100.0, switchable: bool = False) -> NetworkModel:
    """Two 5-bus feeders from one source, joined by tie T at their ends.

    Feeder A: s - A1 (breaker SA) - A2 - A3 (sect SA3) - A4 - A5
    Feeder B: s - B1 (breaker SB) - B2 - B3 - B4 - B5, tie T between A5 and B5.
    Switches carry no thermal limit, so ``head_rating`` applies to the first
    line of each feeder (LA2, LB2).  Optional grid-forming DG at A4 with
    virtual edge V.
    """
    buses = [{"id": "s", "phases": "abc", "is_source": True}]
    edges = []
    for f in "AB":
        prev = "s"
        for j in range(1, 6):
            bid = f"{f}{j}"
            buses.append({"id": bid, "phases": "abc", "load_p": [load_kw] * 3,
                          "load_q": [round(load_kw * PF_TAN, 3)] * 3, "load_switchable": switchable})
            if j == 1:
                kind, eid, rating = SECTIONALIZING, f"S{f}", 2000.0
            elif f == "A" and j == 3:
                kind, eid, rating = SECTIONALIZING, "SA3", 2000.0
            else:
                kind, eid, rating = "plain_line", f"L{f}{j}", head_rating if j == 2 else 2000.0
            edges.append({"id": eid, "from": prev, "to": bid, "kind": kind, "phases": "abc",
                          "r": diag(0.3), "x": diag(0.6), "s_rated": rating})
            prev = bid
    edges.append({"id": "T", "from": "A5", "to": "B5", "kind": TIE, "phases": "abc",
                  "r": diag(0.3), "x": diag(0.6), "s_rated": tie_rating})
    dgs = []
    if dg:
        dgs.append({"id": "G", "bus": "A4", "p_max": dg_p, "q_max": dg_p / 2})
        edges.append({"id": "V", "from": "s", "to": "A4", "kind": VIRTUAL, "phases": "abc"})
    return network_from_dict({"schema_version": 1, "name": "ten-bus", "bases": {"kva": 1000.0, "kv_ll": 12.47},
                              "buses": buses, "edges": edges, "dgs": dgs})


def count_binaries(model: NetworkModel, scenario: FaultScenario, allow_dg: bool = True) -> int:
    forced = scenario.forced_open
    sw = [e for e in model.edges if e.operable and e.id not in forced and (e.kind != VIRTUAL or allow_dg)]
    loads = [b for b in model.buses if b.has_load and b.load_switchable and not b.is_source]
    return len(sw) + len(loads)


def oracle_cases(n: int, max_binaries: int = 12, seed0: int = 0):
    """Yield ``n`` random (model, scenario) pairs small enough for exhaustive enumeration."""
    rng = np.random.default_rng(seed0)
    made = 0
    seed = seed0
    while made < n:
        seed += 1
        feeders = int(rng.integers(2, 4))
        buses = int(rng.integers(5, 8))
        ties = int(rng.integers(1, feeders + 1))
        dgs = int(rng.integers(0, 2))
        try:
            model = synth_multifeeder(feeders, buses, ties, dgs, seed, sect_per_feeder=1,
                                      switchable_fraction=float(rng.uniform(0.0, 0.4)),
                                      capacity_factor=float(rng.uniform(1.1, 2.5)), priority_fraction=0.3)
        except ValueError:
            continue
        sect = [e.id for e in model.edges if e.kind == SECTIONALIZING]
        k = int(rng.integers(1, 3))
        tripped = frozenset(rng.choice(sect, size=min(k, len(sect)), replace=False).tolist())
        sc = FaultScenario(tripped_switches=tripped, description=f"seed {seed}")
        if count_binaries(model, sc) > max_binaries:
            continue
        made += 1
        yield model, sc


def brute_force_cycles(model: NetworkModel) -> int:
    """Count simple cycles through the cycle space of the normal spanning tree.

    Source buses are merged into one root.  Every simple cycle is the XOR of
    the fundamental cycles of exactly the tie/virtual edges it uses, so
    testing each subset of those edges for "one connected 2-regular edge set"
    counts every cycle exactly once.
    """
    src = set(model.sources)

    def node(b):
        return "__root__" if b in src else b

    tree = [e for e in model.edges if e.normal_closed]
    chords = [e for e in model.edges if not e.normal_closed]
    adj: dict[str, list[tuple[str, str]]] = {}
    for e in tree:
        a, b = node(e.from_bus), node(e.to_bus)
        adj.setdefault(a, []).append((b, e.id))
        adj.setdefault(b, []).append((a, e.id))
    parent: dict[str, tuple[str, str] | None] = {"__root__": None}
    stack = ["__root__"]
    while stack:
        u = stack.pop()
        for w, eid in adj.get(u, []):
            if w not in parent:
                parent[w] = (u, eid)
                stack.append(w)

    def path_to_root(u):
        out = []
        while parent[u] is not None:
            out.append(parent[u][1])
            u = parent[u][0]
        return out

    ends = {e.id: (node(e.from_bus), node(e.to_bus)) for e in model.edges}
    fundamental = []
    for c in chords:
        a, b = ends[c.id]
        fundamental.append(frozenset(path_to_root(a)) ^ frozenset(path_to_root(b)) ^ {c.id})

    count = 0
    for r in range(1, len(chords) + 1):
        for combo in itertools.combinations(fundamental, r):
            cyc: frozenset = frozenset()
            for f in combo:
                cyc = cyc ^ f
            deg: dict[str, int] = {}
            nbr: dict[str, list[str]] = {}
            for eid in cyc:
                a, b = ends[eid]
                deg[a] = deg.get(a, 0) + 1
                deg[b] = deg.get(b, 0) + 1
                nbr.setdefault(a, []).append(b)
                nbr.setdefault(b, []).append(a)
            if not cyc or any(d != 2 for d in deg.values()):
                continue
            start = next(iter(deg))
            seen = {start}
            todo = [start]
            while todo:
                u = todo.pop()
                for w in nbr[u]:
                    if w not in seen:
                        seen.add(w)
                        todo.append(w)
            if len(seen) == len(deg):
                count += 1
    return count


def sequence_cases(n: int, seed0: int = 100):
    """Yield ``n`` random (model, scenario) pairs for end-to-end sequencing tests.

    Feeder heads are generously rated so most cases need no Stage-1 retries.
    """
    rng = np.random.default_rng(seed0)
    made = 0
    seed = seed0
    while made < n:
        seed += 1
        feeders = int(rng.integers(2, 4))
        buses = int(rng.integers(5, 9))
        ties = int(rng.integers(1, feeders + 1))
        dgs = int(rng.integers(0, 2))
        try:
            model = synth_multifeeder(feeders, buses, ties, dgs, seed, sect_per_feeder=2,
                                      switchable_fraction=float(rng.uniform(0.0, 0.6)),
                                      capacity_factor=float(rng.uniform(2.5, 3.5)), dg_fraction=1.0)
        except ValueError:
            continue
        sect = [e.id for e in model.edges if e.kind == SECTIONALIZING]
        heads = [e for e in sect if e.endswith("_01")]
        # a head breaker plus, sometimes, a second switch elsewhere
        tripped = {str(rng.choice(heads))}
        if rng.random() < 0.4:
            tripped.add(str(rng.choice(sect)))
        made += 1
        yield model, FaultScenario(tripped_switches=frozenset(tripped), description=f"seed {seed}")


def three_feeder_transfer(b_head_rating: float = 900.0, load_kw: float = 100.0, a_load_kw: float | None = None,
                          clpu: bool = False) -> NetworkModel:
    """Three 5-bus feeders where restoring A needs part of B moved to C.

    Tie TAB joins A5-B2 and tie TBC joins B5-C5; sectionalizer SB3 splits B
    between B2 and B3.  With breaker SA tripped, feeder B's first line
    (rating ``b_head_rating``) cannot carry A and all of B, so the target
    opens SB3, closes TAB and closes TBC.  ``a_load_kw`` sets feeder A's
    per-phase loads separately.
    """
    buses = [{"id": "s", "phases": "abc", "is_source": True}]
    edges = []
    for f in "ABC":
        prev = "s"
        for j in range(1, 6):
            bid = f"{f}{j}"
            kw = a_load_kw if (f == "A" and a_load_kw is not None) else load_kw
            bus = {"id": bid, "phases": "abc", "load_p": [kw] * 3, "load_q": [round(kw * PF_TAN, 3)] * 3}
            if clpu:
                bus["clpu"] = "res"
            buses.append(bus)
            if j == 1:
                kind, eid, rating = SECTIONALIZING, f"S{f}", 2000.0
            elif f == "B" and j == 3:
                kind, eid, rating = SECTIONALIZING, "SB3", 2000.0
            else:
                kind, eid = "plain_line", f"L{f}{j}"
                rating = b_head_rating if (f == "B" and j == 2) else 2000.0
            edges.append({"id": eid, "from": prev, "to": bid, "kind": kind, "phases": "abc",
                          "r": diag(0.3), "x": diag(0.6), "s_rated": rating})
            prev = bid
    for eid, a, b in (("TAB", "A5", "B2"), ("TBC", "B5", "C5")):
        edges.append({"id": eid, "from": a, "to": b, "kind": TIE, "phases": "abc",
                      "r": diag(0.3), "x": diag(0.6), "s_rated": 2000.0})
    doc = {"schema_version": 1, "name": "three-feeder-transfer", "bases": {"kva": 1000.0, "kv_ll": 12.47},
           "buses": buses, "edges": edges}
    if clpu:
        doc["clpu"] = {"res": {"s_u": 1.5, "s_d": 1.0, "alpha_decay": 1.0, "delay_steps": 2}}
    return network_from_dict(doc)


def all_loads(model, state, factor=1.0):
    on = energized_buses(model, state)
    return settled_loads(model, {b.id: factor for b in model.buses if b.has_load and b.id in on})


def loaded_to(model, level):
    """Loads scaled so the heaviest feeder-head phase carries ``level`` x its rating (linear model)."""
    state = TopologyState.normal(model)
    base = all_loads(model, state)
    flow = linear_pf(model, state, base)
    heads = [e for e in model.edges if model.bus[e.from_bus].is_source]
    ratio = max(np.hypot(flow.P[e.id], flow.Q[e.id]).max() / e.s_rated for e in heads)
    f = level / ratio
    return state, {b: (p * f, q * f) for b, (p, q) in base.items()}


def deviations(model, state, loads):
    lin, swp = linear_pf(model, state, loads), sweep_pf(model, state, loads)
    dv = max(float(np.max(np.abs(lin.V[b] - swp.V[b]))) for b in lin.energized)
    hl, hs = head_apparent_power(model, lin), head_apparent_power(model, swp)
    dh = max(abs(hl[e] - hs[e]) / hs[e] for e in hs if hs[e] > 0)
    return dv, dh
