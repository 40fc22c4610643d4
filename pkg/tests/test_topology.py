import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from feederrestore.netmodel import TIE, network_from_dict, network_to_dict
from feederrestore.synth import synth_multifeeder
from feederrestore.topology import (
    CycleExplosionError, TopologyState, enumerate_cycles, is_radial_connected, load_cycle_cache,
    save_cycle_cache,
)
from helpers import brute_force_cycles, ten_bus_two_feeder


def cycle_rank(model) -> int:
    """|E| - |V| + components with all sources merged into one node."""
    src = set(model.sources)
    parent = {}

    def find(a):
        parent.setdefault(a, a)
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    nodes = {("root" if b.id in src else b.id) for b in model.buses}
    for e in model.edges:
        a = "root" if e.from_bus in src else e.from_bus
        b = "root" if e.to_bus in src else e.to_bus
        parent[find(a)] = find(b)
    comps = len({find(n) for n in nodes})
    return len(model.edges) - len(nodes) + comps


def test_single_feeder_has_no_cycles():
    assert enumerate_cycles(synth_multifeeder(1, 5, 0, 0, seed=0)) == []


@pytest.mark.parametrize("n", [4, 6, 9])
def test_two_feeders_one_tie(n):
    m = synth_multifeeder(2, n, 1, 0, seed=3)
    cycles = enumerate_cycles(m)
    assert len(cycles) == 1 == brute_force_cycles(m)
    assert m.edges_of_kind(TIE)[0] in cycles[0].switch_members


def test_ten_bus_cycle_members():
    (c,) = enumerate_cycles(ten_bus_two_feeder())
    assert set(c.switch_members) == {"SA", "SA3", "SB", "T"}


def test_four_feeder_count_matches_cycle_space_oracle():
    m = synth_multifeeder(4, 10, 7, 4, seed=7)
    assert len(enumerate_cycles(m)) == brute_force_cycles(m) == 316


def test_normal_state_radial_and_energized():
    m = ten_bus_two_feeder(dg=True)
    rep = is_radial_connected(m, TopologyState.normal(m))
    assert rep.radial and rep.violations == []
    assert rep.energized_buses == set(m.bus)


def test_closing_tie_makes_loop_named():
    m = ten_bus_two_feeder()
    rep = is_radial_connected(m, TopologyState.normal(m).toggled("T"))
    assert not rep.radial
    assert len(rep.violations) == 1 and "'T'" in rep.violations[0] and "'SA'" in rep.violations[0]


def test_open_switch_deenergizes_downstream():
    m = ten_bus_two_feeder()
    rep = is_radial_connected(m, TopologyState.normal(m).toggled("SA3"))
    assert rep.radial
    assert {"A3", "A4", "A5"}.isdisjoint(rep.energized_buses)


def test_cycle_cap():
    with pytest.raises(CycleExplosionError):
        enumerate_cycles(synth_multifeeder(4, 10, 7, 4, seed=7), cap=50)


def test_cycle_cache_round_trip(tmp_path):
    m = synth_multifeeder(3, 6, 3, 1, seed=2)
    cycles = enumerate_cycles(m)
    path = tmp_path / "cycles.json"
    save_cycle_cache(m, cycles, path)
    assert load_cycle_cache(m, path) == cycles
    other = synth_multifeeder(3, 6, 3, 1, seed=4)
    assert load_cycle_cache(other, path) is None


def _relabel(model):
    doc = network_to_dict(model)
    bmap = {b["id"]: f"n{i:03d}" for i, b in enumerate(reversed(doc["buses"]))}
    emap = {e["id"]: f"w{i:03d}" for i, e in enumerate(reversed(doc["edges"]))}
    for b in doc["buses"]:
        b["id"] = bmap[b["id"]]
    for e in doc["edges"]:
        e["id"], e["from"], e["to"] = emap[e["id"]], bmap[e["from"]], bmap[e["to"]]
    for d in doc.get("dgs", []):
        d["bus"] = bmap[d["bus"]]
    return network_from_dict(doc), emap


@settings(max_examples=20, deadline=None)
@given(feeders=st.integers(2, 4), buses=st.integers(4, 8), ties=st.integers(1, 4), dgs=st.integers(0, 2),
       seed=st.integers(0, 5000))
def test_cycle_properties(feeders, buses, ties, dgs, seed):
    try:
        m = synth_multifeeder(feeders, buses, ties, dgs, seed)
    except ValueError:
        return
    cycles = enumerate_cycles(m)
    assert len(cycles) >= cycle_rank(m)
    assert len({c.key for c in cycles}) == len(cycles)
    assert all(c.switch_members for c in cycles)

    # relabeling changes nothing but the names
    m2, emap = _relabel(m)
    mapped = {frozenset(emap[e] for e in c.edges) for c in cycles}
    assert {frozenset(c.edges) for c in enumerate_cycles(m2)} == mapped

    # opening one switch of every cycle leaves a forest
    rng = np.random.default_rng(seed)
    opened = {str(rng.choice(c.switch_members)) for c in cycles}
    state = TopologyState(frozenset(e for e in m.operable_edges if e not in opened))
    assert is_radial_connected(m, state).radial
