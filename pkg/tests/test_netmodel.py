import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from feederrestore.netmodel import (
    TIE, VIRTUAL, FaultScenario, NetworkValidationError, load_network, load_scenario,
    network_from_dict, network_to_dict, save_network, scenario_to_dict,
)
from feederrestore.synth import synth_multifeeder
from feederrestore.topology import TopologyState, is_radial_connected
from helpers import ten_bus_two_feeder, two_bus_doc


def test_two_bus_minimal():
    m = network_from_dict(two_bus_doc())
    assert len(m.buses) == 2 and len(m.edges) == 1
    assert m.sources == ("s",)


def test_tie_marked_closed_is_rejected_by_name():
    doc = two_bus_doc()
    doc["buses"].append({"id": "c", "phases": "abc", "is_source": True})
    doc["edges"].append({"id": "tie7", "from": "b", "to": "c", "kind": TIE, "phases": "abc",
                         "normal_closed": True, "r": doc["edges"][0]["r"], "x": doc["edges"][0]["x"],
                         "s_rated": 100.0})
    with pytest.raises(NetworkValidationError, match="tie7"):
        network_from_dict(doc)


def test_edge_phases_must_fit_buses():
    doc = two_bus_doc(phases="a", load_p=(10, 0, 0), load_q=(3, 0, 0))
    doc["buses"][1]["phases"] = "a"
    doc["edges"][0]["phases"] = "ab"
    with pytest.raises(NetworkValidationError, match="not a subset"):
        network_from_dict(doc)


def test_load_on_missing_phase_rejected():
    doc = two_bus_doc(phases="a", load_p=(10, 5, 0), load_q=(3, 0, 0))
    with pytest.raises(NetworkValidationError, match="does not own"):
        network_from_dict(doc)


def test_schema_violation_rejected():
    doc = two_bus_doc()
    doc["schema_version"] = 99
    with pytest.raises(NetworkValidationError):
        network_from_dict(doc)


def test_virtual_edge_needs_grid_forming_dg():
    m = ten_bus_two_feeder(dg=True)
    doc = network_to_dict(m)
    doc["dgs"] = []
    with pytest.raises(NetworkValidationError, match="virtual edge"):
        network_from_dict(doc)


def test_file_round_trip(tmp_path):
    m = synth_multifeeder(3, 8, 2, 2, seed=5, capacitors=1, regulators=1)
    path = tmp_path / "net.json"
    save_network(m, path)
    again = load_network(path)
    assert again == m
    assert again.content_hash == m.content_hash
    assert network_to_dict(again) == json.loads(path.read_text())


def test_scenario_round_trip(tmp_path):
    m = ten_bus_two_feeder()
    sc = FaultScenario(faulted_edges=frozenset({"LA2"}), tripped_switches=frozenset({"SA"}),
                       isolation_switches=frozenset({"SA3"}), description="x")
    path = tmp_path / "sc.json"
    path.write_text(json.dumps(scenario_to_dict(sc)))
    assert load_scenario(path, m) == sc


def test_scenario_unknown_edge_rejected(tmp_path):
    path = tmp_path / "sc.json"
    path.write_text(json.dumps(scenario_to_dict(FaultScenario(tripped_switches=frozenset({"nope"})))))
    with pytest.raises(NetworkValidationError, match="nope"):
        load_scenario(path, ten_bus_two_feeder())


def test_four_feeder_structure():
    m = synth_multifeeder(4, 10, 7, 4, seed=7)
    assert len(m.edges_of_kind(TIE)) == 7
    assert len(m.dgs) == 4 and all(d.grid_forming for d in m.dgs)
    assert len(m.edges_of_kind(VIRTUAL)) == 4


def test_synth_is_deterministic():
    a = synth_multifeeder(4, 10, 3, 2, seed=7)
    b = synth_multifeeder(4, 10, 3, 2, seed=7)
    assert network_to_dict(a) == network_to_dict(b)
    assert network_to_dict(synth_multifeeder(4, 10, 3, 2, seed=8)) != network_to_dict(a)


def test_synth_rejects_bad_counts():
    with pytest.raises(ValueError):
        synth_multifeeder(0, 5, 0, 0, seed=1)
    with pytest.raises(ValueError):
        synth_multifeeder(1, 5, 1, 0, seed=1)


@settings(max_examples=25, deadline=None)
@given(feeders=st.integers(1, 4), buses=st.integers(3, 9), seed=st.integers(0, 10_000),
       ties=st.integers(0, 3), dgs=st.integers(0, 2))
def test_synth_invariants(feeders, buses, seed, ties, dgs):
    try:
        m = synth_multifeeder(feeders, buses, ties, dgs, seed)
    except ValueError:
        return
    for e in m.edges:
        assert set(e.phases) <= set(m.bus[e.from_bus].phases)
        assert set(e.phases) <= set(m.bus[e.to_bus].phases)
    rep = is_radial_connected(m, TopologyState.normal(m))
    assert rep.radial
    assert rep.energized_buses == set(m.bus)
    assert network_from_dict(network_to_dict(m)) == m
