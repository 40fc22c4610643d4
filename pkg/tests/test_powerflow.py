import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from feederrestore.milpcore import polygon_scale
from feederrestore.netmodel import network_from_dict, network_to_dict
from feederrestore.powerflow import (
    FlowState, PowerFlowError, check_limits, composite_matrices, linear_pf, settled_loads,
    sweep_pf,
)
from feederrestore.synth import synth_multifeeder
from feederrestore.topology import TopologyState
from helpers import all_loads, deviations, loaded_to, ten_bus_two_feeder, two_bus

U_MIN = 0.9372 ** 2
U_MAX = 1.05 ** 2


def test_zero_load_flat():
    m = ten_bus_two_feeder()
    state = TopologyState.normal(m)
    lin = linear_pf(m, state, {})
    for b in m.bus:
        assert np.allclose(lin.U[b], 1.0, atol=0, rtol=0)
    assert all(not np.any(p) for p in lin.P.values())
    swp = sweep_pf(m, state, {})
    for b in m.bus:
        assert np.allclose(swp.U[b], lin.U[b], atol=1e-14)


def test_two_bus_hand_value():
    m = two_bus(phases="a", load_p=(100.0, 0, 0), load_q=(30.0, 0, 0), r=0.5, x=1.0)
    lin = linear_pf(m, TopologyState.normal(m), settled_loads(m, {"b"}))
    zb = 12.47 ** 2 * 1000 / 1000
    p, q = 100 / (1000 / 3), 30 / (1000 / 3)
    expected = 1.0 - 2 * (0.5 / zb * p + 1.0 / zb * q)
    assert lin.U["b"][0] == pytest.approx(expected, abs=1e-14)
    assert lin.P["l"][0] == pytest.approx(100.0)
    assert lin.U["b"][1] == 0 and lin.U["b"][2] == 0


def test_composite_single_phase_is_plain():
    r = np.diag([0.3, 0, 0])
    x = np.diag([0.7, 0, 0])
    rt, xt = composite_matrices(r, x)
    assert rt[0, 0] == pytest.approx(0.3) and xt[0, 0] == pytest.approx(0.7)


def test_balanced_case_symmetric():
    mutual_r = [[0.5, 0.1, 0.1], [0.1, 0.5, 0.1], [0.1, 0.1, 0.5]]
    mutual_x = [[1.0, 0.4, 0.4], [0.4, 1.0, 0.4], [0.4, 0.4, 1.0]]
    m = two_bus()
    doc = network_to_dict(m)
    doc["edges"][0]["r"], doc["edges"][0]["x"] = mutual_r, mutual_x
    m = network_from_dict(doc)
    state = TopologyState.normal(m)
    for pf in (linear_pf, sweep_pf):
        u = pf(m, state, settled_loads(m, {"b"})).U["b"]
        assert np.ptp(u) < 1e-12


def test_sweep_error_grows_with_load():
    m = two_bus(load_p=(300, 300, 300), load_q=(100, 100, 100), r=2.0, x=4.0)
    state = TopologyState.normal(m)
    errs = [deviations(m, state, settled_loads(m, {"b": f}))[0] for f in (0.1, 0.5, 1.0, 2.0)]
    assert errs[0] < 1e-4
    assert all(a < b for a, b in zip(errs, errs[1:]))


@pytest.mark.parametrize("seed", range(4))
def test_full_loading_within_bounds(seed):
    m = synth_multifeeder(2, 10, 0, 0, seed, capacity_factor=1.0)
    dv, dh = deviations(m, *loaded_to(m, 1.0))
    assert dv <= 0.002
    assert dh <= 0.035


def test_taps_scale_voltage():
    m = synth_multifeeder(1, 6, 0, 0, seed=1, regulators=1)
    reg = m.regulators[0].edge
    state = TopologyState.normal(m)
    ld = all_loads(m, state)
    lo = linear_pf(m, state, ld, taps={reg: 10})
    hi = linear_pf(m, state, ld, taps={reg: 24})
    down = m.edge[reg].to_bus
    assert np.all(hi.U[down] > lo.U[down])
    s = sweep_pf(m, state, ld, taps={reg: 24})
    assert np.max(np.abs(s.V[down] - hi.V[down])) < 2e-3


def test_capacitor_raises_voltage():
    m = synth_multifeeder(1, 6, 0, 0, seed=1, capacitors=1)
    bus = m.capacitors[0].bus
    state = TopologyState.normal(m)
    ld = all_loads(m, state)
    off = linear_pf(m, state, ld, caps={bus: 0})
    on = linear_pf(m, state, ld, caps={bus: 1})
    assert np.all(on.U[bus][np.array([p in m.bus[bus].phases for p in "abc"])]
                  > off.U[bus][np.array([p in m.bus[bus].phases for p in "abc"])])


def test_non_radial_rejected():
    m = ten_bus_two_feeder()
    with pytest.raises(PowerFlowError):
        linear_pf(m, TopologyState.normal(m).toggled("T"), {})
    with pytest.raises(PowerFlowError):
        sweep_pf(m, TopologyState.normal(m).toggled("T"), {})


def test_load_on_dead_bus_rejected():
    m = ten_bus_two_feeder()
    state = TopologyState.normal(m).toggled("SA3")
    with pytest.raises(PowerFlowError, match="de-energized"):
        linear_pf(m, state, settled_loads(m, {"A4"}))


def test_deenergized_island_is_zero():
    m = ten_bus_two_feeder()
    state = TopologyState.normal(m).toggled("SA3")
    for pf in (linear_pf, sweep_pf):
        f = pf(m, state, all_loads(m, state))
        for b in ("A3", "A4", "A5"):
            assert not np.any(f.U[b])
        for e in ("SA3", "LA4", "LA5"):
            assert not np.any(f.P[e]) and not np.any(f.Q[e])


def _flat(model, u_b):
    U = {b: np.ones(3) for b in model.bus}
    U["b"] = np.full(3, u_b)
    zero = {e.id: np.zeros(3) for e in model.edges}
    return FlowState(dict(zero), dict(zero), U, energized=set(model.bus))


def test_flat_profile_clean():
    m = two_bus()
    assert check_limits(_flat(m, 1.0), m, U_MIN, U_MAX) == []


def test_low_voltage_flagged():
    m = two_bus()
    viol = check_limits(_flat(m, 0.93 ** 2), m, U_MIN, U_MAX)
    assert [(v.kind, v.element) for v in viol] == [("undervoltage", "b")] * 3
    assert viol[0].value == pytest.approx(0.93)


def test_point_inside_hexagon_outside_circle_flagged():
    m = two_bus(s_rated=500.0)
    flow = _flat(m, 1.0)
    p = 1.05 * 500.0
    assert p < 500.0 * polygon_scale(6)
    flow.P["l"] = np.array([p, 0.0, 0.0])
    circle = check_limits(flow, m, U_MIN, U_MAX)
    assert [(v.kind, v.phase) for v in circle] == [("thermal", "a")]
    assert check_limits(flow, m, U_MIN, U_MAX, thermal="hexagon") == []


@settings(max_examples=25, deadline=None)
@given(feeders=st.integers(1, 3), buses=st.integers(3, 9), seed=st.integers(0, 5000),
       factor=st.floats(0.0, 1.5), open_one=st.booleans())
def test_lossless_aggregation(feeders, buses, seed, factor, open_one):
    m = synth_multifeeder(feeders, buses, 0, 0, seed)
    state = TopologyState.normal(m)
    if open_one:
        sect = [e.id for e in m.edges if e.kind == "sectionalizing_switch"]
        state = state.toggled(sect[seed % len(sect)])
    loads = all_loads(m, state, factor)
    f = linear_pf(m, state, loads)
    for b in m.buses:
        if b.is_source:
            continue
        inflow = sum(f.P[e] for e in m.incident[b.id] if m.edge[e].to_bus == b.id)
        outflow = sum(f.P[e] for e in m.incident[b.id] if m.edge[e].from_bus == b.id)
        load = loads[b.id][0] if b.id in loads else np.zeros(3)
        assert np.allclose(inflow, load + outflow, rtol=0, atol=1e-9)
        if b.id not in f.energized:
            assert not np.any(f.U[b.id])
    assert all(math.isfinite(x) for u in f.U.values() for x in u)
