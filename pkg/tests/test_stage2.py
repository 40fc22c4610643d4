import itertools

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from feederrestore.clpu import sample_curve
from feederrestore.netmodel import FaultScenario
from feederrestore.reports import SequenceFormatError, sequence_from_dict, sequence_to_dict
from feederrestore.stage1 import solve_stage1
from feederrestore.stage2 import (
    Stage2Infeasible, Stage2Options, interrupted_healthy, naive_order, replay_sequence, sequence_checks,
    solve_stage2, step_loads,
)
from feederrestore.synth import synth_multifeeder
from feederrestore.topology import TopologyState
from helpers import ten_bus_two_feeder, three_feeder_transfer

TRIP_A = FaultScenario(tripped_switches=frozenset({"SA"}))


def transfer_case(**kw):
    m = three_feeder_transfer(b_head_rating=520.0, a_load_kw=40.0, **kw)
    return m, solve_stage1(m, TRIP_A)


def test_no_fault_gives_empty_sequence():
    m = ten_bus_two_feeder()
    sc = FaultScenario()
    s1 = solve_stage1(m, sc)
    seq = solve_stage2(m, sc, s1)
    assert seq.actions == [] and seq.steps == []
    assert seq.target_closed == seq.initial_closed
    assert sequence_checks(m, sc, seq) == []


def test_single_tie_closure():
    m = ten_bus_two_feeder()
    s1 = solve_stage1(m, TRIP_A)
    seq = solve_stage2(m, TRIP_A, s1)
    assert seq.actions == [(1, "close", "T")]
    assert seq.verification["ok"]
    assert replay_sequence(m, TRIP_A, seq).ok
    # flat loads: 5 buses x 300 kW are dead until the tie closes at the first sub-step
    assert seq.served_kw_trace == [3000.0] * seq.substeps


def test_transfer_target():
    m, s1 = transfer_case()
    assert s1.switch_ops == {"open": ["SB3"], "close": ["TAB", "TBC"]}


def test_transfer_order_hand_values():
    m, s1 = transfer_case()
    opt = solve_stage2(m, TRIP_A, s1)
    naive = solve_stage2(m, TRIP_A, s1, fixed_order=naive_order(s1), settle=opt.settle_steps)
    # 5 sub-steps per macro step.  After opening SB3: B1, B2 and C1..C5 = 2100 kW.
    # naive closes TAB (+A, 600 kW) before TBC (+B3..B5, 900 kW)
    assert naive.actions == [(1, "open", "SB3"), (2, "close", "TAB"), (3, "close", "TBC")]
    assert naive.objective == pytest.approx(5 * 2100 + 5 * 2700 + 5 * 3600)
    assert opt.actions == [(1, "open", "SB3"), (2, "close", "TBC"), (3, "close", "TAB")]
    assert opt.objective == pytest.approx(5 * 2100 + 5 * 3000 + 5 * 3600)
    assert interrupted_healthy(opt) == {"B3", "B4", "B5"}


def test_optimal_matches_enumerated_orders():
    m, s1 = transfer_case()
    opt = solve_stage2(m, TRIP_A, s1)
    ops = s1.switch_ops["open"] + s1.switch_ops["close"]
    best = -np.inf
    for order in itertools.permutations(ops):
        try:
            seq = solve_stage2(m, TRIP_A, s1, fixed_order=list(order), settle=opt.settle_steps)
        except Stage2Infeasible:
            continue
        assert sequence_checks(m, TRIP_A, seq) == []
        best = max(best, seq.objective)
    assert opt.objective == pytest.approx(best, abs=1e-6)


def test_only_target_switches_move():
    m, s1 = transfer_case()
    seq = solve_stage2(m, TRIP_A, s1)
    acted = set(s1.switch_ops["open"]) | set(s1.switch_ops["close"])
    for step in seq.steps:
        assert set(step.closed) ^ set(seq.initial_closed) <= acted
    assert {e for _, _, e in seq.actions} == acted


def test_clpu_trace_consistent():
    m = synth_multifeeder(2, 6, 1, 0, seed=2, capacity_factor=3.0)
    sc = FaultScenario(tripped_switches=frozenset({"S1_01"}))
    s1 = solve_stage1(m, sc)
    seq = solve_stage2(m, sc, s1, Stage2Options(settle_steps=1))
    assert seq.verification["clpu_consistency_error"] < 1e-9
    loads = step_loads(m, seq)
    for step, ld in zip(seq.steps, loads):
        assert sum(float(np.sum(p)) for p, _ in ld.values()) == pytest.approx(step.served_kw, rel=1e-9)
    # a picked-up load starts at the undiversified factor and decays to the diversified one
    first = next(s for s in seq.steps if s.pickups)
    bus = m.bus[first.pickups[0]]
    prof = m.clpu_of(bus.id)
    i = first.t - 1
    p_first = float(np.sum(loads[i][bus.id][0]))
    assert p_first == pytest.approx(prof.s_u / prof.s_d * bus.total_kw, rel=1e-12)
    p_last = float(np.sum(loads[-1][bus.id][0]))
    curve = sample_curve(prof)
    k = len(seq.steps) - i
    assert p_last == pytest.approx(curve.samples[min(k, curve.n) - 1] / prof.s_d * bus.total_kw, rel=1e-12)
    assert p_last < p_first


def test_replay_flags_loop():
    m, s1 = transfer_case()
    seq = solve_stage2(m, TRIP_A, s1)
    bad = seq.steps[-1]
    bad.closed = frozenset(bad.closed | {"SB3"})
    rep = replay_sequence(m, TRIP_A, seq)
    assert not rep.ok
    assert any("not radial" in v for v in rep.violations)


def test_replay_flags_dropped_pickup():
    m, s1 = transfer_case()
    seq = solve_stage2(m, TRIP_A, s1)
    picked = next(s for s in seq.steps if "A1" in s.pickups)
    later = seq.steps[picked.t]  # the step after the pickup
    later.served = frozenset(later.served - {"A1"})
    rep = replay_sequence(m, TRIP_A, seq)
    assert not rep.ok
    assert any("dropped after pickup" in v for v in rep.violations)


def test_sequence_document_round_trip():
    m, s1 = transfer_case()
    seq = solve_stage2(m, TRIP_A, s1)
    doc = sequence_to_dict(seq, s1.taps, s1.caps, m.name)
    back, taps, caps = sequence_from_dict(doc, m)
    assert back.actions == seq.actions
    assert back.served_kw_trace == pytest.approx(seq.served_kw_trace)
    assert [s.closed for s in back.steps] == [s.closed for s in seq.steps]
    assert replay_sequence(m, TRIP_A, back, taps=taps, caps=caps).ok


def test_sequence_document_rejects_bad_input():
    m, s1 = transfer_case()
    doc = sequence_to_dict(solve_stage2(m, TRIP_A, s1), network=m.name)
    with pytest.raises(SequenceFormatError):
        sequence_from_dict({**doc, "format": "other"}, m)
    with pytest.raises(SequenceFormatError, match="unknown edges"):
        sequence_from_dict({**doc, "target_closed": ["nope"]}, m)
    with pytest.raises(SequenceFormatError, match="step count"):
        sequence_from_dict({**doc, "steps": doc["steps"][:-1]}, m)


def test_options_validated():
    with pytest.raises(ValueError):
        Stage2Options(substeps=0)
    with pytest.raises(ValueError):
        Stage2Options(settle_steps=5, max_settle_steps=4)


def test_initial_state_is_post_fault():
    m, s1 = transfer_case()
    seq = solve_stage2(m, TRIP_A, s1)
    assert seq.initial_closed == TopologyState.normal(m).closed - {"SA"}
    assert "A1" not in seq.initial_served


@settings(max_examples=6, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(a_kw=st.floats(20.0, 90.0), rating=st.floats(450.0, 700.0))
def test_optimal_never_worse_than_naive(a_kw, rating):
    m = three_feeder_transfer(b_head_rating=rating, a_load_kw=a_kw)
    s1 = solve_stage1(m, TRIP_A)
    opt = solve_stage2(m, TRIP_A, s1)
    assert sequence_checks(m, TRIP_A, opt) == []
    try:
        naive = solve_stage2(m, TRIP_A, s1, fixed_order=naive_order(s1), settle=opt.settle_steps)
    except Stage2Infeasible:
        return
    assert opt.objective >= naive.objective - 1e-6
