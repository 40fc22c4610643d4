"""Exhaustive Stage-1 oracle for tiny instances.

Enumerates every switch configuration, switchable-load set, capacitor status
and regulator tap, keeps the radial ones and evaluates each with
``linear_pf``.  The only continuous freedom left once the binaries are fixed
is the voltage of each DG island's slack bus; all flows and voltages are
affine in it, so feasibility is a small LP.  Nothing here reuses the MILP
formulation.
"""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from .netmodel import N_TAPS, PHASES, SECTIONALIZING, TIE, VIRTUAL, FaultScenario, NetworkModel
from .powerflow import PowerFlowError, linear_pf
from .topology import TopologyState, is_radial_connected

logger = logging.getLogger(__name__)

MAX_BINARIES = 20
_TAP_BITS = math.ceil(math.log2(N_TAPS))


class OracleCapExceeded(ValueError):
    pass


@dataclass
class OracleResult:
    objective: float
    weighted_load: float
    best_state: TopologyState
    served: frozenset[str]
    taps: dict
    caps: dict
    switch_ops: int
    dg_closed: int
    evaluated: int = 0
    feasible_states: list = field(default_factory=list)


def _evaluate(model, state, energized, served, taps, caps, u_min, u_max, head_cap, scale=1.0, dg_scale=1.0,
              tol=1e-7):
    """Return True when some island slack voltage makes the operating point feasible."""
    loads = {}
    for b in served:
        bus = model.bus[b]
        sd = model.clpu_of(b).s_d
        loads[b] = (np.array(bus.load_p) * sd, np.array(bus.load_q) * sd)
    islands = sorted(e.to_bus for e in model.edges if e.kind == VIRTUAL and state.is_closed(model, e.id))
    coords = [(b, PHASES.index(ph)) for b in islands for ph in model.bus[b].phases]
    x0 = {b: np.ones(3) for b in islands}
    try:
        base = linear_pf(model, state, loads, taps, caps, slack_u=x0)
    except PowerFlowError:
        return False
    grads = []
    for b, k in coords:
        xs = {bb: v.copy() for bb, v in x0.items()}
        xs[b][k] += 0.01
        f = linear_pf(model, state, loads, taps, caps, slack_u=xs)
        grads.append(f)

    def affine(getter):
        v0 = getter(base)
        return v0, np.array([(getter(g) - v0) / 0.01 for g in grads])

    heads = {e.id for e in model.edges if e.kind != VIRTUAL
             and (model.bus[e.from_bus].is_source or model.bus[e.to_bus].is_source)}
    A, ub = [], []

    def add(v0, g, upper):
        # v0 + g.(x - 1) <= upper
        if g.size == 0 or not np.any(np.abs(g) > 1e-12):
            if v0 > upper + tol:
                A.append(None)
            return
        A.append(g)
        ub.append(upper - v0 + g.sum())

    for b in energized:
        bus = model.bus[b]
        if bus.is_source:
            continue
        for ph in bus.phases:
            k = PHASES.index(ph)
            v0, g = affine(lambda f, b=b, k=k: f.U[b][k])
            add(v0, g, u_max)
            add(-v0, -g, -u_min)
    for e in model.edges:
        if not state.is_closed(model, e.id) or e.kind in (SECTIONALIZING, TIE):
            continue
        if e.kind == VIRTUAL:
            dg = model.dg_at[e.to_bus]
            for ph in e.phases:
                k = PHASES.index(ph)
                v0, g = affine(lambda f, k=k, e=e: f.P[e.id][k])
                add(-v0, -g, 0.0)
            v0, g = affine(lambda f, e=e: f.P[e.id].sum())
            add(v0, g, dg.p_max * scale * dg_scale)
            v0, g = affine(lambda f, e=e: f.Q[e.id].sum())
            add(v0, g, dg.q_max * scale * dg_scale)
            add(-v0, -g, dg.q_max * scale * dg_scale)
            continue
        rating = e.s_rated * scale * (head_cap if e.id in heads else 1.0)
        s_e = rating * math.sqrt((math.pi / 3) / math.sin(math.pi / 3))
        apothem = s_e * math.cos(math.pi / 6)
        for ph in e.phases:
            k = PHASES.index(ph)
            p0, gp = affine(lambda f, k=k, e=e: f.P[e.id][k])
            q0, gq = affine(lambda f, k=k, e=e: f.Q[e.id][k])
            for j in range(6):
                th = math.pi / 6 + j * math.pi / 3
                c, s = math.cos(th), math.sin(th)
                add(c * p0 + s * q0, c * gp + s * gq, apothem)
    if any(a is None for a in A):
        return False
    if not coords:
        return True
    bounds = [(u_min, u_max)] * len(coords)
    if not A:
        return True
    res = linprog(np.zeros(len(coords)), A_ub=np.array(A), b_ub=np.array(ub) + tol, bounds=bounds, method="highs")
    return res.status == 0


def brute_force_oracle(model: NetworkModel, scenario: FaultScenario, options=None,
                       cap: int = MAX_BINARIES, keep_feasible: bool = False) -> OracleResult:
    """Best Stage-1 objective by exhaustive enumeration.

    Uses the Stage-1 objective weights and limits from ``options`` (a
    ``Stage1Options``).  Among equal objectives the first state in
    enumeration order is kept.

    Raises:
        OracleCapExceeded: more than ``cap`` free binary digits.
    """
    from .stage1 import Stage1Options  # local import keeps the oracle free of MILP code at import time
    options = options or Stage1Options()
    w = options.weights(model)
    forced = scenario.forced_open
    free_sw = [e.id for e in model.edges if e.operable and e.id not in forced
               and (e.kind != VIRTUAL or options.allow_dg_islanding)]
    sw_loads = [b.id for b in model.buses if b.has_load and b.load_switchable and not b.is_source]
    cap_keys = []
    for c in model.capacitors if options.optimize_caps else ():
        if c.gang:
            cap_keys.append((c.bus, None))
        else:
            cap_keys.extend((c.bus, PHASES.index(p)) for p in model.bus[c.bus].phases)
    tap_keys = []
    for r in model.regulators if options.optimize_taps else ():
        if r.gang:
            tap_keys.append((r.edge, None))
        else:
            tap_keys.extend((r.edge, PHASES.index(p)) for p in model.edge[r.edge].phases)
    nbits = len(free_sw) + len(sw_loads) + len(cap_keys) + _TAP_BITS * len(tap_keys)
    if nbits > cap:
        raise OracleCapExceeded(f"{nbits} free binary digits exceed the oracle cap of {cap}")

    device_combos = []
    for cap_bits in itertools.product((0, 1), repeat=len(cap_keys)):
        caps: dict = {c.bus: np.zeros(3) for c in model.capacitors}
        for (bus, k), bit in zip(cap_keys, cap_bits):
            if k is None:
                caps[bus] = np.full(3, float(bit))
            else:
                caps[bus][k] = bit
        for tap_pos in itertools.product(range(N_TAPS), repeat=len(tap_keys)):
            taps: dict = {r.edge: np.full(3, r.tap) for r in model.regulators}
            for (edge, k), pos in zip(tap_keys, tap_pos):
                if k is None:
                    taps[edge] = np.full(3, pos)
                else:
                    taps[edge][k] = pos
            device_combos.append((taps, caps))

    def penalty(closed: set[str]) -> tuple[float, int, int]:
        ops = dg = 0
        pen = 0.0
        for e in model.edges:
            on = e.id in closed
            if e.kind == SECTIONALIZING and not on:
                pen += w.beta
            elif e.kind == TIE and on:
                pen += w.beta
            elif e.kind == VIRTUAL and on:
                pen += w.gamma
                dg += 1
        post = TopologyState.post_fault(model, scenario)
        for e in model.operable_edges:
            if (e in closed) != post.is_closed(model, e):
                ops += 1
        return pen, ops, dg

    fixed_loads = [b.id for b in model.buses if b.has_load and not (b.load_switchable and not b.is_source)]
    best: OracleResult | None = None
    evaluated = 0
    feasible = []
    for bits in itertools.product((0, 1), repeat=len(free_sw)):
        closed = {e for e, bit in zip(free_sw, bits) if bit}
        state = TopologyState(frozenset(closed), frozenset(forced))
        rep = is_radial_connected(model, state)
        if not rep.radial:
            continue
        energized = rep.energized_buses
        pen, ops, dg = penalty(closed)
        must = [b for b in fixed_loads if b in energized]
        optional = [b for b in sw_loads if b in energized]
        base_load = sum(model.bus[b].weight * model.bus[b].total_kw for b in must)
        upper = w.alpha * (base_load + sum(model.bus[b].weight * model.bus[b].total_kw for b in optional)) - pen
        if best is not None and upper < best.objective - 1e-9 and not keep_feasible:
            continue
        subsets = []
        for mask in itertools.product((0, 1), repeat=len(optional)):
            chosen = [b for b, bit in zip(optional, mask) if bit]
            wl = base_load + sum(model.bus[b].weight * model.bus[b].total_kw for b in chosen)
            subsets.append((-wl, mask, chosen))
        subsets.sort(key=lambda t: (t[0], tuple(-x for x in t[1])))
        for neg_wl, _, chosen in subsets:
            obj = w.alpha * (-neg_wl) - pen
            if best is not None and obj < best.objective - 1e-9 and not keep_feasible:
                break
            served = frozenset(must) | frozenset(chosen)
            ok_dev = None
            for taps, caps in device_combos:
                evaluated += 1
                if _evaluate(model, state, energized, served, taps, caps, options.u_min_effective,
                             options.u_max, options.feeder_loading_cap, options.rating_scale,
                             1.0 - options.dg_derate):
                    ok_dev = (taps, caps)
                    break
            if ok_dev is None:
                continue
            if keep_feasible:
                feasible.append((obj, state, served))
            if best is None or obj > best.objective + 1e-9:
                best = OracleResult(obj, -neg_wl, state, served,
                                    {k: v.tolist() for k, v in ok_dev[0].items()},
                                    {k: v.tolist() for k, v in ok_dev[1].items()}, ops, dg)
            break
    if best is None:
        raise RuntimeError("no feasible configuration (even all-open is infeasible)")
    best.evaluated = evaluated
    best.feasible_states = feasible
    return best
