"""Network constraint block shared by the Stage-1 and Stage-2 MILPs.

One call adds, for a single time instant, the linearised three-phase flow
balance, squared-voltage drops, regulator and capacitor models, voltage box,
hexagonal thermal limits and DG capacity.  Energization, load pickup and
switch status are supplied by the caller as binaries or constants, which is
what lets Stage 2 stack copies of the same block over time.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .milpcore import LinExpr, MILPModel, Operand, Var, lin_sum, linearize_product_bin_cont, polygon_thermal_constraints
from .netmodel import PHASES, REGULATOR, SECTIONALIZING, TIE, TAP_RATIOS, VIRTUAL, NetworkModel
from .powerflow import composite_matrices
from .topology import Cycle

logger = logging.getLogger(__name__)


def phase_idx(phases) -> list[int]:
    return [PHASES.index(p) for p in phases]


def is_const(x: Operand) -> bool:
    return not isinstance(x, (Var, LinExpr)) or (isinstance(x, LinExpr) and not x.terms)


def const_value(x: Operand) -> float:
    return x.const if isinstance(x, LinExpr) else float(x)


class StructuralInfeasible(ValueError):
    """Fixed decisions already violate a constraint; no solve is needed to know."""


@dataclass
class Limits:
    u_min: float
    u_max: float
    head_cap: float = 1.0
    thermal: bool = True
    voltage: bool = True
    dg_capacity: bool = True
    rating_scale: float = 1.0   # derating of thermal and DG limits
    dg_scale: float = 1.0       # extra derating of DG limits only


@dataclass
class Block:
    """Variables created by one call of :func:`add_network_block` (all per-unit)."""

    P: dict[str, dict[int, Var]] = field(default_factory=dict)
    Q: dict[str, dict[int, Var]] = field(default_factory=dict)
    U: dict[str, dict[int, Var]] = field(default_factory=dict)
    tap_vars: dict[str, dict] = field(default_factory=dict)    # edge -> {gang key: [32 binaries]}
    cap_vars: dict[str, dict] = field(default_factory=dict)    # bus -> {gang key: binary}


def flow_bounds(model: NetworkModel, limits: Limits, peak: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Per-phase |P| and |Q| bounds (pu): total demand (settled or CLPU peak) plus injections."""
    base = model.s_phase_base
    p = np.zeros(3)
    q = np.zeros(3)
    for b in model.buses:
        if b.has_load:
            prof = model.clpu_of(b.id)
            f = max(prof.s_u, prof.s_d) if peak else prof.s_d
            p += np.array(b.load_p) * f
            q += np.array(b.load_q) * f
    for c in model.capacitors:
        q += np.array(c.q_rated) * limits.u_max
    for d in model.dg_at.values():
        p += d.p_max
        q += d.q_max
    return p / base + 1e-3, q / base + 1e-3


def head_edges(model: NetworkModel) -> set[str]:
    return {e.id for e in model.edges if e.kind != VIRTUAL
            and (model.bus[e.from_bus].is_source or model.bus[e.to_bus].is_source)}


def add_network_block(m: MILPModel, model: NetworkModel, *, tag: str,
                      closed: Mapping[str, Operand], v: Mapping[str, Operand],
                      p_dem: Mapping[str, Mapping[int, Operand]], q_dem: Mapping[str, Mapping[int, Operand]],
                      limits: Limits, taps: Mapping[str, object] | None = None,
                      caps: Mapping[str, object] | None = None,
                      bounds: tuple[np.ndarray, np.ndarray] | None = None) -> Block:
    """Add one instant of the network model.

    ``closed`` maps every edge to its status operand (binary or 0/1 constant);
    ``v`` maps every bus to its energization operand; ``p_dem``/``q_dem`` give
    the served demand per bus phase in pu.  ``taps``/``caps`` fix regulator
    positions and capacitor statuses; a missing entry makes them decisions.
    """
    base = model.s_phase_base
    taps = taps or {}
    caps = caps if caps is not None else {}
    MP, MQ = bounds if bounds is not None else flow_bounds(model, limits)
    heads = head_edges(model)
    blk = Block()
    sfx = f"[{tag}]" if tag else ""

    # voltages
    for b in model.buses:
        blk.U[b.id] = {}
        for k in phase_idx(b.phases):
            if b.is_source:
                blk.U[b.id][k] = m.add_var(f"U[{b.id},{PHASES[k]}]{sfx}", b.v_set ** 2, b.v_set ** 2)
                continue
            u = m.add_var(f"U[{b.id},{PHASES[k]}]{sfx}", 0.0, limits.u_max)
            blk.U[b.id][k] = u
            vb = v[b.id]
            if limits.voltage:
                m.add_constr(u, ">=", limits.u_min * vb, f"vmin[{b.id},{k}]{sfx}")
            m.add_constr(u, "<=", limits.u_max * vb, f"vmax[{b.id},{k}]{sfx}")

    # flows
    inflow_p: dict[tuple[str, int], LinExpr] = {}
    inflow_q: dict[tuple[str, int], LinExpr] = {}

    def acc(store, bus, k, var, sign):
        store.setdefault((bus, k), LinExpr()).add_term(var, sign)

    for e in model.edges:
        st = closed[e.id]
        if is_const(st) and const_value(st) == 0:
            continue
        ks = phase_idx(e.phases)
        blk.P[e.id], blk.Q[e.id] = {}, {}
        for k in ks:
            if e.kind == VIRTUAL:
                p = m.add_var(f"P[{e.id},{PHASES[k]}]{sfx}", 0.0, MP[k])
            else:
                p = m.add_var(f"P[{e.id},{PHASES[k]}]{sfx}", -MP[k], MP[k])
            q = m.add_var(f"Q[{e.id},{PHASES[k]}]{sfx}", -MQ[k], MQ[k])
            blk.P[e.id][k], blk.Q[e.id][k] = p, q
            if not is_const(st):
                # open switch carries no flow
                m.add_constr(p, "<=", MP[k] * st, f"fz+[{e.id},P,{k}]{sfx}")
                m.add_constr(p, ">=", -MP[k] * st, f"fz-[{e.id},P,{k}]{sfx}")
                m.add_constr(q, "<=", MQ[k] * st, f"fz+[{e.id},Q,{k}]{sfx}")
                m.add_constr(q, ">=", -MQ[k] * st, f"fz-[{e.id},Q,{k}]{sfx}")
            acc(inflow_p, e.to_bus, k, p, 1.0)
            acc(inflow_p, e.from_bus, k, p, -1.0)
            acc(inflow_q, e.to_bus, k, q, 1.0)
            acc(inflow_q, e.from_bus, k, q, -1.0)
            if limits.thermal and e.kind not in (SECTIONALIZING, TIE, VIRTUAL):
                rating = e.s_rated * limits.rating_scale * (limits.head_cap if e.id in heads else 1.0) / base
                polygon_thermal_constraints(m, p, q, rating, f"hex[{e.id},{k}]{sfx}")

        if e.kind == VIRTUAL:
            dg = model.dg_at[e.to_bus]
            if limits.dg_capacity:
                sp = lin_sum(blk.P[e.id].values())
                sq = lin_sum(blk.Q[e.id].values())
                scale = limits.rating_scale * limits.dg_scale
                pm, qm = dg.p_max * scale / base, dg.q_max * scale / base
                m.add_constr(sp, "<=", pm * st, f"dgp[{e.id}]{sfx}")
                m.add_constr(sq, "<=", qm * st, f"dgq+[{e.id}]{sfx}")
                m.add_constr(sq, ">=", -qm * st, f"dgq-[{e.id}]{sfx}")
            continue

        Uf, Ut = blk.U[e.from_bus], blk.U[e.to_bus]
        if e.kind == REGULATOR:
            _regulator(m, model, e, blk, Uf, Ut, taps.get(e.id), limits, sfx)
            continue
        rr, xx = composite_matrices(model.r_pu(e.id), model.x_pu(e.id))
        for k in ks:
            drop = LinExpr()
            for j in ks:
                drop.add_term(blk.P[e.id][j], 2.0 * rr[k, j])
                drop.add_term(blk.Q[e.id][j], 2.0 * xx[k, j])
            dU = Uf[k] - Ut[k]
            if is_const(st):
                m.add_constr(dU, "==", drop, f"drop[{e.id},{k}]{sfx}")
            else:
                linearize_product_bin_cont(m, st, dU, drop, -limits.u_max, limits.u_max,
                                           f"drop[{e.id},{k}]{sfx}")

    # capacitor injections
    cap_q: dict[tuple[str, int], LinExpr] = {}
    for bank in model.capacitors:
        status = caps.get(bank.bus)
        keys = ["g"] if bank.gang else [PHASES[k] for k in phase_idx(model.bus[bank.bus].phases)]
        if status is None:
            blk.cap_vars[bank.bus] = {g: m.add_binary(f"ucap[{bank.bus},{g}]{sfx}") for g in keys}
        for k in phase_idx(model.bus[bank.bus].phases):
            qr = bank.q_rated[k] / base
            if qr == 0:
                continue
            u = blk.U[bank.bus][k]
            if status is None:
                x = blk.cap_vars[bank.bus]["g" if bank.gang else PHASES[k]]
                z = m.add_var(f"zcap[{bank.bus},{PHASES[k]}]{sfx}", 0.0, limits.u_max)
                linearize_product_bin_cont(m, x, u, z, 0.0, limits.u_max, f"cap[{bank.bus},{k}]{sfx}")
                cap_q[(bank.bus, k)] = LinExpr.of(z) * qr
            else:
                on = np.broadcast_to(np.asarray(status, float), (3,))[k]
                if on:
                    cap_q[(bank.bus, k)] = LinExpr.of(u) * qr

    # nodal balance
    for b in model.buses:
        if b.is_source:
            continue
        for k in phase_idx(b.phases):
            ip = inflow_p.get((b.id, k), LinExpr())
            iq = inflow_q.get((b.id, k), LinExpr())
            dp = p_dem.get(b.id, {}).get(k, 0.0)
            dq = q_dem.get(b.id, {}).get(k, 0.0)
            m.add_constr(ip, "==", dp, f"balP[{b.id},{k}]{sfx}")
            m.add_constr(iq + cap_q.get((b.id, k), 0.0), "==", dq, f"balQ[{b.id},{k}]{sfx}")
    return blk


def _regulator(m, model, e, blk, Uf, Ut, fixed, limits, sfx):
    reg = model.regulator[e.id]
    ks = phase_idx(e.phases)
    b2 = [r * r for r in TAP_RATIOS]
    if fixed is not None:
        pos = np.broadcast_to(np.asarray(fixed), (3,))
        for k in ks:
            m.add_constr(Ut[k], "==", b2[int(pos[k])] * Uf[k], f"reg[{e.id},{k}]{sfx}")
        return
    keys = ["g"] if reg.gang else [PHASES[k] for k in ks]
    sel = {}
    for g in keys:
        sel[g] = [m.add_binary(f"utap[{e.id},{g},{i}]{sfx}") for i in range(len(TAP_RATIOS))]
        m.add_constr(lin_sum(sel[g]), "==", 1.0, f"tap1[{e.id},{g}]{sfx}")
    blk.tap_vars[e.id] = sel
    for k in ks:
        g = "g" if reg.gang else PHASES[k]
        rhs = LinExpr()
        for i, u in enumerate(sel[g]):
            z = m.add_var(f"ztap[{e.id},{PHASES[k]},{i}]{sfx}", 0.0, limits.u_max)
            linearize_product_bin_cont(m, u, Uf[k], z, 0.0, limits.u_max, f"tap[{e.id},{k},{i}]{sfx}")
            rhs.add_term(z, b2[i])
        m.add_constr(Ut[k], "==", rhs, f"reg[{e.id},{k}]{sfx}")


def add_energization(m: MILPModel, model: NetworkModel, closed: Mapping[str, Operand],
                     v: Mapping[str, Operand], tag: str = "") -> None:
    """Couple bus energization to edge status.

    In-service fixed edges tie both ends together; a closed switch does the
    same; a closed virtual edge energizes its DG bus.
    """
    sfx = f"[{tag}]" if tag else ""
    for e in model.edges:
        st = closed[e.id]
        vi, vj = v[e.from_bus], v[e.to_bus]
        if is_const(st) and const_value(st) == 0:
            continue
        if e.kind == VIRTUAL:
            m.add_constr(vj, ">=", st, f"vdg[{e.id}]{sfx}")
            continue
        if is_const(vi) and is_const(vj):
            continue
        if is_const(st):
            m.add_constr(LinExpr.of(vi) - vj, "==", 0.0, f"veq[{e.id}]{sfx}")
        else:
            m.add_constr(LinExpr.of(vi) - vj, "<=", 1.0 - LinExpr.of(st), f"vsw+[{e.id}]{sfx}")
            m.add_constr(LinExpr.of(vj) - vi, "<=", 1.0 - LinExpr.of(st), f"vsw-[{e.id}]{sfx}")


def add_radiality(m: MILPModel, cycles: list[Cycle], closed: Mapping[str, Operand], tag: str = "") -> int:
    """At least one edge of every cycle open.  Returns the number of rows added."""
    sfx = f"[{tag}]" if tag else ""
    n = 0
    for idx, cyc in enumerate(cycles):
        expr = LinExpr()
        satisfied = False
        for eid in cyc.edges:
            st = closed[eid]
            if is_const(st):
                if const_value(st) == 0:
                    satisfied = True
                    break
                expr.add_term(1.0, 1.0)
            else:
                expr.add_term(st, 1.0)
        if satisfied:
            continue
        if not expr.terms:
            raise StructuralInfeasible(f"cycle {cyc.edges} cannot be opened")
        m.add_constr(expr, "<=", len(cyc.edges) - 1, f"cyc{idx}{sfx}")
        n += 1
    return n


@dataclass(frozen=True)
class ObjectiveWeights:
    alpha: float
    beta: float
    gamma: float
    epsilon: float
    quantum: float


def load_quantum(model: NetworkModel) -> float:
    """Largest power of ten dividing every weighted load (kW); falls back to the smallest load."""
    vals = [b.weight * b.total_kw for b in model.buses if b.has_load and b.weight * b.total_kw > 0]
    if not vals:
        return 1.0
    for k in range(3, -7, -1):
        q = 10.0 ** k
        if all(abs(x / q - round(x / q)) < 1e-9 * max(1.0, x / q) for x in vals):
            return q
    logger.warning("weighted loads share no decimal quantum; using the smallest load")
    return min(vals)


def objective_weights(model: NetworkModel, quantum: float | None = None, alpha: float = 1.0) -> ObjectiveWeights:
    """alpha = 1, beta = eps/(2|E_S|+1), gamma = 2|E_t| beta (1+eps).

    ``eps`` is picked so the largest possible switching-penalty spread stays
    below half of ``alpha * quantum``.
    """
    q = load_quantum(model) if quantum is None else quantum
    n_s = len(model.edges_of_kind(SECTIONALIZING, TIE, VIRTUAL))
    n_t = len(model.edges_of_kind(TIE))
    n_v = len(model.edges_of_kind(VIRTUAL))
    k = (n_s + 4 * max(n_t, 1) * n_v) / (2 * n_s + 1)
    eps = min(1.0, 0.5 * alpha * q / max(k, 1e-12))
    beta = eps / (2 * n_s + 1)
    gamma = 2 * max(n_t, 1) * beta * (1 + eps)
    return ObjectiveWeights(alpha, beta, gamma, eps, q)


def max_penalty_spread(model: NetworkModel, w: ObjectiveWeights) -> float:
    n_st = len(model.edges_of_kind(SECTIONALIZING, TIE))
    n_v = len(model.edges_of_kind(VIRTUAL))
    return w.beta * n_st + w.gamma * n_v


def phase_demands(model: NetworkModel, bus_id: str, factor: Operand) -> tuple[dict[int, LinExpr], dict[int, LinExpr]]:
    """Per-phase pu demand ``factor * load`` as expressions."""
    base = model.s_phase_base
    b = model.bus[bus_id]
    p, q = {}, {}
    for k in phase_idx(b.phases):
        p[k] = LinExpr.of(factor) * (b.load_p[k] / base)
        q[k] = LinExpr.of(factor) * (b.load_q[k] / base)
    return p, q


def gang_value(sel: dict, result, n_phases_keys) -> object:
    """Decode tap selections to an int (gang) or a 3-tuple of positions."""
    out = []
    for g, us in sel.items():
        vals = [result.value(u) for u in us]
        out.append((g, int(np.argmax(vals))))
    if len(out) == 1 and out[0][0] == "g":
        return out[0][1]
    pos = [None, None, None]
    for g, i in out:
        pos[PHASES.index(g)] = i
    return tuple(pos)


def isclose(a: float, b: float, tol: float = 1e-6) -> bool:
    return math.isclose(a, b, rel_tol=tol, abs_tol=tol)
