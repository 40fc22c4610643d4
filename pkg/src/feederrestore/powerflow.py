"""Power flow over a fixed radial topology.

``linear_pf`` evaluates the lossless three-phase linearised branch-flow model
used inside the MILPs; ``sweep_pf`` is an independent backward/forward sweep
with constant-power loads and losses, used as the exact reference.

Loads are passed as ``{bus: (p[3], q[3])}`` in kW / kVAr and must already be
the served demand (load status and CLPU factor applied).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .milpcore import in_hexagon
from .netmodel import (
    PHASES, REGULATOR, SECTIONALIZING, TIE, VIRTUAL, NetworkModel, Regulator, phase_mask,
)
from .topology import TopologyState, oriented_tree

logger = logging.getLogger(__name__)

_ALPHA = np.exp(1j * np.array([0.0, -2 * np.pi / 3, 2 * np.pi / 3]))
_AAH = np.outer(_ALPHA, _ALPHA.conj())

Loads = Mapping[str, tuple]


class PowerFlowError(RuntimeError):
    pass


def composite_matrices(r: np.ndarray, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Phase-coupled resistance/reactance seen by the squared-voltage drop.

    With a = alpha alpha^H:  r~ = Re(a) * r + Im(a) * x,  x~ = Re(a) * x - Im(a) * r
    (elementwise products).
    """
    return _AAH.real * r + _AAH.imag * x, _AAH.real * x - _AAH.imag * r


@dataclass
class FlowState:
    """Edge flows in kW/kVAr (from -> to direction) and squared bus voltages in pu."""

    P: dict[str, np.ndarray]
    Q: dict[str, np.ndarray]
    U: dict[str, np.ndarray]
    slack: dict[str, np.ndarray] = field(default_factory=dict)
    energized: set[str] = field(default_factory=set)
    iterations: int = 0

    @property
    def V(self) -> dict[str, np.ndarray]:
        return {b: np.sqrt(np.maximum(u, 0.0)) for b, u in self.U.items()}

    def min_voltage(self, model: NetworkModel) -> float:
        vals = [np.sqrt(self.U[b][phase_mask(model.bus[b].phases)]).min()
                for b in self.energized if b in self.U]
        return float(min(vals)) if vals else float("nan")


def settled_loads(model: NetworkModel, served: Mapping[str, float] | set[str]) -> dict[str, tuple]:
    """Diversified demand ``s_d * P_L`` for the served buses (a set or bus -> fraction)."""
    if not isinstance(served, Mapping):
        served = {b: 1.0 for b in served}
    out = {}
    for b, frac in served.items():
        bus = model.bus[b]
        if not bus.has_load or frac == 0:
            continue
        sd = model.clpu_of(b).s_d
        out[b] = (np.array(bus.load_p) * sd * frac, np.array(bus.load_q) * sd * frac)
    return out


def _tap_ratios(model: NetworkModel, taps: Mapping | None, edge_id: str) -> np.ndarray:
    reg = model.regulator[edge_id]
    pos = None if taps is None else taps.get(edge_id)
    if pos is None:
        pos = reg.tap
    pos = np.broadcast_to(np.asarray(pos), (3,))
    return np.array([Regulator.ratio(int(p)) for p in pos])


def _cap_q(model: NetworkModel, caps: Mapping | None, bus_id: str) -> np.ndarray:
    """Per-phase rated kVAr of the switched-in capacitor steps at ``bus_id``."""
    bank = model.capacitor.get(bus_id)
    if bank is None or caps is None or bus_id not in caps:
        return np.zeros(3)
    on = np.broadcast_to(np.asarray(caps[bus_id], dtype=float), (3,))
    return np.array(bank.q_rated) * on


def _slack_u(model: NetworkModel, root: str, vedge: str | None, slack_u: Mapping | None) -> np.ndarray:
    mask = phase_mask(model.bus[root].phases)
    if slack_u is not None and root in slack_u:
        u = np.broadcast_to(np.asarray(slack_u[root], float), (3,)).copy()
    elif vedge is None:
        u = np.full(3, model.bus[root].v_set ** 2)
    else:
        u = np.full(3, model.dg_at[root].v_set ** 2)
    return np.where(mask, u, 0.0)


def linear_pf(model: NetworkModel, state: TopologyState, loads: Loads, taps: Mapping | None = None,
              caps: Mapping | None = None, slack_u: Mapping | None = None,
              max_iter: int = 100, tol: float = 1e-14) -> FlowState:
    """Evaluate the linearised model on a radial state.

    Flows are downstream demand sums; squared voltages drop by
    ``2 (r~ P + x~ Q)`` along lines and scale by the squared tap ratio on
    regulators.  Capacitor output ``q_rated * U`` couples Q to U, so the two
    passes are repeated until U stops changing.
    """
    try:
        tree = oriented_tree(model, state)
    except ValueError as exc:
        raise PowerFlowError(f"state is not radial: {exc}") from exc
    base = model.s_phase_base
    nodes = set(tree.roots) | {c for _, _, c in tree.order}
    pl = {b: np.zeros(3) for b in nodes}
    ql = {b: np.zeros(3) for b in nodes}
    for b, (p, q) in loads.items():
        if b not in nodes:
            if np.any(np.asarray(p) != 0) or np.any(np.asarray(q) != 0):
                raise PowerFlowError(f"load at de-energized bus {b}")
            continue
        pl[b] = np.asarray(p, float) / base
        ql[b] = np.asarray(q, float) / base
    capq = {b: _cap_q(model, caps, b) / base for b in nodes}
    rt = {}
    for eid, _, _ in tree.order:
        if model.edge[eid].kind != REGULATOR:
            rt[eid] = composite_matrices(model.r_pu(eid), model.x_pu(eid))
    emask = {eid: phase_mask(model.edge[eid].phases) for eid, _, _ in tree.order}

    U = {b: np.zeros(3) for b in nodes}
    for r, ve in tree.roots.items():
        U[r] = _slack_u(model, r, ve, slack_u)
    for eid, p, c in tree.order:
        U[c] = U[p].copy() * emask[eid]
    Pf: dict[str, np.ndarray] = {}
    Qf: dict[str, np.ndarray] = {}
    it = 0
    for it in range(1, max_iter + 1):
        Pn = {b: pl[b].copy() for b in nodes}
        Qn = {b: ql[b] - capq[b] * U[b] for b in nodes}
        for eid, p, c in reversed(tree.order):
            Pf[eid] = Pn[c] * emask[eid]
            Qf[eid] = Qn[c] * emask[eid]
            Pn[p] += Pf[eid]
            Qn[p] += Qf[eid]
        change = 0.0
        for eid, p, c in tree.order:
            if model.edge[eid].kind == REGULATOR:
                a = _tap_ratios(model, taps, eid)
                new = (a ** 2) * U[p]
            else:
                rr, xx = rt[eid]
                new = U[p] - 2.0 * (rr @ Pf[eid] + xx @ Qf[eid])
            new = new * emask[eid]
            change = max(change, float(np.max(np.abs(new - U[c]))))
            U[c] = new
        if change < tol:
            break
    P = {e.id: np.zeros(3) for e in model.edges}
    Q = {e.id: np.zeros(3) for e in model.edges}
    for eid, p, c in tree.order:
        sign = 1.0 if model.edge[eid].from_bus == p else -1.0
        P[eid] = sign * Pf[eid] * base
        Q[eid] = sign * Qf[eid] * base
    for r, ve in tree.roots.items():
        if ve is not None:
            sub = _subtree_totals(tree, r, pl, ql, capq, U)
            P[ve] = sub[0] * base
            Q[ve] = sub[1] * base
    U_all = {b.id: U.get(b.id, np.zeros(3)) for b in model.buses}
    slack = {r: U[r].copy() for r in tree.roots}
    return FlowState(P, Q, U_all, slack, set(nodes), it)


def _subtree_totals(tree, root, pl, ql, capq, U):
    """Net (P, Q) injected into the island at ``root`` in pu (load minus capacitor output)."""
    ch: dict[str, list[str]] = {}
    for _, p, c in tree.order:
        ch.setdefault(p, []).append(c)
    p_tot, q_tot = np.zeros(3), np.zeros(3)
    stack = [root]
    while stack:
        n = stack.pop()
        p_tot += pl[n]
        q_tot += ql[n] - capq[n] * U[n]
        stack.extend(ch.get(n, ()))
    return p_tot, q_tot


def sweep_pf(model: NetworkModel, state: TopologyState, loads: Loads, taps: Mapping | None = None,
             caps: Mapping | None = None, slack_u: Mapping | None = None,
             tol: float = 1e-10, max_iter: int = 200) -> FlowState:
    """Backward/forward sweep with constant-power wye loads and full 3x3 impedances.

    Capacitors are constant-impedance (``q_rated * |V|^2``); regulators are
    ideal ratio transformers.  Converged when ``max |dV| < tol``.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    try:
        tree = oriented_tree(model, state)
    except ValueError as exc:
        raise PowerFlowError(f"state is not radial: {exc}") from exc
    base = model.s_phase_base
    nodes = list(tree.roots) + [c for _, _, c in tree.order]
    S = {b: np.zeros(3, complex) for b in nodes}
    for b, (p, q) in loads.items():
        if b in S:
            S[b] = (np.asarray(p, float) + 1j * np.asarray(q, float)) / base
    capq = {b: _cap_q(model, caps, b) / base for b in nodes}
    bmask = {b: phase_mask(model.bus[b].phases) for b in nodes}
    emask = {eid: phase_mask(model.edge[eid].phases) for eid, _, _ in tree.order}
    Z = {}
    ratio = {}
    for eid, _, _ in tree.order:
        if model.edge[eid].kind == REGULATOR:
            ratio[eid] = _tap_ratios(model, taps, eid)
        else:
            Z[eid] = model.r_pu(eid) + 1j * model.x_pu(eid)

    V = {}
    for r, ve in tree.roots.items():
        V[r] = np.sqrt(_slack_u(model, r, ve, slack_u)) * _ALPHA
    for eid, p, c in tree.order:
        V[c] = V[p] * emask[eid]
        if eid in ratio:
            V[c] = V[c] * ratio[eid]

    I_send: dict[str, np.ndarray] = {}
    for it in range(1, max_iter + 1):
        inj = {}
        for b in nodes:
            v = V[b]
            cur = np.zeros(3, complex)
            ok = bmask[b] & (np.abs(v) > 1e-9)
            cur[ok] = np.conj(S[b][ok] / v[ok]) + 1j * capq[b][ok] * v[ok]
            inj[b] = cur
        for eid, p, c in reversed(tree.order):
            i_recv = inj[c] * emask[eid]
            I_send[eid] = i_recv * ratio[eid] if eid in ratio else i_recv
            inj[p] = inj[p] + I_send[eid]
        change = 0.0
        for eid, p, c in tree.order:
            if eid in ratio:
                new = ratio[eid] * V[p]
            else:
                new = V[p] - Z[eid] @ I_send[eid]
            new = new * emask[eid]
            change = max(change, float(np.max(np.abs(new - V[c]))))
            V[c] = new
        if change < tol:
            break
    else:
        raise PowerFlowError(f"sweep did not converge in {max_iter} iterations (last change {change:.3e})")

    P = {e.id: np.zeros(3) for e in model.edges}
    Q = {e.id: np.zeros(3) for e in model.edges}
    for eid, p, c in tree.order:
        s = V[p] * np.conj(I_send[eid]) * emask[eid] * base
        sign = 1.0 if model.edge[eid].from_bus == p else -1.0
        P[eid] = sign * s.real
        Q[eid] = sign * s.imag
    for r, ve in tree.roots.items():
        if ve is not None:
            tot = V[r] * np.conj(inj[r]) * base
            P[ve], Q[ve] = tot.real, tot.imag
    U = {b.id: np.zeros(3) for b in model.buses}
    for b in nodes:
        U[b] = np.abs(V[b]) ** 2
    slack = {r: U[r].copy() for r in tree.roots}
    return FlowState(P, Q, U, slack, set(nodes), it)


@dataclass(frozen=True)
class LimitViolation:
    kind: str  # "undervoltage" | "overvoltage" | "thermal" | "dg_capacity"
    element: str
    phase: str
    value: float
    limit: float

    def __str__(self):
        return f"{self.kind} at {self.element}.{self.phase}: {self.value:.6g} vs {self.limit:.6g}"


def check_limits(flow: FlowState, model: NetworkModel, u_min: float, u_max: float,
                 tol: float = 1e-6, thermal: str = "circle") -> list[LimitViolation]:
    """List bus-phase voltage and edge-phase rating violations.

    Voltages are checked on energized buses in squared pu.  Ratings use the
    exact circle ``P^2 + Q^2 <= S_rated^2`` by default (``thermal="hexagon"``
    checks the linearised polygon instead).  Grid-forming DG output is
    checked against its capacity.
    """
    out: list[LimitViolation] = []
    for b in sorted(flow.energized):
        if model.bus[b].is_source:
            continue
        u = flow.U[b]
        for k, ph in enumerate(PHASES):
            if ph not in model.bus[b].phases:
                continue
            if u[k] < u_min - tol:
                out.append(LimitViolation("undervoltage", b, ph, float(np.sqrt(max(u[k], 0))), float(np.sqrt(u_min))))
            elif u[k] > u_max + tol:
                out.append(LimitViolation("overvoltage", b, ph, float(np.sqrt(u[k])), float(np.sqrt(u_max))))
    for e in model.edges:
        if e.kind in (SECTIONALIZING, TIE):
            continue
        P, Q = flow.P[e.id], flow.Q[e.id]
        if e.kind == VIRTUAL:
            dg = model.dg_at[e.to_bus]
            if P.sum() > dg.p_max * (1 + tol) + tol:
                out.append(LimitViolation("dg_capacity", e.id, "p", float(P.sum()), dg.p_max))
            if Q.sum() > dg.q_max * (1 + tol) + tol:
                out.append(LimitViolation("dg_capacity", e.id, "q", float(Q.sum()), dg.q_max))
            continue
        for k, ph in enumerate(PHASES):
            if ph not in e.phases:
                continue
            if thermal == "hexagon":
                ok = in_hexagon(P[k], Q[k], e.s_rated, tol=tol * e.s_rated)
            else:
                ok = np.hypot(P[k], Q[k]) <= e.s_rated * (1 + tol)
            if not ok:
                out.append(LimitViolation("thermal", e.id, ph, float(np.hypot(P[k], Q[k])), e.s_rated))
    return out


def head_apparent_power(model: NetworkModel, flow: FlowState) -> dict[str, float]:
    """Three-phase apparent power on each edge leaving a substation source (kVA)."""
    out = {}
    for e in model.edges:
        if e.kind == VIRTUAL:
            continue
        if model.bus[e.from_bus].is_source or model.bus[e.to_bus].is_source:
            out[e.id] = float(abs(flow.P[e.id].sum() + 1j * flow.Q[e.id].sum()))
    return out
