"""Stage 1: optimal restored radial configuration.

Maximises weighted restored load, then minimises switching operations and,
with a larger penalty, DG island formation.  Regulator taps and capacitor
statuses are co-optimised.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np

from . import formulation as F
from .milpcore import INFEASIBLE, MILPModel, Operand, SolveOptions, SolverError, solve
from .netmodel import SECTIONALIZING, TIE, VIRTUAL, FaultScenario, NetworkModel
from .powerflow import FlowState, check_limits, linear_pf, settled_loads
from .topology import DEFAULT_CYCLE_CAP, TopologyState, cached_cycles, feeder_of, is_radial_connected

logger = logging.getLogger(__name__)

V_MIN_DEFAULT = 0.9372
V_MAX_DEFAULT = 1.05


class Stage1Infeasible(RuntimeError):
    """No restoration plan satisfies the limits; ``cause`` names the binding family."""

    def __init__(self, cause: str, message: str):
        super().__init__(message)
        self.cause = cause


class Stage1Error(RuntimeError):
    pass


@dataclass
class Stage1Options:
    """Weights default to the automatic scaling; limits are squared pu."""

    alpha: float = 1.0
    beta: float | None = None
    gamma: float | None = None
    u_min: float = V_MIN_DEFAULT ** 2
    u_max: float = V_MAX_DEFAULT ** 2
    allow_dg_islanding: bool = True
    feeder_loading_cap: float = 1.0
    load_quantum: float | None = None
    derate: float = 0.0          # fraction removed from thermal and DG limits
    dg_derate: float = 0.0       # further fraction removed from DG limits only
    voltage_margin: float = 0.0  # added to u_min (pu^2)
    pf_margin_pu: float = 0.003  # voltage floor margin for the lossless model
    thermal_margin: float = 0.03  # rating margin for the lossless model
    optimize_taps: bool = True
    optimize_caps: bool = True
    cycle_cap: int = DEFAULT_CYCLE_CAP
    solver: SolveOptions = field(default_factory=SolveOptions.from_env)

    def __post_init__(self):
        if not 0 < self.u_min < self.u_max:
            raise ValueError(f"need 0 < u_min < u_max, got {self.u_min}, {self.u_max}")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if not 0 < self.feeder_loading_cap:
            raise ValueError("feeder_loading_cap must be positive")
        if not 0 <= self.derate < 1:
            raise ValueError("derate must lie in [0, 1)")
        if not 0 <= self.dg_derate < 1:
            raise ValueError("dg_derate must lie in [0, 1)")
        if not 0 <= self.thermal_margin < 1:
            raise ValueError("thermal_margin must lie in [0, 1)")
        if self.pf_margin_pu < 0 or self.voltage_margin < 0 or self.u_min_effective >= self.u_max:
            raise ValueError("voltage margins must be non-negative and leave a non-empty band")

    def limits(self) -> F.Limits:
        return F.Limits(self.u_min_effective, self.u_max, head_cap=self.feeder_loading_cap,
                        rating_scale=self.rating_scale, dg_scale=1.0 - self.dg_derate)

    @property
    def u_min_effective(self) -> float:
        return (self.u_min ** 0.5 + self.pf_margin_pu) ** 2 + self.voltage_margin

    @property
    def rating_scale(self) -> float:
        return (1.0 - self.derate) * (1.0 - self.thermal_margin)

    def weights(self, model: NetworkModel) -> F.ObjectiveWeights:
        w = F.objective_weights(model, self.load_quantum, self.alpha)
        if self.beta is not None or self.gamma is not None:
            beta = w.beta if self.beta is None else self.beta
            gamma = w.gamma if self.gamma is None else self.gamma
            n_t = len(model.edges_of_kind(TIE))
            if gamma < 2 * n_t * beta:
                raise ValueError(f"gamma={gamma} must be at least 2*|ties|*beta={2 * n_t * beta}")
            w = replace(w, beta=beta, gamma=gamma)
        return w


@dataclass
class Stage1Model:
    milp: MILPModel
    closed: dict[str, Operand]
    v: dict[str, Operand]
    s: dict[str, Operand]
    block: F.Block
    weights: F.ObjectiveWeights
    n_cycles: int
    post_fault: TopologyState
    options: Stage1Options


@dataclass
class Stage1Solution:
    status: str
    objective: float
    delta: dict[str, int]
    v: dict[str, int]
    s: dict[str, int]
    taps: dict[str, Any]
    caps: dict[str, Any]
    P: dict[str, np.ndarray]
    Q: dict[str, np.ndarray]
    U: dict[str, np.ndarray]
    state: TopologyState
    post_fault: TopologyState
    switch_ops: dict[str, list[str]]
    served_kw: float
    restored_kw: float          # net gain: outage load picked up minus healthy load shed
    shed_kw: float
    outage_kw: float
    outage_served_kw: float
    healthy_shed_kw: float
    weighted_load: float
    per_feeder: dict[str, dict[str, float]]
    weights: F.ObjectiveWeights
    slack_u: dict[str, np.ndarray]
    verification: dict[str, Any]
    solve_info: dict[str, Any]

    @property
    def served_buses(self) -> set[str]:
        return {b for b, x in self.s.items() if x}

    @property
    def n_switch_ops(self) -> int:
        return len(self.switch_ops["open"]) + len(self.switch_ops["close"])


def edge_status(model: NetworkModel, scenario: FaultScenario, allow_dg: bool,
                make_var) -> dict[str, Operand]:
    """Status operand per edge: a decision for free operable switches, else a constant."""
    forced = scenario.forced_open
    out: dict[str, Operand] = {}
    for e in model.edges:
        if e.id in forced:
            out[e.id] = 0.0
        elif not e.operable:
            out[e.id] = 1.0
        elif e.kind == VIRTUAL and not allow_dg:
            out[e.id] = 0.0
        else:
            out[e.id] = make_var(e.id)
    return out


def build_stage1(model: NetworkModel, scenario: FaultScenario, options: Stage1Options | None = None,
                 limits: F.Limits | None = None) -> Stage1Model:
    """Assemble the Stage-1 MILP (maximisation)."""
    options = options or Stage1Options()
    if not model.sources:
        raise ValueError("network has no source bus")
    scenario.validate(model)
    limits = limits or options.limits()
    cycles = cached_cycles(model, options.cycle_cap)
    w = options.weights(model)
    m = MILPModel(name=f"stage1:{model.name}")

    closed = edge_status(model, scenario, options.allow_dg_islanding, lambda eid: m.add_binary(f"delta[{eid}]"))
    v: dict[str, Operand] = {}
    for b in model.buses:
        v[b.id] = 1.0 if b.is_source else m.add_binary(f"v[{b.id}]")
    s: dict[str, Operand] = {}
    p_dem, q_dem = {}, {}
    for b in model.buses:
        if not b.has_load:
            continue
        if b.load_switchable and not b.is_source:
            s[b.id] = m.add_binary(f"s[{b.id}]")
            m.add_constr(s[b.id], "<=", v[b.id], f"sv[{b.id}]")
        else:
            s[b.id] = v[b.id]
        sd = model.clpu_of(b.id).s_d
        p_dem[b.id], q_dem[b.id] = F.phase_demands(model, b.id, F.LinExpr.of(s[b.id]) * sd)

    F.add_energization(m, model, closed, v)
    n_cyc = F.add_radiality(m, cycles, closed)
    taps = None if options.optimize_taps else {r.edge: r.tap for r in model.regulators}
    caps = None if options.optimize_caps else {c.bus: 0 for c in model.capacitors}
    blk = F.add_network_block(m, model, tag="", closed=closed, v=v, p_dem=p_dem, q_dem=q_dem,
                              limits=limits, taps=taps, caps=caps)

    obj = F.LinExpr()
    for b, sv in s.items():
        bus = model.bus[b]
        obj.add_term(sv, w.alpha * bus.weight * bus.total_kw)
    for e in model.edges:
        st = closed[e.id]
        if e.kind == SECTIONALIZING:
            obj.add_term(1.0 - F.LinExpr.of(st), -w.beta)
        elif e.kind == TIE:
            obj.add_term(st, -w.beta)
        elif e.kind == VIRTUAL:
            obj.add_term(st, -w.gamma)
    m.set_objective(obj, "max")
    logger.info("stage1 %s: %d vars, %d rows, %d cycle rows", model.name, m.n_vars, m.n_rows, n_cyc)
    return Stage1Model(m, closed, v, s, blk, w, n_cyc, TopologyState.post_fault(model, scenario), options)


def effective_gap(model: NetworkModel, w: F.ObjectiveWeights, requested: float) -> float:
    """Relative gap small enough that the switching penalties are resolved."""
    total = sum(b.weight * b.total_kw for b in model.buses if b.has_load) * w.alpha
    if total <= 0:
        return requested
    return min(requested, 0.25 * min(w.beta, w.gamma if w.gamma > 0 else w.beta) / total)


def solve_stage1(model: NetworkModel, scenario: FaultScenario, options: Stage1Options | None = None,
                 verify: bool = True) -> Stage1Solution:
    """Build, solve, decode and verify Stage 1."""
    options = options or Stage1Options()
    built = build_stage1(model, scenario, options)
    sopts = replace(options.solver, gap=effective_gap(model, built.weights, options.solver.gap))
    res = solve(built.milp, sopts)
    if res.status == INFEASIBLE:
        cause = diagnose_infeasibility(model, scenario, options)
        raise Stage1Infeasible(cause, f"stage 1 infeasible ({cause}) for scenario {scenario.description!r}")
    if not res.has_solution:
        raise SolverError(f"stage 1 returned {res.status} without a solution: {res.message}")
    sol = decode_stage1(model, scenario, built, res)
    sol.solve_info.update(gap_requested=options.solver.gap, gap_used=sopts.gap)
    if verify:
        verify_stage1(model, scenario, sol, options)
    return sol


def decode_stage1(model: NetworkModel, scenario: FaultScenario, built: Stage1Model, res) -> Stage1Solution:
    base = model.s_phase_base

    def val(x):
        return F.const_value(x) if F.is_const(x) else res.value(x)

    delta = {e: int(round(val(built.closed[e]))) for e in model.operable_edges}
    state = TopologyState(frozenset(e for e, d in delta.items() if d), frozenset(scenario.forced_open))
    rep = is_radial_connected(model, state)
    energized = rep.energized_buses
    v = {b.id: int(b.id in energized) for b in model.buses}
    s = {}
    for b, sv in built.s.items():
        s[b] = int(round(val(sv))) if b in energized else 0
    taps = {}
    for r in model.regulators:
        sel = built.block.tap_vars.get(r.edge)
        taps[r.edge] = F.gang_value(sel, res, None) if sel else r.tap
    caps = {}
    for c in model.capacitors:
        cv = built.block.cap_vars.get(c.bus)
        if cv is None:
            caps[c.bus] = 0
        elif "g" in cv:
            caps[c.bus] = int(round(res.value(cv["g"])))
        else:
            caps[c.bus] = tuple(int(round(res.value(cv[p]))) if p in cv else 0 for p in "abc")
    P = {e.id: np.zeros(3) for e in model.edges}
    Q = {e.id: np.zeros(3) for e in model.edges}
    for eid, ph in built.block.P.items():
        for k, var in ph.items():
            P[eid][k] = res.value(var) * base
            Q[eid][k] = res.value(built.block.Q[eid][k]) * base
    U = {b.id: np.zeros(3) for b in model.buses}
    for b, ph in built.block.U.items():
        for k, var in ph.items():
            U[b][k] = res.value(var) if b in energized else 0.0
    slack_u = {}
    for e in model.edges:
        if e.kind == VIRTUAL and delta.get(e.id):
            slack_u[e.to_bus] = U[e.to_bus].copy()

    post = built.post_fault
    ops = {"open": sorted(e for e in model.operable_edges if post.is_closed(model, e) and not delta[e]),
           "close": sorted(e for e in model.operable_edges if not post.is_closed(model, e) and delta[e])}
    post_energized = is_radial_connected(model, post).energized_buses
    feeders = feeder_of(model)
    per_feeder: dict[str, dict[str, float]] = {}
    served = outage_served = outage = healthy_shed = total = wl = 0.0
    for b in model.buses:
        if not b.has_load:
            continue
        kw = b.total_kw
        f = per_feeder.setdefault(feeders.get(b.id, "?"),
                                  {"load_kw": 0.0, "outage_kw": 0.0, "outage_served_kw": 0.0,
                                   "healthy_shed_kw": 0.0, "restored_kw": 0.0, "served_kw": 0.0, "shed_kw": 0.0})
        f["load_kw"] += kw
        total += kw
        on = s.get(b.id, 0)
        if on:
            served += kw
            wl += b.weight * kw
            f["served_kw"] += kw
        else:
            f["shed_kw"] += kw
        if b.id not in post_energized:
            outage += kw
            f["outage_kw"] += kw
            if on:
                outage_served += kw
                f["outage_served_kw"] += kw
        elif not on:
            healthy_shed += kw
            f["healthy_shed_kw"] += kw
    for f in per_feeder.values():
        f["restored_kw"] = f["outage_served_kw"] - f["healthy_shed_kw"]
    sol = Stage1Solution(
        status=res.status, objective=float(res.objective), delta=delta, v=v, s=s, taps=taps, caps=caps,
        P=P, Q=Q, U=U, state=state, post_fault=post, switch_ops=ops, served_kw=served,
        restored_kw=outage_served - healthy_shed, shed_kw=total - served, outage_kw=outage,
        outage_served_kw=outage_served, healthy_shed_kw=healthy_shed, weighted_load=wl,
        per_feeder=per_feeder, weights=built.weights, slack_u=slack_u,
        verification={"radial_report": rep.violations},
        solve_info={"wall_time": res.wall_time, "gap": res.gap, "backend": res.backend,
                    "n_vars": built.milp.n_vars, "n_rows": built.milp.n_rows,
                    "n_binaries": int(sum(built.milp.integer)), "cycle_rows": built.n_cycles,
                    "model_hash": built.milp.canonical_hash()},
    )
    return sol


def solution_flow(model: NetworkModel, sol: Stage1Solution) -> FlowState:
    """The decoded MILP flows/voltages as a :class:`FlowState`."""
    return FlowState(sol.P, sol.Q, sol.U, dict(sol.slack_u), {b for b, x in sol.v.items() if x})


def verify_stage1(model: NetworkModel, scenario: FaultScenario, sol: Stage1Solution,
                  options: Stage1Options, tol: float = 1e-6) -> None:
    """Re-check the decoded solution independently; raises :class:`Stage1Error` on a hard failure."""
    rep = is_radial_connected(model, sol.state)
    ver = sol.verification
    ver["radial"] = rep.radial
    problems = []
    if not rep.radial:
        problems.append(f"not radial: {rep.violations}")
    closed_forced = [e for e in scenario.forced_open if sol.state.is_closed(model, e)]
    if closed_forced:
        problems.append(f"forced-open edges closed: {closed_forced}")
    loads = settled_loads(model, sol.served_buses)
    flow = linear_pf(model, sol.state, loads, sol.taps, sol.caps, sol.slack_u)
    scale = max(1.0, max((abs(x).max() for x in sol.P.values()), default=1.0))
    du = max((float(np.max(np.abs(flow.U[b] - sol.U[b]))) for b in flow.energized), default=0.0)
    dp = max(float(np.max(np.abs(flow.P[e] - sol.P[e]))) for e in sol.P) / scale
    dq = max(float(np.max(np.abs(flow.Q[e] - sol.Q[e]))) for e in sol.Q) / scale
    ver["reconstruction_error"] = {"U": du, "P_rel": dp, "Q_rel": dq}
    if max(du, dp, dq) > 1e-4:
        problems.append(f"decoded flows disagree with reconstruction (U {du:.2e}, P {dp:.2e}, Q {dq:.2e})")
    open_flow = [e for e in model.operable_edges if not sol.state.is_closed(model, e)
                 and (np.abs(sol.P[e]).max() > tol * scale or np.abs(sol.Q[e]).max() > tol * scale)]
    if open_flow:
        problems.append(f"flow on open switches {open_flow}")
    viol = check_limits(flow, model, options.u_min, options.u_max, tol=tol)
    ver["limit_violations"] = [str(x) for x in viol]
    hex_viol = check_limits(flow, model, options.u_min, options.u_max, tol=tol, thermal="hexagon")
    ver["linear_limit_violations"] = [str(x) for x in hex_viol]
    if viol:
        logger.warning("stage 1 solution exceeds exact limits: %s", "; ".join(ver["limit_violations"][:5]))
    ver["ok"] = not problems
    if problems:
        raise Stage1Error("stage 1 verification failed: " + "; ".join(problems))


def diagnose_infeasibility(model: NetworkModel, scenario: FaultScenario, options: Stage1Options) -> str:
    """Name the constraint family whose removal restores feasibility."""
    base = options.limits()
    trials = [
        ("voltage_limits", replace(base, voltage=False)),
        ("thermal_limits", replace(base, thermal=False)),
        ("dg_capacity", replace(base, dg_capacity=False)),
        ("operating_limits", replace(base, voltage=False, thermal=False, dg_capacity=False)),
    ]
    for cause, lim in trials:
        try:
            built = build_stage1(model, scenario, options, limits=lim)
        except ValueError:
            return "structure"
        if solve(built.milp, options.solver).status != INFEASIBLE:
            return cause
    return "no_source"


def dg_used(model: NetworkModel, sol: Stage1Solution) -> list[str]:
    return sorted(e for e in model.edges_of_kind(VIRTUAL) if sol.delta.get(e))
