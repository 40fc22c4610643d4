"""Stage 2: ordered switching sequence from the post-fault state to the Stage-1 target.

Time is split into macro steps, each holding ``substeps`` sub-steps.  A switch
may change only at the first sub-step of a macro step and at most one switch
changes per macro step; load pickups may happen at any sub-step.  Loads that
were out at the start follow the cold-load-pickup curve once picked up and
are never dropped again.  Loads that were served at the start carry their
settled demand and follow the energization of their bus.

Each sub-step carries a full copy of the linearised network model with the
regulator taps and capacitor statuses frozen at their Stage-1 values.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Any, Sequence

import numpy as np

from . import formulation as F
from .clpu import ClpuCurve, clpu_coefficients, demand_factors, sample_curve
from .milpcore import INFEASIBLE, LinExpr, MILPModel, Operand, SolveOptions, SolverError, solve
from .netmodel import VIRTUAL, FaultScenario, NetworkModel
from .powerflow import check_limits, linear_pf, sweep_pf, PowerFlowError
from .stage1 import Stage1Solution
from .topology import ROOT, TopologyState, cached_cycles, is_radial_connected

logger = logging.getLogger(__name__)

DEFAULT_SUBSTEPS = 5


class Stage2Infeasible(RuntimeError):
    def __init__(self, cause: str, message: str):
        super().__init__(message)
        self.cause = cause


class Stage2Error(RuntimeError):
    pass


@dataclass
class Stage2Options:
    """``settle_steps`` extra macro steps are appended after the actions; on
    infeasibility the horizon grows one macro step at a time up to ``max_settle_steps``."""

    substeps: int = DEFAULT_SUBSTEPS
    settle_steps: int = 0
    max_settle_steps: int = 4
    u_min: float = 0.9372 ** 2
    u_max: float = 1.05 ** 2
    feeder_loading_cap: float = 1.0
    pf_margin_pu: float = 0.003
    thermal_margin: float = 0.03
    tie_break: bool = True
    solver: SolveOptions = field(default_factory=lambda: SolveOptions.from_env(gap=1e-9))

    def __post_init__(self):
        if self.substeps < 1:
            raise ValueError("substeps must be >= 1")
        if self.settle_steps < 0 or self.max_settle_steps < self.settle_steps:
            raise ValueError("need 0 <= settle_steps <= max_settle_steps")
        if not 0 < self.u_min < self.u_max:
            raise ValueError("need 0 < u_min < u_max")

    @classmethod
    def from_stage1(cls, s1opts, **kw) -> "Stage2Options":
        kw.setdefault("pf_margin_pu", s1opts.pf_margin_pu)
        kw.setdefault("thermal_margin", s1opts.thermal_margin)
        return cls(u_min=s1opts.u_min, u_max=s1opts.u_max, feeder_loading_cap=s1opts.feeder_loading_cap, **kw)

    def limits(self) -> F.Limits:
        return F.Limits((self.u_min ** 0.5 + self.pf_margin_pu) ** 2, self.u_max, head_cap=self.feeder_loading_cap,
                        rating_scale=1.0 - self.thermal_margin)


@dataclass
class SequenceStep:
    t: int
    macro: int
    action: str | None          # "open" | "close" | None
    edge: str | None
    pickups: list[str]
    drops: list[str]
    closed: frozenset[str]
    served: frozenset[str]
    energized: frozenset[str]
    served_kw: float
    weighted_kw: float
    demand_kw: dict[str, float]
    min_voltage_pu: float
    U: dict[str, np.ndarray] = field(default_factory=dict, repr=False)


@dataclass
class SwitchingSequence:
    steps: list[SequenceStep]
    actions: list[tuple[int, str, str]]     # (macro step, "open"/"close", edge)
    substeps: int
    n_macro: int
    settle_steps: int
    initial_closed: frozenset[str]
    initial_served: frozenset[str]
    target_closed: frozenset[str]
    target_served: frozenset[str]
    objective: float                        # weighted served energy (kW x sub-steps)
    status: str = "optimal"
    fixed_order: bool = False
    verification: dict[str, Any] = field(default_factory=dict)
    solve_info: dict[str, Any] = field(default_factory=dict)

    @property
    def served_kw_trace(self) -> list[float]:
        return [s.served_kw for s in self.steps]

    @property
    def n_actions(self) -> int:
        return len(self.actions)


@dataclass
class Stage2Model:
    milp: MILPModel
    acting: list[str]
    delta: dict[tuple[str, int], Operand]
    v_comp: dict[tuple[str, int], Operand]
    comp_of: dict[str, str]
    s: dict[tuple[str, int], Operand]
    factor: dict[tuple[str, int], LinExpr]
    blocks: list[F.Block]
    served_expr: LinExpr
    n_macro: int
    settle: int
    kind: dict[str, str]     # load bus -> "healthy" | "healthy_shed" | "outaged" | "never"


# ---------------------------------------------------------------------------
# helpers shared by build, decode and replay

def curves_for(model: NetworkModel) -> dict[str, ClpuCurve]:
    return {b.id: sample_curve(model.clpu_of(b.id)) for b in model.buses if b.has_load}


def load_demand_trace(model: NetworkModel, bus_id: str, served0: bool, history: Sequence[int],
                      curve: ClpuCurve | None = None) -> np.ndarray:
    """Demand multiplier per sub-step for one load.

    Loads served at the start use the settled factor; the others follow the
    cold-load-pickup curve from their pickup step.
    """
    prof = model.clpu_of(bus_id)
    h = np.asarray(history, dtype=int)
    if served0:
        return prof.s_d * h.astype(float)
    curve = curve or sample_curve(prof)
    if np.any(np.diff(h) < 0):
        # non-monotone history: evaluate each service interval as a fresh pickup
        out = np.zeros(len(h))
        t = 0
        while t < len(h):
            if h[t]:
                end = t
                while end < len(h) and h[end]:
                    end += 1
                seg = np.ones(end - t, dtype=int)
                out[t:end] = demand_factors(curve, prof.s_u, seg)
                t = end
            else:
                t += 1
        return out
    return demand_factors(curve, prof.s_u, h)


def _union_find(items):
    parent = {x: x for x in items}

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    def union(a, b):
        ra, rb = find(a), find(b)
        if ra != rb:
            if str(ra) > str(rb):
                ra, rb = rb, ra
            parent[rb] = ra
    return find, union


def naive_order(stage1: Stage1Solution) -> list[str]:
    """All opening actions first, then all closings, each group by edge id."""
    return sorted(stage1.switch_ops["open"]) + sorted(stage1.switch_ops["close"])


def build_stage2(model: NetworkModel, scenario: FaultScenario, stage1: Stage1Solution,
                 options: Stage2Options | None = None, fixed_order: Sequence[str] | None = None,
                 settle: int | None = None, limits: F.Limits | None = None) -> Stage2Model:
    """Time-expanded MILP over ``(n_actions + settle)`` macro steps.

    With ``fixed_order`` the switching schedule is pinned (action ``j`` at
    macro step ``j+1``) and only load pickups are optimised.
    """
    options = options or Stage2Options()
    limits = limits or options.limits()
    settle = options.settle_steps if settle is None else settle
    K = options.substeps
    post = stage1.post_fault
    target = stage1.state
    forced = scenario.forced_open
    if any(target.is_closed(model, e) for e in forced):
        raise ValueError("stage-1 target closes a forced-open edge")
    acting = sorted(stage1.switch_ops["open"] + stage1.switch_ops["close"])
    for e in acting:
        if e in forced or not model.edge[e].operable:
            raise ValueError(f"stage-1 target acts on edge {e} which cannot be operated")
    n = len(acting)
    post_energized = is_radial_connected(model, post).energized_buses
    target_served = stage1.served_buses
    initial_served = {b.id for b in model.buses if b.has_load and b.id in post_energized}
    needs_change = bool(n) or (initial_served != target_served)
    M = (n + settle) if needs_change else 0
    if needs_change and M == 0:
        M = 1
    T = M * K
    m = MILPModel(name=f"stage2:{model.name}")
    if fixed_order is not None:
        if sorted(fixed_order) != acting:
            raise ValueError("fixed order must list exactly the stage-1 actions")
        when = {e: j + 1 for j, e in enumerate(fixed_order)}
    else:
        when = None

    # switch trajectories
    closing = set(stage1.switch_ops["close"])
    delta: dict[tuple[str, int], Operand] = {}
    for e in model.edges:
        if e.id in acting:
            delta[(e.id, 0)] = float(post.is_closed(model, e.id))
            for mm in range(1, M + 1):
                if when is not None:
                    done = mm >= when[e.id]
                    delta[(e.id, mm)] = float(done if e.id in closing else not done)
                else:
                    delta[(e.id, mm)] = m.add_binary(f"delta[{e.id}]@{mm}")
            if when is None:
                for mm in range(1, M + 1):
                    cur, prev = delta[(e.id, mm)], delta[(e.id, mm - 1)]
                    if e.id in closing:
                        m.add_constr(cur, ">=", prev, f"mono[{e.id}]@{mm}")
                    else:
                        m.add_constr(cur, "<=", prev, f"mono[{e.id}]@{mm}")
                m.add_constr(delta[(e.id, M)], "==", float(e.id in closing), f"final[{e.id}]")
    if when is None:
        for mm in range(1, M + 1):
            moves = LinExpr()
            for e in acting:
                d = LinExpr.of(delta[(e, mm)]) - delta[(e, mm - 1)]
                moves.add_term(d, 1.0 if e in closing else -1.0)
            if moves.terms:
                m.add_constr(moves, "<=", 1.0, f"one_action@{mm}")

    def closed_at(mm: int) -> dict[str, Operand]:
        out = {}
        for e in model.edges:
            if e.id in acting:
                out[e.id] = delta[(e.id, mm)]
            else:
                out[e.id] = float(post.is_closed(model, e.id))
        return out

    # energization per component of always-closed edges
    nodes = [b.id for b in model.buses] + [ROOT]
    find, union = _union_find(nodes)
    for s in model.sources:
        union(ROOT, s)
    for e in model.edges:
        if e.id not in acting and post.is_closed(model, e.id) and e.kind != VIRTUAL:
            union(e.from_bus, e.to_bus)
    comp_of = {b.id: find(b.id) for b in model.buses}
    root = find(ROOT)
    touched = set()
    for e in acting:
        touched.add(comp_of[model.edge[e].from_bus])
        touched.add(comp_of[model.edge[e].to_bus])
    target_energized = {b for b, x in stage1.v.items() if x}
    comp_target = {}
    for b, c in comp_of.items():
        comp_target[c] = comp_target.get(c, False) or (b in target_energized)
    v_comp: dict[tuple[str, int], Operand] = {}
    for c in sorted(set(comp_of.values())):
        init = float(any(comp_of[b] == c and b in post_energized for b in comp_of))
        for mm in range(0, M + 1):
            if c == root:
                v_comp[(c, mm)] = 1.0
            elif c in touched and mm > 0:
                v_comp[(c, mm)] = m.add_binary(f"v[{c}]@{mm}")
            else:
                v_comp[(c, mm)] = init
        if c != root and c in touched and M > 0:
            m.add_constr(v_comp[(c, M)], "==", float(comp_target[c]), f"vfinal[{c}]")
    cycles = cached_cycles(model)
    for mm in range(1, M + 1):
        cl = closed_at(mm)
        for e in acting:
            ed = model.edge[e]
            ci, cj = comp_of[ed.from_bus], comp_of[ed.to_bus]
            st = cl[e]
            vi, vj = v_comp[(ci, mm)], v_comp[(cj, mm)]
            if ed.kind == VIRTUAL:
                if not F.is_const(vj):
                    m.add_constr(vj, ">=", st, f"vdg[{e}]@{mm}")
                continue
            if F.is_const(vi) and F.is_const(vj):
                if F.is_const(st) and F.const_value(st) == 1 and F.const_value(vi) != F.const_value(vj):
                    raise F.StructuralInfeasible(f"edge {e} closed between energized and dead fixed components")
                if not F.is_const(st) and F.const_value(vi) != F.const_value(vj):
                    m.add_constr(st, "<=", 0.0, f"vsw[{e}]@{mm}")
                continue
            m.add_constr(LinExpr.of(vi) - vj, "<=", 1.0 - LinExpr.of(st), f"vsw+[{e}]@{mm}")
            m.add_constr(LinExpr.of(vj) - vi, "<=", 1.0 - LinExpr.of(st), f"vsw-[{e}]@{mm}")
        F.add_radiality(m, cycles, cl, tag=f"@{mm}")

    macro_of = lambda t: (t - 1) // K + 1  # noqa: E731

    # loads
    s: dict[tuple[str, int], Operand] = {}
    factor: dict[tuple[str, int], LinExpr] = {}
    kind: dict[str, str] = {}
    curves = curves_for(model)
    mono_comps = set()
    for b in model.buses:
        if not b.has_load:
            continue
        c = comp_of[b.id]
        prof = model.clpu_of(b.id)
        tb = b.id in target_served
        switchable = b.load_switchable and not b.is_source
        if b.id in initial_served:
            if switchable and not tb:
                kind[b.id] = "healthy_shed"
                prev: Operand = 1.0
                for t in range(1, T + 1):
                    x = m.add_binary(f"s[{b.id}]@{t}")
                    m.add_constr(x, "<=", v_comp[(c, macro_of(t))], f"sv[{b.id}]@{t}")
                    m.add_constr(x, "<=", prev, f"smono[{b.id}]@{t}")
                    s[(b.id, t)] = x
                    prev = x
                if T:
                    m.add_constr(s[(b.id, T)], "==", 0.0, f"sfinal[{b.id}]")
            else:
                kind[b.id] = "healthy"
                for t in range(1, T + 1):
                    s[(b.id, t)] = v_comp[(c, macro_of(t))]
            for t in range(1, T + 1):
                factor[(b.id, t)] = LinExpr.of(s[(b.id, t)]) * prof.s_d
            continue
        if not tb:
            kind[b.id] = "never"
            for t in range(1, T + 1):
                s[(b.id, t)] = 0.0
                factor[(b.id, t)] = LinExpr()
            if not switchable and c not in mono_comps:
                for mm in range(1, M + 1):
                    if not F.is_const(v_comp[(c, mm)]):
                        m.add_constr(v_comp[(c, mm)], "==", 0.0, f"vdead[{b.id}]@{mm}")
                mono_comps.add(c)
            continue
        kind[b.id] = "outaged"
        if switchable:
            prev = 0.0
            for t in range(1, T + 1):
                x = m.add_binary(f"s[{b.id}]@{t}")
                m.add_constr(x, "<=", v_comp[(c, macro_of(t))], f"sv[{b.id}]@{t}")
                m.add_constr(x, ">=", prev, f"smono[{b.id}]@{t}")
                s[(b.id, t)] = x
                prev = x
            m.add_constr(s[(b.id, T)], "==", 1.0, f"sfinal[{b.id}]")
        else:
            for t in range(1, T + 1):
                s[(b.id, t)] = v_comp[(c, macro_of(t))]
            if c not in mono_comps:
                for mm in range(1, M + 1):
                    if not F.is_const(v_comp[(c, mm)]):
                        m.add_constr(v_comp[(c, mm)], ">=", v_comp[(c, mm - 1)], f"vmono[{c}]@{mm}")
                mono_comps.add(c)
        for t in range(1, T + 1):
            f = LinExpr()
            for tau, coef in clpu_coefficients(curves[b.id], prof.s_u, t):
                f.add_term(s[(b.id, tau)], coef)
            factor[(b.id, t)] = f

    # network copies
    base = model.s_phase_base
    bounds = F.flow_bounds(model, limits, peak=True)
    blocks = []
    for t in range(1, T + 1):
        mm = macro_of(t)
        cl = closed_at(mm)
        v = {b.id: v_comp[(comp_of[b.id], mm)] for b in model.buses}
        p_dem, q_dem = {}, {}
        for b in model.buses:
            if not b.has_load:
                continue
            fx = factor[(b.id, t)]
            p_dem[b.id] = {k: fx * (b.load_p[k] / base) for k in F.phase_idx(b.phases)}
            q_dem[b.id] = {k: fx * (b.load_q[k] / base) for k in F.phase_idx(b.phases)}
        blocks.append(F.add_network_block(m, model, tag=f"@{t}", closed=cl, v=v, p_dem=p_dem, q_dem=q_dem,
                                          limits=limits, taps=stage1.taps, caps=stage1.caps, bounds=bounds))

    served_expr = LinExpr()
    for (b, t), fx in factor.items():
        bus = model.bus[b]
        served_expr.add_term(fx, bus.weight * bus.total_kw)
    obj = served_expr.copy()
    if options.tie_break and when is None and acting:
        loads = [b.weight * b.total_kw for b in model.buses if b.has_load and b.weight * b.total_kw > 0]
        tau = 1e-7 * (min(loads) if loads else 1.0) / max(1, n * M)
        for j, e in enumerate(acting):
            wgt = tau * (1.0 + (n - j) / (n + 1))
            for mm in range(1, M + 1):
                d = delta[(e, mm)]
                obj.add_term(d if e in closing else 1.0 - LinExpr.of(d), wgt)
    m.set_objective(obj, "max")
    logger.info("stage2 %s: %d macro x %d sub-steps, %d vars (%d int), %d rows", model.name, M, K,
                m.n_vars, sum(m.integer), m.n_rows)
    return Stage2Model(m, acting, delta, v_comp, comp_of, s, factor, blocks, served_expr, M, settle, kind)


def solve_stage2(model: NetworkModel, scenario: FaultScenario, stage1: Stage1Solution,
                 options: Stage2Options | None = None, fixed_order: Sequence[str] | None = None,
                 settle: int | None = None, verify: bool = True) -> SwitchingSequence:
    """Solve Stage 2, growing the settle horizon on infeasibility."""
    options = options or Stage2Options()
    first = options.settle_steps if settle is None else settle
    last = options.max_settle_steps if settle is None else settle
    # feasibility is monotone in the settle horizon: optimize the shortest, probe the longest
    # for feasibility only, then optimize upward until the first feasible horizon
    tried = []
    found = None

    def attempt(st: int, probe: bool = False):
        try:
            built = build_stage2(model, scenario, stage1, options, fixed_order=fixed_order, settle=st)
        except F.StructuralInfeasible as exc:
            # the fixed order itself closes a loop or energizes across a dead section
            raise Stage2Infeasible("sequencing", f"stage 2 infeasible (sequencing): {exc}") from exc
        solver = options.solver
        if probe:
            built.milp.set_objective(LinExpr())
            solver = replace(solver, time_limit=min(solver.time_limit or PROBE_TIME_LIMIT, PROBE_TIME_LIMIT))
        res = solve(built.milp, solver) if built.milp.n_vars else None
        status = res.status if res is not None else "optimal"
        tried.append((st, status if not probe else f"probe {status}"))
        if res is not None and res.status == INFEASIBLE:
            logger.info("stage 2 infeasible with %d settle steps", st)
            return None
        if res is not None and not res.has_solution:
            if probe:
                # an unproven probe is treated as infeasible; the caller can re-plan Stage 1
                logger.info("stage 2 feasibility probe with %d settle steps hit its time limit", st)
                return None
            raise SolverError(f"stage 2 returned {res.status} without a solution: {res.message}")
        return st, built, res

    found = attempt(first)
    if found is None and last > first and attempt(last, probe=True) is not None:
        for st in range(first + 1, last + 1):
            found = attempt(st)
            if found is not None:
                break
    if found is None:
        cause = _diagnose(model, scenario, stage1, options, fixed_order, (first, last))
        raise Stage2Infeasible(cause, f"stage 2 infeasible ({cause}) with up to {last} settle steps")
    _, built, res = found
    seq = decode_stage2(model, scenario, stage1, built, res, options)
    seq.fixed_order = fixed_order is not None
    seq.solve_info.update(settle_tried=tried)
    if verify:
        verify_sequence(model, scenario, stage1, seq, options)
    return seq


DIAGNOSE_TIME_LIMIT = 10.0
PROBE_TIME_LIMIT = 30.0


def _diagnose(model, scenario, stage1, options, fixed_order, horizons) -> str:
    """Name the limit family whose removal alone makes the problem feasible.

    The shortest horizon is tried first: it is cheap, and a relaxation that
    fixes it also fixes every longer horizon.
    """
    base = options.limits()
    solver = replace(options.solver, time_limit=min(options.solver.time_limit or DIAGNOSE_TIME_LIMIT,
                                                    DIAGNOSE_TIME_LIMIT))
    relaxations = (("voltage_limits", replace(base, voltage=False)),
                   ("thermal_limits", replace(base, thermal=False)),
                   ("dg_capacity", replace(base, dg_capacity=False)),
                   ("operating_limits", replace(base, voltage=False, thermal=False, dg_capacity=False)))
    for settle in sorted(set(horizons)):
        for cause, lim in relaxations:
            built = build_stage2(model, scenario, stage1, options, fixed_order, settle, limits=lim)
            built.milp.set_objective(LinExpr())  # feasibility only
            if solve(built.milp, solver).has_solution:
                return cause
    return "sequencing"


def decode_stage2(model: NetworkModel, scenario: FaultScenario, stage1: Stage1Solution, built: Stage2Model,
                  res, options: Stage2Options) -> SwitchingSequence:
    K = options.substeps
    M = built.n_macro
    T = M * K
    post = stage1.post_fault

    def val(x) -> float:
        return F.const_value(x) if F.is_const(x) else res.value(x)

    closed_m = {0: set(post.closed)}
    actions = []
    for mm in range(1, M + 1):
        cl = set(closed_m[mm - 1])
        for e in built.acting:
            now = round(val(built.delta[(e, mm)]))
            before = round(val(built.delta[(e, mm - 1)]))
            if now != before:
                actions.append((mm, "close" if now else "open", e))
                if now:
                    cl.add(e)
                else:
                    cl.discard(e)
        closed_m[mm] = cl
    post_energized = is_radial_connected(model, post).energized_buses
    served_prev = {b.id for b in model.buses if b.has_load and b.id in post_energized}
    steps = []
    for t in range(1, T + 1):
        mm = (t - 1) // K + 1
        state = TopologyState(frozenset(closed_m[mm]), frozenset(scenario.forced_open))
        energized = is_radial_connected(model, state).energized_buses
        served = set()
        demand = {}
        for b in model.buses:
            if not b.has_load:
                continue
            on = round(val(built.s[(b.id, t)])) if (b.id, t) in built.s else 0
            if on and b.id in energized:
                served.add(b.id)
            demand[b.id] = built.factor[(b.id, t)].value(res.x) * model.bus[b.id].total_kw if res is not None else 0.0
        act = [a for a in actions if a[0] == mm] if (t - 1) % K == 0 else []
        blk = built.blocks[t - 1]
        U = {}
        for bid, ph in blk.U.items():
            if bid in energized:
                U[bid] = np.array([res.value(ph[k]) if k in ph else 0.0 for k in range(3)])
        vmin = min((float(np.sqrt(max(U[b][k], 0.0))) for b in U for k in blk.U[b]
                    if not model.bus[b].is_source), default=float("nan"))
        steps.append(SequenceStep(
            t=t, macro=mm, action=act[0][1] if act else None, edge=act[0][2] if act else None,
            pickups=sorted(served - served_prev), drops=sorted(served_prev - served),
            closed=frozenset(closed_m[mm]), served=frozenset(served), energized=frozenset(energized),
            served_kw=float(sum(demand[b] for b in served)),
            weighted_kw=float(sum(demand[b] * model.bus[b].weight for b in served)),
            demand_kw={b: demand[b] for b in sorted(served)}, min_voltage_pu=vmin, U=U))
        served_prev = served
    objective = float(built.served_expr.value(res.x)) if res is not None else 0.0
    info = {}
    if res is not None:
        info = {"wall_time": res.wall_time, "gap": res.gap, "backend": res.backend, "status": res.status,
                "n_vars": built.milp.n_vars, "n_rows": built.milp.n_rows,
                "n_binaries": int(sum(built.milp.integer)), "model_hash": built.milp.canonical_hash(),
                "milp_objective": res.objective}
    return SwitchingSequence(
        steps=steps, actions=actions, substeps=K, n_macro=M, settle_steps=built.settle,
        initial_closed=frozenset(post.closed),
        initial_served=frozenset(b.id for b in model.buses if b.has_load and b.id in post_energized),
        target_closed=frozenset(stage1.state.closed), target_served=frozenset(stage1.served_buses),
        objective=objective, status=res.status if res is not None else "optimal", solve_info=info)


def service_histories(model: NetworkModel, seq: SwitchingSequence) -> dict[str, np.ndarray]:
    return {b.id: np.array([int(b.id in st.served) for st in seq.steps], dtype=int)
            for b in model.buses if b.has_load}


def step_loads(model: NetworkModel, seq: SwitchingSequence, curves=None) -> list[dict[str, tuple]]:
    """Per-step (P, Q) demand in kW/kVAr recomputed from the service histories."""
    curves = curves or curves_for(model)
    hist = service_histories(model, seq)
    per_bus = {}
    for b, h in hist.items():
        per_bus[b] = load_demand_trace(model, b, b in seq.initial_served, h, curves[b])
    out = []
    for i in range(len(seq.steps)):
        d = {}
        for b, f in per_bus.items():
            if f[i] != 0:
                bus = model.bus[b]
                d[b] = (np.array(bus.load_p) * f[i], np.array(bus.load_q) * f[i])
        out.append(d)
    return out


def sequence_checks(model: NetworkModel, scenario: FaultScenario, seq: SwitchingSequence) -> list[str]:
    """Structural contract: one action per macro step, monotone pickup, single toggles, terminal state."""
    problems = []
    K = seq.substeps
    per_macro: dict[int, int] = {}
    toggles: dict[str, int] = {}
    prev = set(seq.initial_closed)
    for st in seq.steps:
        changed = set(st.closed) ^ prev
        if changed and (st.t - 1) % K != 0:
            problems.append(f"step {st.t}: switch change inside a macro step")
        per_macro[st.macro] = per_macro.get(st.macro, 0) + len(changed)
        for e in changed:
            toggles[e] = toggles.get(e, 0) + 1
        prev = set(st.closed)
    for mm, c in per_macro.items():
        if c > 1:
            problems.append(f"macro step {mm}: {c} switch actions")
    for e, c in toggles.items():
        if c != 1:
            problems.append(f"switch {e} toggled {c} times")
    hist = service_histories(model, seq)
    for b, h in hist.items():
        if b not in seq.initial_served and np.any(np.diff(h) < 0):
            problems.append(f"load {b} dropped after pickup")
    if seq.steps:
        last = seq.steps[-1]
        if set(last.closed) != set(seq.target_closed):
            problems.append("final switch state differs from the target")
        if set(last.served) != set(seq.target_served):
            problems.append("final served set differs from the target")
    elif set(seq.initial_closed) != set(seq.target_closed):
        problems.append("empty sequence but target differs from initial state")
    return problems


def verify_sequence(model: NetworkModel, scenario: FaultScenario, stage1: Stage1Solution,
                    seq: SwitchingSequence, options: Stage2Options, tol: float = 1e-6) -> None:
    """Independent re-check of a decoded sequence with the linear model."""
    problems = sequence_checks(model, scenario, seq)
    loads = step_loads(model, seq)
    recon = 0.0
    clpu_err = 0.0
    viol = []
    for st, ld in zip(seq.steps, loads):
        state = TopologyState(st.closed, frozenset(scenario.forced_open))
        rep = is_radial_connected(model, state)
        if not rep.radial:
            problems.append(f"step {st.t}: {rep.violations}")
            continue
        kw = sum(float(np.sum(p)) for p, _ in ld.values())
        clpu_err = max(clpu_err, abs(kw - st.served_kw) / max(1.0, kw))
        slack = {}
        for e in model.edges:
            if e.kind == VIRTUAL and e.id in st.closed and e.to_bus in st.U:
                slack[e.to_bus] = st.U[e.to_bus]
        flow = linear_pf(model, state, ld, stage1.taps, stage1.caps, slack)
        for b in flow.energized:
            if b in st.U:
                recon = max(recon, float(np.max(np.abs(flow.U[b] - st.U[b]))))
        for v in check_limits(flow, model, options.u_min, options.u_max, tol=tol):
            viol.append(f"step {st.t}: {v}")
    seq.verification = {"contract": problems, "reconstruction_error_U": recon,
                        "clpu_consistency_error": clpu_err, "limit_violations": viol}
    if recon > 1e-4:
        problems.append(f"voltage reconstruction error {recon:.2e}")
    if clpu_err > 1e-6:
        problems.append(f"served kW disagrees with the cold-load-pickup model ({clpu_err:.2e})")
    seq.verification["ok"] = not problems
    if viol:
        logger.warning("sequence exceeds exact limits at %d points", len(viol))
    if problems:
        raise Stage2Error("stage 2 verification failed: " + "; ".join(problems[:5]))


@dataclass
class ReplayReport:
    ok: bool
    min_voltage: list[float]
    violations: list[str]
    interruptions: list[str]
    steps: list[dict]
    voltages: list[dict[str, np.ndarray]] = field(default_factory=list, repr=False)  # per step, pu

    def to_dict(self) -> dict:
        return {"ok": self.ok, "min_voltage_pu": self.min_voltage, "violations": self.violations,
                "interruptions": self.interruptions, "steps": self.steps}


def replay_sequence(model: NetworkModel, scenario: FaultScenario, seq: SwitchingSequence,
                    u_min: float = 0.9372 ** 2, u_max: float = 1.05 ** 2, taps=None, caps=None,
                    tol: float = 1e-6) -> ReplayReport:
    """Re-simulate every step with the nonlinear sweep and report limit breaches.

    Never raises for a bad sequence; every problem becomes a violation line.
    """
    violations = list(sequence_checks(model, scenario, seq))
    interruptions = []
    mins = []
    rows = []
    volts = []
    try:
        loads = step_loads(model, seq)
    except ValueError as exc:
        return ReplayReport(False, [], violations + [f"bad service history: {exc}"], [], [])
    prev_served = set(seq.initial_served)
    for st, ld in zip(seq.steps, loads):
        state = TopologyState(st.closed, frozenset(scenario.forced_open))
        rep = is_radial_connected(model, state)
        row = {"t": st.t, "action": st.action, "edge": st.edge, "served_kw": 0.0, "min_voltage_pu": None}
        if not rep.radial:
            violations.append(f"step {st.t}: not radial ({'; '.join(rep.violations)})")
            mins.append(float("nan"))
            rows.append(row)
            volts.append({})
            continue
        dead = [b for b in st.served if b not in rep.energized_buses]
        if dead:
            violations.append(f"step {st.t}: loads served on de-energized buses {sorted(dead)}")
            ld = {b: x for b, x in ld.items() if b in rep.energized_buses}
        lost = sorted(b for b in prev_served & set(seq.initial_served) if b not in st.served)
        if lost:
            interruptions.append(f"step {st.t}: {lost}")
        prev_served = set(st.served)
        slack = {e.to_bus: st.U[e.to_bus] for e in model.edges
                 if e.kind == VIRTUAL and e.id in st.closed and e.to_bus in st.U}
        try:
            flow = sweep_pf(model, state, ld, taps, caps, slack)
        except PowerFlowError as exc:
            violations.append(f"step {st.t}: power flow failed ({exc})")
            mins.append(float("nan"))
            rows.append(row)
            volts.append({})
            continue
        vmin = flow.min_voltage(model)
        mins.append(vmin)
        volts.append({b: flow.V[b] for b in sorted(flow.energized)})
        row["min_voltage_pu"] = vmin
        row["served_kw"] = float(sum(np.sum(p) for p, _ in ld.values()))
        for v in check_limits(flow, model, u_min, u_max, tol=tol):
            violations.append(f"step {st.t}: {v}")
        rows.append(row)
    return ReplayReport(not violations, mins, violations, interruptions, rows, volts)


def customer_minutes_interrupted(model: NetworkModel, seq: SwitchingSequence, period: float | None = None) -> float:
    """Sum over sub-steps of unserved customers times the sub-step length (minutes).

    Counts every load in the target served set.
    """
    if period is None:
        profs = [model.clpu_of(b.id).sample_period for b in model.buses if b.has_load]
        period = profs[0] if profs else 1.0
    total = 0.0
    for st in seq.steps:
        for b in seq.target_served:
            if b not in st.served:
                total += model.bus[b].customers * period
    return total


def interrupted_healthy(seq: SwitchingSequence) -> set[str]:
    """Loads served at the start that lose service at some step."""
    out = set()
    for st in seq.steps:
        out |= set(seq.initial_served) - set(st.served)
    return out
