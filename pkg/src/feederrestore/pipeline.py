"""Stage 1 followed by Stage 2, with headroom retries.

Stage 1 plans the settled end state, so a target that uses a feeder or DG to
its limit leaves no room for the cold-load-pickup peak in Stage 2.  When
Stage 2 is infeasible, Stage 1 is re-solved with derated thermal/DG limits
(and/or a raised voltage floor, when voltage limits are involved) until a
sequence exists or the schedule runs out.

A DG island is energised all at once when its virtual edge closes, so its
loads start at the undiversified factor.  When DG capacity is the binding
family, DG limits are therefore cut straight to ``1 / s_u`` of rating.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

from .netmodel import FaultScenario, NetworkModel
from .stage1 import Stage1Options, Stage1Solution, solve_stage1
from .stage2 import Stage2Infeasible, Stage2Options, SwitchingSequence, solve_stage2

logger = logging.getLogger(__name__)

DERATE_SCHEDULE = (0.0, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5)
VOLTAGE_STEP = 0.01  # pu^2


@dataclass
class RestorationPlan:
    stage1: Stage1Solution
    sequence: SwitchingSequence | None
    first_stage1: Stage1Solution
    derate: float = 0.0
    voltage_margin: float = 0.0
    dg_derate: float = 0.0
    attempts: list[dict] = field(default_factory=list)


def plan_restoration(model: NetworkModel, scenario: FaultScenario, s1opts: Stage1Options | None = None,
                     s2opts: Stage2Options | None = None, adapt: bool = True,
                     stage1_only: bool = False) -> RestorationPlan:
    """Solve both stages; raises ``Stage2Infeasible`` when every retry fails."""
    s1opts = s1opts or Stage1Options()
    s2opts = s2opts or Stage2Options.from_stage1(s1opts)
    first = solve_stage1(model, scenario, s1opts)
    if stage1_only:
        return RestorationPlan(first, None, first)
    attempts = []
    derate_idx = 0
    margin = s1opts.voltage_margin
    dg_derate = s1opts.dg_derate
    s1 = first
    failed: set = set()
    last_exc = None
    while True:
        key = _plan_key(s1)
        record = {"derate": DERATE_SCHEDULE[derate_idx], "voltage_margin": margin, "dg_derate": dg_derate}
        if key in failed:
            attempts.append({**record, "stage2": "skipped (same target as a failed attempt)"})
        else:
            try:
                seq = solve_stage2(model, scenario, s1, s2opts)
                attempts.append({**record, "stage2": "ok"})
                return RestorationPlan(s1, seq, first, DERATE_SCHEDULE[derate_idx], margin, dg_derate, attempts)
            except Stage2Infeasible as exc:
                last_exc = exc
                failed.add(key)
                attempts.append({**record, "stage2": f"infeasible ({exc.cause})"})
                logger.info("stage 2 infeasible (%s) at derate %.2f, margin %.3f, DG derate %.2f", exc.cause,
                            DERATE_SCHEDULE[derate_idx], margin, dg_derate)
                if not adapt:
                    raise
        cause = last_exc.cause if last_exc else "sequencing"
        can_raise = s1opts.u_min_effective + margin + VOLTAGE_STEP - s1opts.voltage_margin < s1opts.u_max
        can_derate = derate_idx + 1 < len(DERATE_SCHEDULE)
        peak = peak_dg_derate(model)
        if cause == "dg_capacity" and dg_derate < peak:
            dg_derate = peak
        elif cause in ("voltage_limits", "operating_limits") and can_raise:
            margin += VOLTAGE_STEP
            if cause == "operating_limits" and can_derate:
                derate_idx += 1
        elif can_derate:
            derate_idx += 1
        else:
            break
        if len(attempts) > 3 * len(DERATE_SCHEDULE):
            break
        opts = replace(s1opts, derate=DERATE_SCHEDULE[derate_idx], voltage_margin=margin, dg_derate=dg_derate)
        s1 = solve_stage1(model, scenario, opts)
    raise Stage2Infeasible(last_exc.cause if last_exc else "sequencing",
                           f"no feasible switching sequence after {len(attempts)} attempts: {attempts}")


def peak_dg_derate(model: NetworkModel) -> float:
    """DG derating that leaves room for every load to start at its undiversified factor."""
    s_u = max((model.clpu_of(b.id).s_u / model.clpu_of(b.id).s_d for b in model.buses if b.has_load), default=1.0)
    return min(1.0 - 1.0 / s_u, 0.95)


def _plan_key(sol: Stage1Solution) -> tuple:
    """Stage-2 input that matters: target switch states, served loads and settings."""
    return (sol.state.closed, frozenset(sol.served_buses), tuple(sorted(sol.taps.items())),
            tuple(sorted(sol.caps.items())))
