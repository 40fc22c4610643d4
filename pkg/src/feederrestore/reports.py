"""Report documents and file formats written by the command-line runner.

Every JSON document carries ``schema_version``.  Floats are rounded to nine
significant digits so that identical runs produce identical bytes; wall-clock
timings only ever appear in ``run_metadata.json``.
"""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Any

import numpy as np

from .netmodel import PHASES, VIRTUAL, NetworkModel
from .stage1 import Stage1Solution
from .stage2 import SequenceStep, SwitchingSequence, customer_minutes_interrupted, interrupted_healthy

REPORT_SCHEMA_VERSION = 1
SEQUENCE_FORMAT = "feederrestore.sequence"


class SequenceFormatError(ValueError):
    """A sequence file that cannot be turned back into a :class:`SwitchingSequence`."""


def _clean(x: Any) -> Any:
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple, set, frozenset)):
        items = sorted(x) if isinstance(x, (set, frozenset)) else x
        return [_clean(v) for v in items]
    if isinstance(x, np.ndarray):
        return _clean(x.tolist())
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        v = float(x)
        if not math.isfinite(v):
            return None
        return float(f"{v:.9g}") if v != 0 else 0.0
    return x


def write_json(path: str | Path, doc: dict) -> None:
    with open(path, "w") as fh:
        json.dump(_clean(doc), fh, indent=1, sort_keys=True)
        fh.write("\n")


def stage1_report(model: NetworkModel, sol: Stage1Solution) -> dict:
    info = {k: v for k, v in sol.solve_info.items() if k != "wall_time"}
    w = sol.weights
    return {
        "schema_version": REPORT_SCHEMA_VERSION,
        "network": model.name,
        "status": sol.status,
        "objective": sol.objective,
        "weights": {"alpha": w.alpha, "beta": w.beta, "gamma": w.gamma},
        "switch_ops": sol.switch_ops,
        "closed": sorted(sol.state.closed),
        "dg_closed": sorted(e for e in sol.state.closed if model.edge[e].kind == VIRTUAL),
        "served_kw": sol.served_kw,
        "restored_kw": sol.restored_kw,
        "shed_kw": sol.shed_kw,
        "outage_kw": sol.outage_kw,
        "outage_served_kw": sol.outage_served_kw,
        "healthy_shed_kw": sol.healthy_shed_kw,
        "weighted_load": sol.weighted_load,
        "per_feeder": sol.per_feeder,
        "served_buses": sorted(sol.served_buses),
        "taps": sol.taps,
        "caps": sol.caps,
        "min_voltage_pu": min((math.sqrt(max(sol.U[b][PHASES.index(p)], 0.0))
                               for b, on in sol.v.items() if on and not model.bus[b].is_source
                               for p in model.bus[b].phases), default=None),
        "bus_voltages_pu": {b: [math.sqrt(max(sol.U[b][PHASES.index(p)], 0.0)) if p in model.bus[b].phases
                                else None for p in PHASES]
                            for b, on in sorted(sol.v.items()) if on},
        "verification": sol.verification,
        "solve_info": info,
    }


def _step_doc(st: SequenceStep) -> dict:
    return {
        "t": st.t, "macro": st.macro, "action": st.action, "edge": st.edge,
        "pickups": sorted(st.pickups), "drops": sorted(st.drops),
        "closed": sorted(st.closed), "served": sorted(st.served), "energized": sorted(st.energized),
        "served_kw": st.served_kw, "weighted_kw": st.weighted_kw, "min_voltage_pu": st.min_voltage_pu,
        "demand_kw": st.demand_kw,
        "u_pu2": {b: u for b, u in sorted(st.U.items())},
    }


def sequence_to_dict(seq: SwitchingSequence, taps=None, caps=None, network: str = "") -> dict:
    """Self-contained sequence document; enough to replay without re-solving."""
    return {
        "format": SEQUENCE_FORMAT,
        "schema_version": REPORT_SCHEMA_VERSION,
        "network": network,
        "status": seq.status,
        "objective": seq.objective,
        "substeps": seq.substeps,
        "n_macro": seq.n_macro,
        "settle_steps": seq.settle_steps,
        "fixed_order": seq.fixed_order,
        "actions": [{"macro": m, "action": a, "edge": e} for m, a, e in seq.actions],
        "initial_closed": sorted(seq.initial_closed),
        "initial_served": sorted(seq.initial_served),
        "target_closed": sorted(seq.target_closed),
        "target_served": sorted(seq.target_served),
        "taps": taps or {},
        "caps": caps or {},
        "steps": [_step_doc(s) for s in seq.steps],
    }


def sequence_from_dict(doc: dict, model: NetworkModel) -> tuple[SwitchingSequence, dict, dict]:
    """Inverse of :func:`sequence_to_dict`; returns ``(sequence, taps, caps)``.

    Raises:
        SequenceFormatError: wrong format tag, missing fields or unknown ids.
    """
    if not isinstance(doc, dict) or doc.get("format") != SEQUENCE_FORMAT:
        raise SequenceFormatError("not a sequence document")
    if doc.get("schema_version") != REPORT_SCHEMA_VERSION:
        raise SequenceFormatError(f"unsupported schema_version {doc.get('schema_version')!r}")

    def edges(ids):
        bad = [e for e in ids if e not in model.edge]
        if bad:
            raise SequenceFormatError(f"unknown edges {bad}")
        return frozenset(ids)

    def buses(ids):
        bad = [b for b in ids if b not in model.bus]
        if bad:
            raise SequenceFormatError(f"unknown buses {bad}")
        return frozenset(ids)

    def _slack(d):
        buses(d)
        out = {}
        for b, u in d.items():
            arr = np.array(u, dtype=float)
            if arr.shape != (3,):
                raise SequenceFormatError(f"slack voltage of {b} must have three entries")
            out[b] = arr
        return out

    try:
        steps = []
        for s in doc["steps"]:
            steps.append(SequenceStep(
                t=int(s["t"]), macro=int(s["macro"]), action=s["action"], edge=s["edge"],
                pickups=list(s["pickups"]), drops=list(s["drops"]),
                closed=edges(s["closed"]), served=buses(s["served"]), energized=buses(s["energized"]),
                served_kw=float(s["served_kw"]), weighted_kw=float(s["weighted_kw"]),
                demand_kw={b: float(v) for b, v in s.get("demand_kw", {}).items()},
                min_voltage_pu=float(s["min_voltage_pu"]) if s["min_voltage_pu"] is not None else float("nan"),
                U=_slack(s.get("u_pu2", {})),
            ))
        seq = SwitchingSequence(
            steps=steps,
            actions=[(int(a["macro"]), a["action"], a["edge"]) for a in doc["actions"]],
            substeps=int(doc["substeps"]), n_macro=int(doc["n_macro"]), settle_steps=int(doc["settle_steps"]),
            initial_closed=edges(doc["initial_closed"]), initial_served=buses(doc["initial_served"]),
            target_closed=edges(doc["target_closed"]), target_served=buses(doc["target_served"]),
            objective=float(doc["objective"]), status=str(doc.get("status", "")),
            fixed_order=bool(doc.get("fixed_order", False)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, SequenceFormatError):
            raise
        raise SequenceFormatError(f"malformed sequence document: {exc!r}") from exc
    if seq.substeps < 1 or len(seq.steps) != seq.n_macro * seq.substeps:
        raise SequenceFormatError("step count does not match n_macro x substeps")
    if [s.t for s in seq.steps] != list(range(1, len(seq.steps) + 1)):
        raise SequenceFormatError("steps are not numbered 1..T")
    return seq, dict(doc.get("taps", {})), dict(doc.get("caps", {}))


SEQUENCE_CSV_FIELDS = ("t", "macro", "action", "edge", "served_kw", "weighted_kw", "demand_kw",
                       "min_voltage_pu", "n_served", "pickups", "drops")


def write_sequence_csv(path: str | Path, seq: SwitchingSequence) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SEQUENCE_CSV_FIELDS)
        for st in seq.steps:
            w.writerow([st.t, st.macro, st.action or "", st.edge or "", f"{st.served_kw:.6f}",
                        f"{st.weighted_kw:.6f}", f"{sum(st.demand_kw.values()):.6f}",
                        f"{st.min_voltage_pu:.6f}", len(st.served),
                        " ".join(sorted(st.pickups)), " ".join(sorted(st.drops))])


def comparison_report(model: NetworkModel, optimal: SwitchingSequence, naive: SwitchingSequence | None,
                      naive_error: str | None = None) -> dict:
    """Served-kW traces and interruption statistics for optimal vs naive ordering."""
    opt = {"objective": optimal.objective, "actions": [list(a) for a in optimal.actions],
           "served_kw": optimal.served_kw_trace,
           "cumulative_served_kwh_steps": float(np.sum(optimal.served_kw_trace)),
           "customer_minutes_interrupted": customer_minutes_interrupted(model, optimal),
           "interrupted_healthy": sorted(interrupted_healthy(optimal))}
    doc = {"schema_version": REPORT_SCHEMA_VERSION, "optimal": opt, "naive": None,
           "naive_feasible": naive is not None, "naive_error": naive_error}
    if naive is not None:
        doc["naive"] = {"objective": naive.objective, "actions": [list(a) for a in naive.actions],
                        "served_kw": naive.served_kw_trace,
                        "cumulative_served_kwh_steps": float(np.sum(naive.served_kw_trace)),
                        "customer_minutes_interrupted": customer_minutes_interrupted(model, naive),
                        "interrupted_healthy": sorted(interrupted_healthy(naive))}
        doc["objective_gain"] = optimal.objective - naive.objective
        doc["cmi_difference"] = (doc["naive"]["customer_minutes_interrupted"]
                                 - opt["customer_minutes_interrupted"])
    return doc


def write_comparison_csv(path: str | Path, optimal: SwitchingSequence, naive: SwitchingSequence | None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("t", "optimal_served_kw", "naive_served_kw"))
        n = len(optimal.steps) if naive is None else max(len(optimal.steps), len(naive.steps))
        for i in range(n):
            a = f"{optimal.steps[i].served_kw:.6f}" if i < len(optimal.steps) else ""
            b = f"{naive.steps[i].served_kw:.6f}" if naive is not None and i < len(naive.steps) else ""
            w.writerow((i + 1, a, b))


def write_voltage_csv(path: str | Path, model: NetworkModel, voltages: list[dict]) -> None:
    """Per-step, per-bus phase voltage magnitudes (pu) from the replay."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("t", "bus", "v_a", "v_b", "v_c"))
        for t, vs in enumerate(voltages, start=1):
            for b, v in vs.items():
                ph = model.bus[b].phases
                w.writerow([t, b] + [f"{v[k]:.6f}" if PHASES[k] in ph else "" for k in range(3)])
