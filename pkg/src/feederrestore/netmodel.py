"""Network data model, validation and JSON ingestion.

A network is a set of multi-phase buses joined by edges (lines, switches,
regulators, transformers and virtual DG edges).  All objects are frozen
dataclasses so a loaded :class:`NetworkModel` can be shared freely between
solver and validation runs.

Units in the file and on the dataclasses: kW / kVAr per phase for loads, ohms
for impedance matrices, kVA *per phase* for ratings.  Per-unit conversion
uses a three-phase kVA base and line-to-line kV base; per-phase power is
normalised by ``kva_base / 3``.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Iterable, Mapping

import jsonschema
import numpy as np

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
PHASES = ("a", "b", "c")

PLAIN_LINE = "plain_line"
SECTIONALIZING = "sectionalizing_switch"
TIE = "tie_switch"
VIRTUAL = "virtual_dg_edge"
REGULATOR = "regulator"
TRANSFORMER = "transformer"

EDGE_KINDS = (PLAIN_LINE, SECTIONALIZING, TIE, VIRTUAL, REGULATOR, TRANSFORMER)
OPERABLE_KINDS = frozenset({SECTIONALIZING, TIE, VIRTUAL})

# regulator tap table: 32 positions, 0.00625 pu per step starting at 0.9
N_TAPS = 32
TAP_STEP = 0.00625
TAP_RATIOS = tuple(0.9 + TAP_STEP * k for k in range(N_TAPS))
NEUTRAL_TAP = 16  # ratio 1.0


class NetworkValidationError(ValueError):
    """Raised when a network or scenario document violates the schema or an invariant."""


def phase_mask(phases: Iterable[str]) -> np.ndarray:
    ph = set(phases)
    return np.array([p in ph for p in PHASES])


def _vec3(values) -> tuple[float, float, float]:
    return tuple(float(v) for v in values)  # type: ignore[return-value]


def _mat3(values) -> tuple[tuple[float, ...], ...]:
    return tuple(tuple(float(v) for v in row) for row in values)


ZERO3 = (0.0, 0.0, 0.0)
ZERO33 = (ZERO3, ZERO3, ZERO3)


@dataclass(frozen=True)
class ClpuParams:
    """Delayed-exponential cold-load-pickup parameters.

    ``alpha_decay`` and ``delay_steps`` are expressed in samples of the curve,
    which are the Stage-2 sub-steps.
    """

    s_u: float = 2.0
    s_d: float = 1.0
    alpha_decay: float = math.log(100.0) / 4.0
    delay_steps: int = 5
    n_samples: int = 0  # 0 -> chosen so the residual above s_d is below 1e-6
    sample_period: float = 1.0  # minutes

    def __post_init__(self):
        if not (self.s_d > 0 and self.s_u >= self.s_d):
            raise NetworkValidationError(f"CLPU factors need s_u >= s_d > 0, got s_u={self.s_u}, s_d={self.s_d}")
        if self.alpha_decay <= 0:
            raise NetworkValidationError("CLPU alpha_decay must be > 0")
        if self.delay_steps < 1:
            raise NetworkValidationError("CLPU delay_steps must be >= 1 so that D(1) = s_u")
        if self.n_samples == 0:
            n = self.delay_steps + math.ceil(math.log(1e6) / self.alpha_decay)
            object.__setattr__(self, "n_samples", int(n))
        if self.n_samples < 1:
            raise NetworkValidationError("CLPU n_samples must be >= 1")


NO_CLPU = ClpuParams(s_u=1.0, s_d=1.0, delay_steps=1, n_samples=1)


@dataclass(frozen=True)
class Bus:
    id: str
    phases: tuple[str, ...] = PHASES
    load_p: tuple[float, float, float] = ZERO3
    load_q: tuple[float, float, float] = ZERO3
    weight: float = 1.0
    load_switchable: bool = False
    clpu: str | None = None
    is_source: bool = False
    v_set: float = 1.0
    kv_base: float | None = None
    customers: int = 1

    @property
    def has_load(self) -> bool:
        return any(p > 0 for p in self.load_p) or any(q > 0 for q in self.load_q)

    @property
    def total_kw(self) -> float:
        return float(sum(self.load_p))


@dataclass(frozen=True)
class Edge:
    id: str
    from_bus: str
    to_bus: str
    kind: str = PLAIN_LINE
    phases: tuple[str, ...] = PHASES
    normal_closed: bool = True
    r: tuple[tuple[float, ...], ...] = ZERO33
    x: tuple[tuple[float, ...], ...] = ZERO33
    s_rated: float = 0.0

    @property
    def operable(self) -> bool:
        return self.kind in OPERABLE_KINDS


@dataclass(frozen=True)
class DG:
    id: str
    bus: str
    p_max: float
    q_max: float = 0.0
    grid_forming: bool = True
    v_set: float = 1.0


@dataclass(frozen=True)
class Regulator:
    edge: str
    gang: bool = True
    tap: int = NEUTRAL_TAP

    @staticmethod
    def ratio(position: int) -> float:
        return TAP_RATIOS[position]


@dataclass(frozen=True)
class CapacitorBank:
    bus: str
    q_rated: tuple[float, float, float]
    gang: bool = True


@dataclass(frozen=True)
class NetworkModel:
    name: str
    kva_base: float
    kv_base: float
    buses: tuple[Bus, ...]
    edges: tuple[Edge, ...]
    dgs: tuple[DG, ...] = ()
    regulators: tuple[Regulator, ...] = ()
    capacitors: tuple[CapacitorBank, ...] = ()
    clpu_profiles: tuple[tuple[str, ClpuParams], ...] = ()

    # lookups -------------------------------------------------------------
    @cached_property
    def bus(self) -> dict[str, Bus]:
        return {b.id: b for b in self.buses}

    @cached_property
    def edge(self) -> dict[str, Edge]:
        return {e.id: e for e in self.edges}

    @cached_property
    def regulator(self) -> dict[str, Regulator]:
        return {r.edge: r for r in self.regulators}

    @cached_property
    def capacitor(self) -> dict[str, CapacitorBank]:
        return {c.bus: c for c in self.capacitors}

    @cached_property
    def dg_at(self) -> dict[str, DG]:
        return {d.bus: d for d in self.dgs if d.grid_forming}

    @cached_property
    def profiles(self) -> dict[str, ClpuParams]:
        return dict(self.clpu_profiles)

    @cached_property
    def sources(self) -> tuple[str, ...]:
        return tuple(b.id for b in self.buses if b.is_source)

    @cached_property
    def operable_edges(self) -> tuple[str, ...]:
        return tuple(e.id for e in self.edges if e.operable)

    def edges_of_kind(self, *kinds: str) -> tuple[str, ...]:
        return tuple(e.id for e in self.edges if e.kind in kinds)

    @cached_property
    def incident(self) -> dict[str, list[str]]:
        inc: dict[str, list[str]] = {b.id: [] for b in self.buses}
        for e in self.edges:
            inc[e.from_bus].append(e.id)
            inc[e.to_bus].append(e.id)
        return inc

    def clpu_of(self, bus_id: str) -> ClpuParams:
        name = self.bus[bus_id].clpu
        return self.profiles[name] if name else NO_CLPU

    # per-unit helpers ----------------------------------------------------
    @property
    def s_phase_base(self) -> float:
        """Per-phase power base in kVA."""
        return self.kva_base / 3.0

    def z_base(self, bus_id: str) -> float:
        kv = self.bus[bus_id].kv_base or self.kv_base
        return kv * kv * 1000.0 / self.kva_base

    def r_pu(self, edge_id: str) -> np.ndarray:
        e = self.edge[edge_id]
        return np.array(e.r) / self.z_base(e.from_bus)

    def x_pu(self, edge_id: str) -> np.ndarray:
        e = self.edge[edge_id]
        return np.array(e.x) / self.z_base(e.from_bus)

    def total_load_kw(self) -> float:
        return float(sum(b.total_kw for b in self.buses))

    @cached_property
    def content_hash(self) -> str:
        blob = json.dumps(network_to_dict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass(frozen=True)
class FaultScenario:
    """Post-isolation state handed over by fault location/isolation."""

    faulted_edges: frozenset[str] = frozenset()
    tripped_switches: frozenset[str] = frozenset()
    isolation_switches: frozenset[str] = frozenset()
    description: str = ""
    options: Mapping[str, Any] = field(default_factory=dict, compare=False)

    @property
    def forced_open(self) -> frozenset[str]:
        return self.faulted_edges | self.tripped_switches | self.isolation_switches

    def validate(self, model: NetworkModel) -> None:
        for group, ids in (("faulted", self.faulted_edges), ("tripped", self.tripped_switches),
                           ("isolation", self.isolation_switches)):
            for eid in ids:
                if eid not in model.edge:
                    raise NetworkValidationError(f"scenario {group} edge {eid!r} does not exist")
        for eid in self.tripped_switches | self.isolation_switches:
            if not model.edge[eid].operable:
                raise NetworkValidationError(f"scenario switch {eid!r} is not an operable switch")


# ---------------------------------------------------------------------------
# JSON schema

_vec = {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3}
_mat = {"type": "array", "items": _vec, "minItems": 3, "maxItems": 3}
_phases = {"type": "string", "pattern": "^a?b?c?$", "minLength": 1}

NETWORK_SCHEMA: dict[str, Any] = {
    "type": "object",
    "required": ["schema_version", "bases", "buses", "edges"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "name": {"type": "string"},
        "bases": {
            "type": "object",
            "required": ["kva", "kv_ll"],
            "properties": {"kva": {"type": "number", "exclusiveMinimum": 0},
                           "kv_ll": {"type": "number", "exclusiveMinimum": 0}},
        },
        "buses": {"type": "array", "items": {
            "type": "object",
            "required": ["id", "phases"],
            "additionalProperties": False,
            "properties": {
                "id": {"type": "string", "minLength": 1},
                "phases": _phases,
                "load_p": _vec, "load_q": _vec,
                "weight": {"type": "number", "minimum": 0},
                "load_switchable": {"type": "boolean"},
                "clpu": {"type": ["string", "null"]},
                "is_source": {"type": "boolean"},
                "v_set": {"type": "number", "exclusiveMinimum": 0},
                "kv_base": {"type": ["number", "null"], "exclusiveMinimum": 0},
                "customers": {"type": "integer", "minimum": 0},
            },
        }},
        "edges": {"type": "array", "items": {
            "type": "object",
            "required": ["id", "from", "to", "kind", "phases"],
            "additionalProperties": False,
            "properties": {
                "id": {"type": "string", "minLength": 1},
                "from": {"type": "string"}, "to": {"type": "string"},
                "kind": {"enum": list(EDGE_KINDS)},
                "phases": _phases,
                "normal_closed": {"type": "boolean"},
                "r": _mat, "x": _mat,
                "s_rated": {"type": "number", "minimum": 0},
            },
        }},
        "dgs": {"type": "array", "items": {
            "type": "object",
            "required": ["id", "bus", "p_max"],
            "additionalProperties": False,
            "properties": {
                "id": {"type": "string"}, "bus": {"type": "string"},
                "p_max": {"type": "number"}, "q_max": {"type": "number"},
                "grid_forming": {"type": "boolean"},
                "v_set": {"type": "number", "exclusiveMinimum": 0},
            },
        }},
        "regulators": {"type": "array", "items": {
            "type": "object", "required": ["edge"], "additionalProperties": False,
            "properties": {"edge": {"type": "string"}, "gang": {"type": "boolean"},
                           "tap": {"type": "integer", "minimum": 0, "maximum": N_TAPS - 1}},
        }},
        "capacitors": {"type": "array", "items": {
            "type": "object", "required": ["bus", "q_rated"], "additionalProperties": False,
            "properties": {"bus": {"type": "string"}, "q_rated": _vec, "gang": {"type": "boolean"}},
        }},
        "clpu": {"type": "object", "additionalProperties": {
            "type": "object", "required": ["s_u", "s_d", "alpha_decay", "delay_steps"],
            "additionalProperties": False,
            "properties": {
                "s_u": {"type": "number"}, "s_d": {"type": "number"},
                "alpha_decay": {"type": "number"}, "delay_steps": {"type": "integer"},
                "n_samples": {"type": "integer", "minimum": 0},
                "sample_period": {"type": "number", "exclusiveMinimum": 0},
            },
        }},
    },
}

SCENARIO_SCHEMA: dict[str, Any] = {
    "type": "object",
    "required": ["schema_version"],
    "additionalProperties": False,
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "description": {"type": "string"},
        "faulted": {"type": "array", "items": {"type": "string"}},
        "tripped": {"type": "array", "items": {"type": "string"}},
        "isolation": {"type": "array", "items": {"type": "string"}},
        "options": {"type": "object"},
    },
}


def _schema_check(doc: Any, schema: dict, what: str) -> None:
    validator = jsonschema.Draft202012Validator(schema)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.path))
    if errors:
        err = errors[0]
        where = "/".join(str(p) for p in err.path) or "<root>"
        raise NetworkValidationError(f"{what} schema violation at {where}: {err.message}")


# ---------------------------------------------------------------------------
# (de)serialisation

def network_from_dict(doc: Mapping[str, Any]) -> NetworkModel:
    """Build and validate a :class:`NetworkModel` from a parsed JSON document."""
    _schema_check(doc, NETWORK_SCHEMA, "network")
    profiles = []
    for name, p in sorted(doc.get("clpu", {}).items()):
        profiles.append((name, ClpuParams(**p)))
    buses = tuple(
        Bus(
            id=b["id"],
            phases=tuple(p for p in PHASES if p in b["phases"]),
            load_p=_vec3(b.get("load_p", ZERO3)),
            load_q=_vec3(b.get("load_q", ZERO3)),
            weight=float(b.get("weight", 1.0)),
            load_switchable=bool(b.get("load_switchable", False)),
            clpu=b.get("clpu"),
            is_source=bool(b.get("is_source", False)),
            v_set=float(b.get("v_set", 1.0)),
            kv_base=b.get("kv_base"),
            customers=int(b.get("customers", 1)),
        )
        for b in doc["buses"]
    )
    edges = tuple(
        Edge(
            id=e["id"],
            from_bus=e["from"],
            to_bus=e["to"],
            kind=e["kind"],
            phases=tuple(p for p in PHASES if p in e["phases"]),
            normal_closed=bool(e.get("normal_closed", e["kind"] not in (TIE, VIRTUAL))),
            r=_mat3(e.get("r", ZERO33)),
            x=_mat3(e.get("x", ZERO33)),
            s_rated=float(e.get("s_rated", 0.0)),
        )
        for e in doc["edges"]
    )
    dgs = tuple(DG(id=d["id"], bus=d["bus"], p_max=float(d["p_max"]), q_max=float(d.get("q_max", 0.0)),
                   grid_forming=bool(d.get("grid_forming", True)), v_set=float(d.get("v_set", 1.0)))
                for d in doc.get("dgs", []))
    regs = tuple(Regulator(edge=r["edge"], gang=bool(r.get("gang", True)), tap=int(r.get("tap", NEUTRAL_TAP)))
                 for r in doc.get("regulators", []))
    caps = tuple(CapacitorBank(bus=c["bus"], q_rated=_vec3(c["q_rated"]), gang=bool(c.get("gang", True)))
                 for c in doc.get("capacitors", []))
    model = NetworkModel(
        name=doc.get("name", ""),
        kva_base=float(doc["bases"]["kva"]),
        kv_base=float(doc["bases"]["kv_ll"]),
        buses=buses, edges=edges, dgs=dgs, regulators=regs, capacitors=caps,
        clpu_profiles=tuple(profiles),
    )
    validate_network(model)
    return model


def network_to_dict(model: NetworkModel) -> dict[str, Any]:
    def phases(ph):
        return "".join(ph)

    doc: dict[str, Any] = {
        "schema_version": SCHEMA_VERSION,
        "name": model.name,
        "bases": {"kva": model.kva_base, "kv_ll": model.kv_base},
        "buses": [],
        "edges": [],
        "dgs": [],
        "regulators": [],
        "capacitors": [],
        "clpu": {},
    }
    for b in model.buses:
        doc["buses"].append({
            "id": b.id, "phases": phases(b.phases), "load_p": list(b.load_p), "load_q": list(b.load_q),
            "weight": b.weight, "load_switchable": b.load_switchable, "clpu": b.clpu,
            "is_source": b.is_source, "v_set": b.v_set, "kv_base": b.kv_base, "customers": b.customers,
        })
    for e in model.edges:
        doc["edges"].append({
            "id": e.id, "from": e.from_bus, "to": e.to_bus, "kind": e.kind, "phases": phases(e.phases),
            "normal_closed": e.normal_closed, "r": [list(r) for r in e.r], "x": [list(r) for r in e.x],
            "s_rated": e.s_rated,
        })
    for d in model.dgs:
        doc["dgs"].append({"id": d.id, "bus": d.bus, "p_max": d.p_max, "q_max": d.q_max,
                           "grid_forming": d.grid_forming, "v_set": d.v_set})
    for r in model.regulators:
        doc["regulators"].append({"edge": r.edge, "gang": r.gang, "tap": r.tap})
    for c in model.capacitors:
        doc["capacitors"].append({"bus": c.bus, "q_rated": list(c.q_rated), "gang": c.gang})
    for name, p in model.clpu_profiles:
        doc["clpu"][name] = {"s_u": p.s_u, "s_d": p.s_d, "alpha_decay": p.alpha_decay,
                             "delay_steps": p.delay_steps, "n_samples": p.n_samples,
                             "sample_period": p.sample_period}
    return doc


def load_network(path: str | Path) -> NetworkModel:
    """Read a network JSON file, validate it and return the model."""
    with open(path) as fh:
        doc = json.load(fh)
    return network_from_dict(doc)


def save_network(model: NetworkModel, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(network_to_dict(model), fh, indent=1, sort_keys=True)


def scenario_from_dict(doc: Mapping[str, Any], model: NetworkModel | None = None) -> FaultScenario:
    _schema_check(doc, SCENARIO_SCHEMA, "scenario")
    sc = FaultScenario(
        faulted_edges=frozenset(doc.get("faulted", [])),
        tripped_switches=frozenset(doc.get("tripped", [])),
        isolation_switches=frozenset(doc.get("isolation", [])),
        description=doc.get("description", ""),
        options=dict(doc.get("options", {})),
    )
    if model is not None:
        sc.validate(model)
    return sc


def scenario_to_dict(sc: FaultScenario) -> dict[str, Any]:
    return {
        "schema_version": SCHEMA_VERSION,
        "description": sc.description,
        "faulted": sorted(sc.faulted_edges),
        "tripped": sorted(sc.tripped_switches),
        "isolation": sorted(sc.isolation_switches),
        "options": dict(sc.options),
    }


def load_scenario(path: str | Path, model: NetworkModel | None = None) -> FaultScenario:
    with open(path) as fh:
        return scenario_from_dict(json.load(fh), model)


# ---------------------------------------------------------------------------
# semantic validation

def _check_unique(ids: Iterable[str], what: str) -> None:
    seen: set[str] = set()
    for i in ids:
        if i in seen:
            raise NetworkValidationError(f"duplicate {what} id {i!r}")
        seen.add(i)


def validate_network(model: NetworkModel) -> None:
    """Check every cross-reference and type invariant; raise on the first violation."""
    _check_unique((b.id for b in model.buses), "bus")
    _check_unique((e.id for e in model.edges), "edge")
    _check_unique((d.id for d in model.dgs), "dg")
    buses = model.bus
    if not model.sources:
        raise NetworkValidationError("network has no source bus")

    for b in model.buses:
        if not b.phases:
            raise NetworkValidationError(f"bus {b.id!r} has an empty phase set")
        mask = phase_mask(b.phases)
        for name, vals in (("load_p", b.load_p), ("load_q", b.load_q)):
            arr = np.array(vals)
            if np.any(arr < 0):
                raise NetworkValidationError(f"bus {b.id!r} has negative {name}")
            if np.any(arr[~mask] != 0):
                raise NetworkValidationError(f"bus {b.id!r} has {name} on a phase it does not own")
        if b.clpu is not None and b.clpu not in model.profiles:
            raise NetworkValidationError(f"bus {b.id!r} references unknown CLPU profile {b.clpu!r}")

    for e in model.edges:
        for end in (e.from_bus, e.to_bus):
            if end not in buses:
                raise NetworkValidationError(f"edge {e.id!r} references unknown bus {end!r}")
        if e.from_bus == e.to_bus:
            raise NetworkValidationError(f"edge {e.id!r} is a self loop")
        if not e.phases:
            raise NetworkValidationError(f"edge {e.id!r} has an empty phase set")
        for end in (e.from_bus, e.to_bus):
            if not set(e.phases) <= set(buses[end].phases):
                raise NetworkValidationError(
                    f"edge {e.id!r} phases {''.join(e.phases)} not a subset of bus {end!r} phases")
        mask = phase_mask(e.phases)
        absent = ~np.outer(mask, mask)
        for name, mat in (("r", e.r), ("x", e.x)):
            if np.any(np.array(mat)[absent] != 0):
                raise NetworkValidationError(f"edge {e.id!r} has nonzero {name} entries on absent phases")
        if e.kind == TIE and e.normal_closed:
            raise NetworkValidationError(f"tie switch {e.id!r} must be normally open")
        if e.kind == SECTIONALIZING and not e.normal_closed:
            raise NetworkValidationError(f"sectionalizing switch {e.id!r} must be normally closed")
        if e.kind in (PLAIN_LINE, REGULATOR, TRANSFORMER) and not e.normal_closed:
            raise NetworkValidationError(f"non-switchable edge {e.id!r} cannot be normally open")
        if e.kind == VIRTUAL:
            if e.normal_closed:
                raise NetworkValidationError(f"virtual edge {e.id!r} must be normally open")
            if np.any(np.array(e.r)) or np.any(np.array(e.x)):
                raise NetworkValidationError(f"virtual edge {e.id!r} must carry no impedance")
            if not buses[e.from_bus].is_source:
                raise NetworkValidationError(f"virtual edge {e.id!r} must start at a source bus")
            if e.to_bus not in model.dg_at:
                raise NetworkValidationError(f"virtual edge {e.id!r} must end at a grid-forming DG bus")
        elif e.s_rated <= 0:
            raise NetworkValidationError(f"edge {e.id!r} needs s_rated > 0")

    for d in model.dgs:
        if d.bus not in buses:
            raise NetworkValidationError(f"DG {d.id!r} references unknown bus {d.bus!r}")
        if d.p_max <= 0 or d.q_max < 0:
            raise NetworkValidationError(f"DG {d.id!r} needs p_max > 0 and q_max >= 0")
        if d.grid_forming:
            n_virtual = sum(1 for e in model.edges if e.kind == VIRTUAL and e.to_bus == d.bus)
            if n_virtual != 1:
                raise NetworkValidationError(f"grid-forming DG {d.id!r} needs exactly one virtual edge, has {n_virtual}")
    gf_buses = [d.bus for d in model.dgs if d.grid_forming]
    if len(gf_buses) != len(set(gf_buses)):
        raise NetworkValidationError("at most one grid-forming DG per bus")

    reg_edges = [r.edge for r in model.regulators]
    _check_unique(reg_edges, "regulator edge")
    for r in model.regulators:
        if r.edge not in model.edge or model.edge[r.edge].kind != REGULATOR:
            raise NetworkValidationError(f"regulator record {r.edge!r} does not reference a regulator edge")
    for e in model.edges:
        if e.kind == REGULATOR and e.id not in model.regulator:
            raise NetworkValidationError(f"regulator edge {e.id!r} has no regulator record")

    _check_unique((c.bus for c in model.capacitors), "capacitor bus")
    for c in model.capacitors:
        if c.bus not in buses:
            raise NetworkValidationError(f"capacitor references unknown bus {c.bus!r}")
        q = np.array(c.q_rated)
        if np.any(q < 0) or np.any(q[~phase_mask(buses[c.bus].phases)] != 0):
            raise NetworkValidationError(f"capacitor at {c.bus!r} has invalid q_rated")

    # deferred import: topology depends on this module
    from . import topology

    bad = topology.switchless_cycle(model)
    if bad is not None:
        raise NetworkValidationError(f"cycle with no switch through edges {sorted(bad)}; network cannot be made radial")
    report = topology.is_radial_connected(model, topology.TopologyState.normal(model))
    if not report.radial:
        raise NetworkValidationError(f"normal operating state is not radial: {report.violations}")
    dead = set(model.bus) - report.energized_buses
    if dead:
        raise NetworkValidationError(f"buses not energized in the normal state: {sorted(dead)[:10]}")
