"""Deterministic synthetic multi-feeder networks.

Each feeder hangs off a common substation bus through a rated transformer,
starts with a head breaker (a sectionalizing switch) and grows as a random
tree with some single-phase laterals.  Ties join buses of different feeders;
grid-forming DGs get a virtual edge from the substation.
"""
from __future__ import annotations

import itertools
import logging
import math

import numpy as np

from .netmodel import (
    PLAIN_LINE, REGULATOR, SECTIONALIZING, TIE, TRANSFORMER, VIRTUAL, NetworkModel, network_from_dict,
)

logger = logging.getLogger(__name__)

SUB = "sub"
PF_TAN = math.tan(math.acos(0.95))

# 336 ACSR-like per-mile impedance (ohm); mutual terms for three-phase sections
_R_SELF, _X_SELF = 0.306, 0.627
_R_MUT, _X_MUT = 0.0953, 0.2819


def _line_matrices(phases: str, miles: float) -> tuple[list, list]:
    r = [[0.0] * 3 for _ in range(3)]
    x = [[0.0] * 3 for _ in range(3)]
    idx = ["abc".index(p) for p in phases]
    for i in idx:
        for j in idx:
            r[i][j] = round((_R_SELF if i == j else _R_MUT) * miles, 6)
            x[i][j] = round((_X_SELF if i == j else _X_MUT) * miles, 6)
    return r, x


def synth_multifeeder(feeders: int, buses_per_feeder: int, ties: int, dgs: int, seed: int, *,
                      feeder_kw: float = 1500.0, feeder_miles: float = 3.0, kva_base: float = 1000.0,
                      kv_ll: float = 12.47, sect_per_feeder: int | None = None, sect_fraction: float = 0.25,
                      single_phase_fraction: float = 0.2, switchable_fraction: float = 0.5,
                      capacity_factor: float = 1.6, dg_fraction: float = 0.5, capacitors: int = 0,
                      regulators: int = 0, priority_fraction: float = 0.0, clpu: bool = True,
                      source_v: float = 1.0, name: str | None = None) -> NetworkModel:
    """Build a random but reproducible multi-feeder network.

    Loads are whole kW per phase at 0.95 power factor, scaled so each feeder
    carries about ``feeder_kw``.  Feeder-head transformers are rated at
    ``capacity_factor`` times the heaviest phase of their own feeder, which
    is what makes load transfer capacity-limited.

    Raises:
        ValueError: counts out of range or more ties/DGs than the feeders can host.
    """
    if feeders < 1 or buses_per_feeder < 2:
        raise ValueError("need feeders >= 1 and buses_per_feeder >= 2")
    if ties < 0 or dgs < 0 or capacitors < 0 or regulators < 0:
        raise ValueError("counts must be non-negative")
    if ties and feeders < 2:
        raise ValueError("ties need at least two feeders")
    rng = np.random.default_rng(seed)
    n = buses_per_feeder

    buses = [{"id": SUB, "phases": "abc", "is_source": True, "v_set": source_v}]
    edges = []
    three_phase: dict[int, list[str]] = {}
    feeder_load: dict[int, np.ndarray] = {}
    bus_phases: dict[str, str] = {}

    for f in range(1, feeders + 1):
        ids = [f"f{f}n{j:02d}" for j in range(n)]
        phases = ["abc"]
        parent = [-1]
        for j in range(1, n):
            p = 0 if j == 1 else int(rng.integers(max(1, j - 3), j))
            parent.append(p)
            if len(phases[p]) < 3 or j < max(3, n // 2):
                phases.append(phases[p])
            elif rng.random() < single_phase_fraction:
                phases.append("abc"[int(rng.integers(3))])
            else:
                phases.append("abc")
        depth = [0] * n
        for j in range(1, n):
            depth[j] = depth[parent[j]] + 1
        seg = feeder_miles / max(depth)

        raw = rng.uniform(0.5, 1.5, size=n)
        raw[0] = 0.0
        nphase = np.array([len(p) for p in phases])
        kw_per_phase = raw * feeder_kw / float(np.sum(raw * nphase))
        load = np.zeros(3)
        for j in range(n):
            ph = phases[j]
            bus = {"id": ids[j], "phases": ph}
            if j > 0:
                kw = max(1, int(round(kw_per_phase[j])))
                lp = [float(kw) if p in ph else 0.0 for p in "abc"]
                lq = [round(v * PF_TAN, 3) for v in lp]
                bus.update(load_p=lp, load_q=lq,
                           load_switchable=bool(rng.random() < switchable_fraction),
                           weight=2.0 if rng.random() < priority_fraction else 1.0)
                if clpu:
                    bus["clpu"] = "residential"
                load += np.array(lp)
            buses.append(bus)
            bus_phases[ids[j]] = ph
        feeder_load[f] = load
        three_phase[f] = [ids[j] for j in range(2, n) if phases[j] == "abc"]

        line_rating = round(2.0 * load.max() / 0.95 + 50.0)
        # head breaker first, then a random subset of the remaining branches
        cand = list(range(2, n))
        if sect_per_feeder is None:
            k = int(round(sect_fraction * len(cand)))
        else:
            k = min(sect_per_feeder, len(cand))
        sect = set(rng.choice(cand, size=k, replace=False).tolist()) if k else set()
        sect.add(1)
        head_rating = round(capacity_factor * load.max() / 0.95, 1)
        edges.append({"id": f"X{f}", "from": SUB, "to": ids[0], "kind": TRANSFORMER, "phases": "abc",
                      "r": _line_matrices("abc", 0.05)[0], "x": _line_matrices("abc", 0.15)[1],
                      "s_rated": head_rating})
        for j in range(1, n):
            ph = phases[j]
            miles = seg * float(rng.uniform(0.7, 1.3))
            r, x = _line_matrices(ph, miles)
            kind = SECTIONALIZING if j in sect else PLAIN_LINE
            eid = (f"S{f}_{j:02d}" if kind == SECTIONALIZING else f"L{f}_{j:02d}")
            edges.append({"id": eid, "from": ids[parent[j]], "to": ids[j], "kind": kind, "phases": ph,
                          "normal_closed": True, "r": r, "x": x, "s_rated": line_rating})

    # ties between three-phase buses of different feeders
    pairs = [(a, b) for a, b in itertools.combinations(range(1, feeders + 1), 2)]
    capacity = sum(len(three_phase[a]) * len(three_phase[b]) for a, b in pairs)
    if ties > capacity:
        raise ValueError(f"{ties} ties requested but only {capacity} feeder-crossing bus pairs exist")
    used: set[tuple[str, str]] = set()
    for t in range(1, ties + 1):
        a, b = pairs[(t - 1) % len(pairs)]
        for _ in range(1000):
            u = str(rng.choice(three_phase[a]))
            w = str(rng.choice(three_phase[b]))
            if (u, w) not in used:
                break
        else:
            raise ValueError("could not place distinct ties")
        used.add((u, w))
        r, x = _line_matrices("abc", feeder_miles / 10)
        rating = round(2.0 * max(feeder_load[a].max(), feeder_load[b].max()) / 0.95 + 50.0)
        edges.append({"id": f"T{t}", "from": u, "to": w, "kind": TIE, "phases": "abc", "normal_closed": False,
                      "r": r, "x": x, "s_rated": rating})

    # grid-forming DGs, one per feeder round-robin
    dg_list = []
    taken: set[str] = set()
    hosts = {f: [b for b in three_phase[f]] for f in three_phase}
    if dgs > sum(len(v) for v in hosts.values()):
        raise ValueError(f"{dgs} DGs requested but only {sum(len(v) for v in hosts.values())} host buses")
    for d in range(1, dgs + 1):
        f = (d - 1) % feeders + 1
        options = [b for b in hosts[f] if b not in taken] or [b for v in hosts.values() for b in v if b not in taken]
        bus = str(rng.choice(options))
        taken.add(bus)
        p_max = float(max(1, round(dg_fraction * feeder_load[f].sum())))
        dg_list.append({"id": f"DG{d}", "bus": bus, "p_max": p_max, "q_max": round(0.5 * p_max, 1),
                        "grid_forming": True, "v_set": 1.0})
        edges.append({"id": f"V{d}", "from": SUB, "to": bus, "kind": VIRTUAL, "phases": "abc",
                      "normal_closed": False, "s_rated": p_max})

    regs = []
    if regulators:
        # convert the edge into a three-phase mid-feeder bus to an ideal regulator
        for k in range(regulators):
            f = k % feeders + 1
            cand = [e for e in edges if e["kind"] == PLAIN_LINE and e["id"].startswith(f"L{f}_")
                    and e["phases"] == "abc" and e["to"] in three_phase[f]]
            if not cand:
                raise ValueError(f"feeder {f} has no three-phase line to host a regulator")
            e = cand[len(cand) // 2]
            e["kind"] = REGULATOR
            e["id"] = e["id"].replace("L", "R", 1)
            e["r"] = [[0.0] * 3 for _ in range(3)]
            e["x"] = [[0.0] * 3 for _ in range(3)]
            regs.append({"edge": e["id"], "gang": True, "tap": 16})

    caps = []
    if capacitors:
        pool = [b for f in sorted(three_phase) for b in three_phase[f]]
        if capacitors > len(pool):
            raise ValueError("more capacitors than three-phase buses")
        for b in rng.choice(pool, size=capacitors, replace=False):
            f = int(str(b)[1:str(b).index("n")])
            q = round(0.1 * feeder_load[f].max(), 1)
            caps.append({"bus": str(b), "q_rated": [q, q, q], "gang": True})

    doc = {
        "schema_version": 1,
        "name": name or f"synth-{feeders}x{n}-t{ties}-d{dgs}-s{seed}",
        "bases": {"kva": kva_base, "kv_ll": kv_ll},
        "buses": buses,
        "edges": edges,
        "dgs": dg_list,
        "regulators": regs,
        "capacitors": caps,
        "clpu": {"residential": {"s_u": 2.0, "s_d": 1.0, "alpha_decay": math.log(100) / 4, "delay_steps": 5}}
        if clpu else {},
    }
    return network_from_dict(doc)
