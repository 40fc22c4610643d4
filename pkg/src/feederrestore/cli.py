"""Command-line runner.

Subcommands::

    feederrestore restore  NETWORK SCENARIO -o OUT [--no-dg | --stage1-only | --replay-only | --emit-lp ...]
    feederrestore compare  NETWORK SCENARIO -o OUT
    feederrestore synth    -o NETWORK.json [--scenario-out SCENARIO.json] [--feeders N ...]
    feederrestore cycles   NETWORK -o CACHE.json
    feederrestore oracle   NETWORK SCENARIO
    feederrestore pfcheck  NETWORK [--loading 1.0]

Exit codes are listed in ``EXIT_CODES``.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .milpcore import ENV_BACKEND, SolveOptions, SolverError
from .netmodel import NetworkValidationError, load_network, load_scenario, save_network, scenario_to_dict
from .oracle import OracleCapExceeded, brute_force_oracle
from .pipeline import plan_restoration
from .powerflow import check_limits, head_apparent_power, linear_pf, settled_loads, sweep_pf
from .reports import (
    SequenceFormatError, comparison_report, sequence_from_dict, sequence_to_dict, stage1_report, write_comparison_csv,
    write_json, write_sequence_csv, write_voltage_csv,
)
from .stage1 import (
    V_MAX_DEFAULT, V_MIN_DEFAULT, Stage1Error, Stage1Infeasible, Stage1Options, build_stage1, solution_flow,
    solve_stage1,
)
from .stage2 import (
    Stage2Error, Stage2Infeasible, Stage2Options, build_stage2, naive_order, replay_sequence, solve_stage2,
)
from .synth import synth_multifeeder
from .topology import TopologyState, cached_cycles, load_cycle_cache, save_cycle_cache

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_STAGE1_INFEASIBLE = 3
EXIT_STAGE2_INFEASIBLE = 4
EXIT_VALIDATION = 5
EXIT_SOLVER = 6
EXIT_CODES = {
    EXIT_OK: "success, all validations passed",
    EXIT_INPUT: "input error (unreadable or invalid network, scenario or options)",
    EXIT_STAGE1_INFEASIBLE: "stage 1 infeasible",
    EXIT_STAGE2_INFEASIBLE: "stage 2 infeasible",
    EXIT_VALIDATION: "validation failure",
    EXIT_SOLVER: "solver failure",
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    network: Path
    scenario: Path | None
    out_dir: Path
    sequence: Path | None = None       # replay-only input; defaults to OUT/sequence.json
    cycle_cache: Path | None = None
    v_min: float = V_MIN_DEFAULT
    v_max: float = V_MAX_DEFAULT
    feeder_loading_cap: float = 1.0
    alpha: float = 1.0
    beta: float | None = None
    gamma: float | None = None
    substeps: int = 5
    settle_steps: int = 0
    max_settle_steps: int = 4
    time_limit: float | None = None
    gap: float = 1e-6
    backend: str | None = None
    no_dg: bool = False
    stage1_only: bool = False
    replay_only: bool = False
    emit_lp: bool = False
    adapt: bool = True
    seed: int | None = None
    extra: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.replay_only and (self.stage1_only or self.emit_lp or self.no_dg):
            raise ConfigError("--replay-only cannot be combined with --stage1-only, --emit-lp or --no-dg")
        if not 0 < self.v_min < self.v_max:
            raise ConfigError("need 0 < v_min < v_max")
        if self.scenario is None:
            raise ConfigError("a scenario file is required")
        self.out_dir.mkdir(parents=True, exist_ok=True)
        if not os.access(self.out_dir, os.W_OK):
            raise ConfigError(f"output directory {self.out_dir} is not writable")

    def solver(self, gap: float | None = None) -> SolveOptions:
        return SolveOptions.from_env(time_limit=self.time_limit, gap=self.gap if gap is None else gap)

    def stage1_options(self) -> Stage1Options:
        return Stage1Options(alpha=self.alpha, beta=self.beta, gamma=self.gamma, u_min=self.v_min ** 2,
                             u_max=self.v_max ** 2, allow_dg_islanding=not self.no_dg,
                             feeder_loading_cap=self.feeder_loading_cap, solver=self.solver())

    def stage2_options(self, s1: Stage1Options) -> Stage2Options:
        return Stage2Options.from_stage1(s1, substeps=self.substeps, settle_steps=self.settle_steps,
                                         max_settle_steps=self.max_settle_steps,
                                         solver=self.solver(gap=min(self.gap, 1e-9)))


def _metadata(cfg: RunConfig, model, timings: dict, extra: dict) -> dict:
    return {
        "schema_version": 1,
        "tool": "feederrestore",
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "solver": {"backend": cfg.backend or os.environ.get(ENV_BACKEND) or "highs",
                   "time_limit": cfg.time_limit, "gap": cfg.gap},
        "seed": cfg.seed,
        "network": str(cfg.network),
        "network_hash": model.content_hash if model is not None else None,
        "scenario": str(cfg.scenario),
        "flags": {"no_dg": cfg.no_dg, "stage1_only": cfg.stage1_only, "replay_only": cfg.replay_only,
                  "emit_lp": cfg.emit_lp, "adapt": cfg.adapt},
        "limits": {"v_min": cfg.v_min, "v_max": cfg.v_max, "feeder_loading_cap": cfg.feeder_loading_cap},
        "timings_s": timings,
        **extra,
    }


def _load_inputs(cfg: RunConfig):
    model = load_network(cfg.network)
    scenario = load_scenario(cfg.scenario, model)
    if cfg.cycle_cache is not None:
        if cfg.cycle_cache.exists() and load_cycle_cache(model, cfg.cycle_cache) is not None:
            logger.info("using cycle cache %s", cfg.cycle_cache)
        else:
            save_cycle_cache(model, cached_cycles(model), cfg.cycle_cache)
    return model, scenario


def _replay_only(cfg: RunConfig, model, scenario, timings) -> int:
    path = cfg.sequence or cfg.out_dir / "sequence.json"
    t0 = time.perf_counter()
    try:
        with open(path) as fh:
            seq, taps, caps = sequence_from_dict(json.load(fh), model)
    except (OSError, json.JSONDecodeError, SequenceFormatError) as exc:
        doc = {"schema_version": 1, "ok": False, "replay": None, "errors": [f"unreadable sequence file: {exc}"]}
        write_json(cfg.out_dir / "validation_report.json", doc)
        write_json(cfg.out_dir / "run_metadata.json", _metadata(cfg, model, timings, {}))
        logger.error("replay failed: %s", exc)
        return EXIT_VALIDATION
    rep = replay_sequence(model, scenario, seq, cfg.v_min ** 2, cfg.v_max ** 2, taps, caps)
    timings["replay"] = time.perf_counter() - t0
    doc = {"schema_version": 1, "ok": rep.ok, "replay": rep.to_dict(), "errors": []}
    write_json(cfg.out_dir / "validation_report.json", doc)
    write_json(cfg.out_dir / "run_metadata.json", _metadata(cfg, model, timings, {"sequence_file": str(path)}))
    return EXIT_OK if rep.ok else EXIT_VALIDATION


def run_restore(cfg: RunConfig) -> int:
    """Solve, validate and write reports; returns the process exit code."""
    timings: dict[str, float] = {}
    try:
        cfg.validate()
        model, scenario = _load_inputs(cfg)
        s1opts = cfg.stage1_options()
        s2opts = cfg.stage2_options(s1opts)
    except (OSError, json.JSONDecodeError, NetworkValidationError, ConfigError, ValueError) as exc:
        logger.error("input error: %s", exc)
        return EXIT_INPUT
    if cfg.replay_only:
        return _replay_only(cfg, model, scenario, timings)

    if cfg.emit_lp:
        build_stage1(model, scenario, s1opts).milp.write_lp(cfg.out_dir / "stage1.lp")
    t0 = time.perf_counter()
    try:
        plan = plan_restoration(model, scenario, s1opts, s2opts, adapt=cfg.adapt, stage1_only=cfg.stage1_only)
    except Stage1Infeasible as exc:
        write_json(cfg.out_dir / "stage1_report.json", {"schema_version": 1, "status": "infeasible",
                                                        "cause": exc.cause, "message": str(exc)})
        logger.error("%s", exc)
        return EXIT_STAGE1_INFEASIBLE
    except Stage2Infeasible as exc:
        write_json(cfg.out_dir / "validation_report.json", {"schema_version": 1, "ok": False,
                                                            "stage2": {"status": "infeasible", "cause": exc.cause,
                                                                       "message": str(exc)}})
        logger.error("%s", exc)
        return EXIT_STAGE2_INFEASIBLE
    except (Stage1Error, Stage2Error) as exc:
        write_json(cfg.out_dir / "validation_report.json", {"schema_version": 1, "ok": False,
                                                            "errors": [str(exc)]})
        logger.error("%s", exc)
        return EXIT_VALIDATION
    except SolverError as exc:
        logger.error("solver failure: %s", exc)
        return EXIT_SOLVER
    timings["plan"] = time.perf_counter() - t0
    s1 = plan.stage1
    timings["stage1_solver"] = s1.solve_info.get("wall_time", 0.0)
    write_json(cfg.out_dir / "stage1_report.json", stage1_report(model, s1))

    flow = solution_flow(model, s1)
    s1_viol = [str(v) for v in check_limits(flow, model, s1opts.u_min, s1opts.u_max)]
    validation = {"schema_version": 1,
                  "stage1": {"ok": bool(s1.verification.get("ok")) and not s1_viol,
                             "radial": s1.verification.get("radial"), "limit_violations": s1_viol}}
    ok = validation["stage1"]["ok"]
    if plan.sequence is not None:
        seq = plan.sequence
        doc = sequence_to_dict(seq, s1.taps, s1.caps, model.name)
        write_json(cfg.out_dir / "sequence.json", doc)
        write_sequence_csv(cfg.out_dir / "sequence.csv", seq)
        if cfg.emit_lp:
            built = build_stage2(model, scenario, s1, s2opts, settle=seq.settle_steps)
            built.milp.write_lp(cfg.out_dir / "stage2.lp")
        t1 = time.perf_counter()
        # replay the file as written, so the artifact itself is what gets validated
        with open(cfg.out_dir / "sequence.json") as fh:
            seq_rt, taps, caps = sequence_from_dict(json.load(fh), model)
        rep = replay_sequence(model, scenario, seq_rt, s1opts.u_min, s1opts.u_max, taps, caps)
        timings["replay"] = time.perf_counter() - t1
        write_voltage_csv(cfg.out_dir / "step_voltages.csv", model, rep.voltages)
        validation["stage2"] = {"ok": bool(seq.verification.get("ok")) and rep.ok,
                                "contract": seq.verification.get("contract", []),
                                "linear_limit_violations": seq.verification.get("limit_violations", []),
                                "replay": rep.to_dict()}
        ok = ok and validation["stage2"]["ok"]
    validation["ok"] = ok
    write_json(cfg.out_dir / "validation_report.json", validation)
    w = s1.weights
    extra = {"weights": {"alpha": w.alpha, "beta": w.beta, "gamma": w.gamma, "epsilon": w.epsilon,
                         "load_quantum": w.quantum},
             "attempts": plan.attempts, "derate": plan.derate, "voltage_margin": plan.voltage_margin,
             "dg_derate": plan.dg_derate,
             "settle_steps": plan.sequence.settle_steps if plan.sequence else None}
    write_json(cfg.out_dir / "run_metadata.json", _metadata(cfg, model, timings, extra))
    return EXIT_OK if ok else EXIT_VALIDATION


def run_compare(cfg: RunConfig) -> int:
    """Optimal vs naive (all opens, then all closes) ordering on the same horizon."""
    try:
        cfg.validate()
        model, scenario = _load_inputs(cfg)
        s1opts = cfg.stage1_options()
        s2opts = cfg.stage2_options(s1opts)
    except (OSError, json.JSONDecodeError, NetworkValidationError, ConfigError, ValueError) as exc:
        logger.error("input error: %s", exc)
        return EXIT_INPUT
    try:
        plan = plan_restoration(model, scenario, s1opts, s2opts, adapt=cfg.adapt)
    except Stage1Infeasible as exc:
        logger.error("%s", exc)
        return EXIT_STAGE1_INFEASIBLE
    except Stage2Infeasible as exc:
        logger.error("%s", exc)
        return EXIT_STAGE2_INFEASIBLE
    except (Stage1Error, Stage2Error) as exc:
        logger.error("%s", exc)
        return EXIT_VALIDATION
    except SolverError as exc:
        logger.error("solver failure: %s", exc)
        return EXIT_SOLVER
    optimal = plan.sequence
    naive = None
    naive_error = None
    try:
        naive = solve_stage2(model, scenario, plan.stage1, s2opts, fixed_order=naive_order(plan.stage1),
                             settle=optimal.settle_steps)
    except Stage2Infeasible as exc:
        naive_error = f"naive ordering infeasible ({exc.cause})"
        logger.warning("%s", naive_error)
    doc = comparison_report(model, optimal, naive, naive_error)
    write_json(cfg.out_dir / "comparison.json", doc)
    write_comparison_csv(cfg.out_dir / "comparison.csv", optimal, naive)
    write_json(cfg.out_dir / "stage1_report.json", stage1_report(model, plan.stage1))
    write_json(cfg.out_dir / "sequence.json", sequence_to_dict(optimal, plan.stage1.taps, plan.stage1.caps,
                                                                model.name))
    if naive is not None:
        write_json(cfg.out_dir / "naive_sequence.json", sequence_to_dict(naive, plan.stage1.taps,
                                                                          plan.stage1.caps, model.name))
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing

def _add_run_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("network", type=Path)
    p.add_argument("scenario", type=Path)
    p.add_argument("-o", "--out", type=Path, required=True, help="output directory")
    p.add_argument("--v-min", type=float, default=V_MIN_DEFAULT, help="minimum voltage (pu)")
    p.add_argument("--v-max", type=float, default=V_MAX_DEFAULT, help="maximum voltage (pu)")
    p.add_argument("--feeder-loading-cap", type=float, default=1.0)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--substeps", type=int, default=5)
    p.add_argument("--settle-steps", type=int, default=0)
    p.add_argument("--max-settle-steps", type=int, default=4)
    p.add_argument("--time-limit", type=float, default=None, help="per-solve time limit (s)")
    p.add_argument("--gap", type=float, default=1e-6, help="relative MIP gap")
    p.add_argument("--no-adapt", action="store_true", help="do not re-solve stage 1 when stage 2 is infeasible")
    p.add_argument("--cycle-cache", type=Path, default=None)
    p.add_argument("--seed", type=int, default=None, help="recorded in run metadata")


def _config(args) -> RunConfig:
    return RunConfig(
        network=args.network, scenario=args.scenario, out_dir=args.out,
        sequence=getattr(args, "sequence", None), cycle_cache=args.cycle_cache,
        v_min=args.v_min, v_max=args.v_max, feeder_loading_cap=args.feeder_loading_cap,
        alpha=args.alpha, beta=args.beta, gamma=args.gamma, substeps=args.substeps,
        settle_steps=args.settle_steps, max_settle_steps=args.max_settle_steps,
        time_limit=args.time_limit, gap=args.gap, adapt=not args.no_adapt, seed=args.seed,
        no_dg=getattr(args, "no_dg", False), stage1_only=getattr(args, "stage1_only", False),
        replay_only=getattr(args, "replay_only", False), emit_lp=getattr(args, "emit_lp", False),
    )


def _cmd_restore(args) -> int:
    try:
        cfg = _config(args)
    except ValueError as exc:
        logger.error("input error: %s", exc)
        return EXIT_INPUT
    return run_restore(cfg)


def _cmd_compare(args) -> int:
    return run_compare(_config(args))


def _cmd_synth(args) -> int:
    try:
        model = synth_multifeeder(args.feeders, args.buses, args.ties, args.dgs, args.seed,
                                  capacity_factor=args.capacity_factor, feeder_kw=args.feeder_kw,
                                  capacitors=args.capacitors, regulators=args.regulators,
                                  clpu=not args.no_clpu)
    except ValueError as exc:
        logger.error("input error: %s", exc)
        return EXIT_INPUT
    save_network(model, args.out)
    if args.scenario_out:
        doc = {**scenario_to_dict(_default_scenario(model, args.trip_feeder)), "description":
               f"head breaker of feeder {args.trip_feeder} tripped"}
        with open(args.scenario_out, "w") as fh:
            json.dump(doc, fh, indent=1, sort_keys=True)
    print(f"{model.name}: {len(model.buses)} buses, {len(model.edges)} edges -> {args.out}")
    return EXIT_OK


def _default_scenario(model, feeder: int):
    from .netmodel import FaultScenario
    head = f"S{feeder}_01"
    if head not in model.edge:
        raise ValueError(f"no head breaker {head}")
    return FaultScenario(tripped_switches=frozenset({head}))


def _cmd_cycles(args) -> int:
    try:
        model = load_network(args.network)
    except (OSError, json.JSONDecodeError, NetworkValidationError, ValueError) as exc:
        logger.error("input error: %s", exc)
        return EXIT_INPUT
    cycles = cached_cycles(model)
    save_cycle_cache(model, cycles, args.out)
    print(f"{len(cycles)} cycles -> {args.out}")
    return EXIT_OK


def _cmd_oracle(args) -> int:
    try:
        model = load_network(args.network)
        scenario = load_scenario(args.scenario, model)
    except (OSError, json.JSONDecodeError, NetworkValidationError, ValueError) as exc:
        logger.error("input error: %s", exc)
        return EXIT_INPUT
    opts = Stage1Options(allow_dg_islanding=not args.no_dg)
    try:
        orc = brute_force_oracle(model, scenario, opts, cap=args.cap)
    except OracleCapExceeded as exc:
        logger.error("%s", exc)
        return EXIT_INPUT
    sol = solve_stage1(model, scenario, opts)
    doc = {"oracle_objective": orc.objective, "oracle_weighted_load": orc.weighted_load,
           "milp_objective": sol.objective, "milp_weighted_load": sol.weighted_load,
           "states_evaluated": orc.evaluated,
           "match": abs(orc.weighted_load - sol.weighted_load) < 1e-6
           and abs(orc.objective - sol.objective) < 1e-6 * max(1.0, abs(orc.objective))}
    print(json.dumps(doc, indent=1, sort_keys=True))
    return EXIT_OK if doc["match"] else EXIT_VALIDATION


def _cmd_pfcheck(args) -> int:
    try:
        model = load_network(args.network)
    except (OSError, json.JSONDecodeError, NetworkValidationError, ValueError) as exc:
        logger.error("input error: %s", exc)
        return EXIT_INPUT
    state = TopologyState.normal(model)
    loads = settled_loads(model, {b.id: args.loading for b in model.buses if b.has_load})
    lin = linear_pf(model, state, loads)
    swp = sweep_pf(model, state, loads)
    dv = max(float(np.max(np.abs(lin.V[b] - swp.V[b]))) for b in lin.energized)
    hl, hs = head_apparent_power(model, lin), head_apparent_power(model, swp)
    dh = max((abs(hl[e] - hs[e]) / hs[e] for e in hs if hs[e] > 0), default=0.0)
    doc = {"loading": args.loading, "max_voltage_error_pu": dv, "max_head_flow_error": dh,
           "min_voltage_linear": lin.min_voltage(model), "min_voltage_sweep": swp.min_voltage(model),
           "sweep_iterations": swp.iterations}
    print(json.dumps(doc, indent=1, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="feederrestore", description="Two-stage feeder service restoration")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("restore", help="solve stage 1 and stage 2, validate and write reports")
    _add_run_args(p)
    p.add_argument("--no-dg", action="store_true", help="do not form DG islands")
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--stage1-only", action="store_true")
    mode.add_argument("--replay-only", action="store_true", help="re-validate an existing sequence file")
    p.add_argument("--emit-lp", action="store_true", help="also write the MILPs in LP format")
    p.add_argument("--sequence", type=Path, default=None, help="sequence file for --replay-only")
    p.set_defaults(func=_cmd_restore)

    p = sub.add_parser("compare", help="optimal vs naive switching order")
    _add_run_args(p)
    p.set_defaults(func=_cmd_compare)

    p = sub.add_parser("synth", help="write a synthetic multi-feeder network")
    p.add_argument("-o", "--out", type=Path, required=True)
    p.add_argument("--scenario-out", type=Path, default=None)
    p.add_argument("--trip-feeder", type=int, default=1)
    p.add_argument("--feeders", type=int, default=2)
    p.add_argument("--buses", type=int, default=10, help="buses per feeder")
    p.add_argument("--ties", type=int, default=1)
    p.add_argument("--dgs", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--capacity-factor", type=float, default=1.6)
    p.add_argument("--feeder-kw", type=float, default=1500.0)
    p.add_argument("--capacitors", type=int, default=0)
    p.add_argument("--regulators", type=int, default=0)
    p.add_argument("--no-clpu", action="store_true")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("cycles", help="enumerate cycles and write a cycle cache")
    p.add_argument("network", type=Path)
    p.add_argument("-o", "--out", type=Path, required=True)
    p.set_defaults(func=_cmd_cycles)

    p = sub.add_parser("oracle", help="check stage 1 against exhaustive enumeration")
    p.add_argument("network", type=Path)
    p.add_argument("scenario", type=Path)
    p.add_argument("--cap", type=int, default=20)
    p.add_argument("--no-dg", action="store_true")
    p.set_defaults(func=_cmd_oracle)

    p = sub.add_parser("pfcheck", help="compare the linear and nonlinear power flow")
    p.add_argument("network", type=Path)
    p.add_argument("--loading", type=float, default=1.0)
    p.set_defaults(func=_cmd_pfcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    return int(args.func(args))


if __name__ == "__main__":
    sys.exit(main())
