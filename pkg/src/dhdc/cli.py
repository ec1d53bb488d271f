"""Command-line orchestration: generate, estimate, steer, simulate, render,
compare.

Every command reads versioned JSON artifacts, writes versioned JSON (plus
CSV logs), and is idempotent given identical inputs and seed.  Exit codes:
0 full success, 2 converged with warnings, 1 failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import baselines, formats, render, scenario as scenario_mod, sim
from .dhde import EstimationConfig, EstimationError, run_dhde
from .dhds import SteeringConfig, SteeringError, run_dhds
from .exchange import WorkerPool

log = logging.getLogger("dhdc")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_WARNINGS = 2


def _setup_logging() -> None:
    level = os.environ.get("DHDC_LOG", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO,
              "debug": logging.DEBUG}
    if level not in levels:
        raise SystemExit(f"DHDC_LOG must be one of {sorted(levels)}")
    logging.basicConfig(
        level=levels[level],
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )


def _int_list(text: str) -> list:
    return [int(x) for x in text.split(",") if x]


def _common_solver_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads (default: available parallelism)")
    p.add_argument("--max-iters", type=int, default=20,
                   help="consensus iteration cap per sibling set")
    p.add_argument("--rho", type=float, default=1e3,
                   help="consensus penalty parameter")
    p.add_argument("--tol", type=float, default=1e-8,
                   help="conic solver tolerance")
    p.add_argument("--early-exit", action="store_true",
                   help="stop consensus rounds once residuals are small")
    p.add_argument("--seed", type=int, default=0)


def _estimation_config(args) -> EstimationConfig:
    return EstimationConfig(max_iters=args.max_iters, rho_Q=args.rho,
                            rho_q=args.rho, rho_phi=args.rho,
                            solver_tol=args.tol, early_exit=args.early_exit)


def _steering_config(args) -> SteeringConfig:
    return SteeringConfig(max_iters=args.max_iters, rho_u=args.rho,
                          solver_tol=args.tol, early_exit=args.early_exit)


def _write_logs(out_path: Path, prefix: str, logs: dict) -> None:
    log_dir = out_path.parent / f"{out_path.stem}_logs"
    log_dir.mkdir(parents=True, exist_ok=True)
    for key, rows in logs.items():
        if not rows:
            continue
        name = prefix + "_" + "_".join(str(k) for k in key) + ".csv"
        formats.write_convergence_csv(log_dir / name, rows)


def cmd_generate(args) -> int:
    spec = scenario_mod.GeneratorSpec(
        family=args.family, branching=_int_list(args.branching),
        seed=args.seed, horizon=args.horizon, dt=args.dt, theta=args.theta,
        max_agents=args.max_agents,
    )
    sc = scenario_mod.generate(spec)
    formats.save_scenario(sc, args.out)
    log.info("wrote scenario with %d agents to %s", sc.num_agents(), args.out)
    return EXIT_OK


def cmd_estimate(args) -> int:
    try:
        sc = formats.load_scenario(args.scenario)
    except (formats.FormatError, FileNotFoundError, ValueError) as e:
        log.error("scenario rejected: %s", e)
        return EXIT_FAILURE
    cfg = _estimation_config(args)
    out_path = Path(args.out)
    try:
        with WorkerPool(args.threads) as pool:
            est = run_dhde(sc, cfg, pool)
    except EstimationError as e:
        log.error("estimation failed: %s", e)
        return EXIT_FAILURE
    out_path.parent.mkdir(parents=True, exist_ok=True)
    formats.dump_json(formats.levels_to_dict(sc, est), out_path)
    _write_logs(out_path, "estimate", est.logs)
    for w in est.warnings:
        log.warning("%s", w)
    log.info("wrote %d clique estimates to %s", len(est.initial), out_path)
    return EXIT_OK if est.converged else EXIT_WARNINGS


class _LoadedEstimate:
    """Adapter exposing a levels document like an estimation output."""

    def __init__(self, initial, target):
        self.initial = initial
        self.target = target


def cmd_steer(args) -> int:
    try:
        sc = formats.load_scenario(args.scenario)
        initial, target, _levels = formats.levels_from_dict(
            formats.load_json(args.levels))
    except (formats.FormatError, FileNotFoundError, ValueError) as e:
        log.error("input rejected: %s", e)
        return EXIT_FAILURE
    needed = [cid for cid in sc.hierarchy.cliques
              if sc.hierarchy.cliques[cid].level < sc.hierarchy.levels]
    missing = sorted(set(needed) - set(initial))
    if missing:
        log.error("levels file missing cliques %s", missing)
        return EXIT_FAILURE
    cfg = _steering_config(args)
    out_path = Path(args.out)
    try:
        with WorkerPool(args.threads) as pool:
            out = run_dhds(sc, _LoadedEstimate(initial, target), cfg, pool)
    except SteeringError as e:
        log.error("steering failed: %s", e)
        return EXIT_FAILURE
    out_path.parent.mkdir(parents=True, exist_ok=True)
    formats.dump_json(formats.policies_to_dict(sc, out), out_path)
    _write_logs(out_path, "steer", out.logs)
    for w in out.warnings:
        log.warning("%s", w)
    if out.failed:
        log.error("failed cliques: %s", sorted(out.failed))
        return EXIT_FAILURE
    log.info("wrote %d policies to %s", len(out.solutions), out_path)
    return EXIT_OK if out.converged else EXIT_WARNINGS


def cmd_simulate(args) -> int:
    if args.trials < 1:
        log.error("trials must be at least 1")
        return EXIT_FAILURE
    try:
        sc = formats.load_scenario(args.scenario)
        pol_doc = formats.policies_from_dict(formats.load_json(args.policies))
    except (formats.FormatError, FileNotFoundError, ValueError) as e:
        log.error("input rejected: %s", e)
        return EXIT_FAILURE
    leaves = sc.hierarchy.leaf_ids()
    missing = sorted(set(leaves) - set(pol_doc))
    if missing:
        log.error("policies missing for agents %s", missing)
        return EXIT_FAILURE
    policies = {a: pol_doc[a][1] for a in leaves}
    parent_moments = {}
    for a in leaves:
        parent = sc.hierarchy.cliques[a].parent
        if parent is not None and parent in pol_doc:
            parent_moments[a] = pol_doc[parent][2]
    batch = sim.rollout(sc, policies, seed=args.seed, trials=args.trials)
    report = sim.validate(batch, sc, parent_moments)
    formats.dump_json(formats.safety_to_dict(report), args.out)
    log.info("collision rate %.5f, obstacle rate %.5f",
             report.collision_rate, report.obstacle_violation_rate)
    if not all(report.checks.values()):
        log.error("validated rates failed their bounds: %s", report.checks)
        return EXIT_FAILURE
    return EXIT_OK


def cmd_render(args) -> int:
    try:
        sc = formats.load_scenario(args.scenario)
    except (formats.FormatError, FileNotFoundError, ValueError) as e:
        log.error("input rejected: %s", e)
        return EXIT_FAILURE
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.policies:
        pol_doc = formats.policies_from_dict(formats.load_json(args.policies))
        steps = _int_list(args.timesteps)
        for k in steps:
            try:
                svg = render.render_snapshot(sc, pol_doc, k)
            except ValueError as e:
                log.error("%s", e)
                return EXIT_FAILURE
            (out_dir / f"snapshot_k{k:04d}.svg").write_text(svg)
        log.info("wrote %d snapshots to %s", len(steps), out_dir)
    elif args.levels:
        initial, target, level = formats.levels_from_dict(
            formats.load_json(args.levels))
        for phase, data in (("initial", initial), ("target", target)):
            doc = {cid: (level[cid], data[cid]) for cid in data}
            svg = render.render_levels(sc, doc, phase)
            (out_dir / f"levels_{phase}.svg").write_text(svg)
        log.info("wrote level snapshots to %s", out_dir)
    else:
        log.error("render needs --policies or --levels")
        return EXIT_FAILURE
    return EXIT_OK


def _power_branching(size: int) -> list:
    branching = []
    n = size
    while n > 4:
        if n % 4 == 0:
            branching.append(4)
            n //= 4
        elif n % 2 == 0:
            branching.append(2)
            n //= 2
        else:
            raise ValueError(f"cannot factor size {size} into a hierarchy")
    branching.append(n)
    return branching[::-1]


def cmd_compare(args) -> int:
    sizes = _int_list(args.sizes)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    for m in methods:
        if m not in ("dhdc", "dcs", "ccs"):
            log.error("unknown method %s", m)
            return EXIT_FAILURE
    rows = []
    for size in sizes:
        try:
            branching = _power_branching(size)
        except ValueError as e:
            log.error("%s", e)
            return EXIT_FAILURE
        spec = scenario_mod.GeneratorSpec(
            family="power-hierarchy", branching=branching, seed=args.seed,
            horizon=args.horizon, max_agents=args.max_agents)
        sc = scenario_mod.generate(spec)
        lp = sc.level_params[sc.hierarchy.levels]
        radius = args.dcs_radius
        if radius is None:
            # cover intra-clique conflicts plus nearby cliques
            ring, _ = scenario_mod._size_levels(
                branching, scenario_mod.DEFAULT_SPACING)
            radius = 6.0 * (ring[len(branching) - 1] + lp.r)
        for method in methods:
            row = _run_compare_case(sc, method, args, radius)
            rows.append((size, method) + row)
            log.info("size %d %s: %s", size, method, row)
    formats.write_compare_csv(args.out, rows)
    return EXIT_OK


def _iterations_total(logs: dict) -> int:
    return sum(len(rows) for rows in logs.values())


def _run_compare_case(sc, method: str, args, dcs_radius: float):
    cfg = SteeringConfig(max_iters=args.max_iters, rho_u=args.rho,
                         early_exit=True)
    est_cfg = EstimationConfig(max_iters=args.max_iters, early_exit=True)
    t0 = time.perf_counter()
    try:
        with WorkerPool(args.threads) as pool:
            if method == "dhdc":
                est = run_dhde(sc, est_cfg, pool)
                out = run_dhds(sc, est, cfg, pool)
                iters = _iterations_total(est.logs) + _iterations_total(
                    out.logs)
            elif method == "ccs":
                out = baselines.solve_ccs(sc, cfg, pool, cap=args.ccs_cap)
                iters = 0
            else:
                out = baselines.solve_dcs(sc, cfg, pool,
                                          neighbor_radius=dcs_radius)
                iters = _iterations_total(out.logs)
    except baselines.CentralizedCapExceeded:
        return ("skipped", "", "", "")
    except (SteeringError, EstimationError) as e:
        log.error("%s failed: %s", method, e)
        return ("failed", "", "", "")
    wall = time.perf_counter() - t0
    if out.failed or out.skipped:
        return ("failed", repr(wall), iters, "")
    leaves = sc.hierarchy.leaf_ids()
    policies = {a: out.solutions[a].policy for a in leaves}
    batch = sim.rollout(sc, policies, seed=args.seed, trials=args.trials)
    report = sim.validate(batch, sc)
    return ("ok", repr(wall), iters, repr(report.collision_rate))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="dhdc",
        description="Hierarchical distribution estimation and covariance "
                    "steering for clustered multi-agent systems",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="emit a scenario file")
    p.add_argument("--family", required=True,
                   choices=scenario_mod.FAMILIES)
    p.add_argument("--branching", required=True,
                   help="comma-separated factors, e.g. 5,4")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--horizon", type=int, default=100)
    p.add_argument("--dt", type=float, default=0.05)
    p.add_argument("--theta", type=float, default=0.997)
    p.add_argument("--max-agents", type=int, default=10_000)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("estimate", help="bottom-up clique estimation")
    p.add_argument("--scenario", required=True)
    p.add_argument("--out", required=True)
    _common_solver_flags(p)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("steer", help="top-down distribution steering")
    p.add_argument("--scenario", required=True)
    p.add_argument("--levels", required=True)
    p.add_argument("--out", required=True)
    _common_solver_flags(p)
    p.set_defaults(func=cmd_steer)

    p = sub.add_parser("simulate", help="Monte-Carlo validation")
    p.add_argument("--scenario", required=True)
    p.add_argument("--policies", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("render", help="SVG ellipse snapshots")
    p.add_argument("--scenario", required=True)
    p.add_argument("--policies")
    p.add_argument("--levels")
    p.add_argument("--timesteps", default="0",
                   help="comma-separated steps for policy snapshots")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("compare", help="wall-time and safety sweep")
    p.add_argument("--sizes", required=True, help="e.g. 16,64,256")
    p.add_argument("--methods", default="dhdc,dcs,ccs")
    p.add_argument("--out", required=True)
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--horizon", type=int, default=20)
    p.add_argument("--ccs-cap", type=int, default=baselines.DEFAULT_CCS_CAP)
    p.add_argument("--dcs-radius", type=float, default=None)
    p.add_argument("--max-agents", type=int, default=10_000)
    _common_solver_flags(p)
    p.set_defaults(func=cmd_compare)
    return ap


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
