"""Command-line interface.

Subcommands ``simulate``, ``plan``, ``benchmark``, ``world``, ``metrics``
and ``history``. Exit codes: 0 success, 1 run failure, 2 configuration error.
"""

import argparse
import json
import logging
import os

import numpy as np

from rotorguard import __version__, settings
from rotorguard.database import init_db, recent_suites
from rotorguard.dynamics import VehicleParams
from rotorguard.errors import ConfigError, PlanningError, RotorguardError
from rotorguard.minco import export_trajectory, jerk_energy
from rotorguard.params import load_params
from rotorguard.planner import PlannerLimits, Replanner, check_trajectory
from rotorguard.runlog import TIMING_COLUMNS, RunLog, compute_metrics
from rotorguard.runner import run_scenario
from rotorguard.scenario import load_scenario
from rotorguard.suite import SUITES, format_summary, run_suite
from rotorguard.world import WORLD_KINDS, WorldSpec, generate_world
from rotorguard.worldfile import import_points, load_world, save_world

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_RUN_FAILURE = 1
EXIT_CONFIG_ERROR = 2
PLAN_TIMEOUT = 120.0


def parse_point(text: str) -> tuple:
    """``"x,y,z"`` to a float triple."""
    try:
        values = tuple(float(v) for v in text.replace(" ", "").split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected x,y,z, got {text!r}") from None
    if len(values) != 3:
        raise argparse.ArgumentTypeError(f"expected three coordinates, got {text!r}")
    return values


def cmd_simulate(args) -> int:
    scenario = load_scenario(args.scenario)
    if args.seed is not None:
        scenario = scenario.with_seed(args.seed)
    out_dir = args.out or scenario.output_dir or os.path.join(settings.output_dir(), scenario.name)
    result = run_scenario(scenario, out_dir)
    print(json.dumps(result.metrics.to_dict(), indent=2))
    logger.info("Run written to %s", out_dir)
    return EXIT_OK if result.metrics.success else EXIT_RUN_FAILURE


def cmd_plan(args) -> int:
    if bool(args.world) == bool(args.points):
        raise ConfigError("plan.world", "give exactly one of --world or --points")
    if args.world:
        world = load_world(args.world)
    else:
        with open(args.points, "r", encoding="utf-8") as f:
            world = import_points(f.read(), resolution=args.resolution)
    world.reveal_all()
    params = load_params(args.params) if args.params else VehicleParams()
    limits = PlannerLimits(v_max=args.v_max).with_failure_budget(params)

    replanner = Replanner(limits)
    replanner.start()
    try:
        replanner.request(world, args.start, args.goal, fault=args.fault)
        if not replanner.wait(0, timeout=PLAN_TIMEOUT):
            raise PlanningError(f"no trajectory within {PLAN_TIMEOUT:.0f} s")
        traj, _ = replanner.latest()
        if traj is None:
            raise replanner.last_error or PlanningError("planner returned nothing")
    finally:
        replanner.stop()

    check = check_trajectory(traj, world, limits, args.fault)
    segments, samples = export_trajectory(traj, args.out)
    summary = {
        "segments": traj.segment_count,
        "duration": traj.duration,
        "jerk_energy": jerk_energy(traj),
        "max_speed": check.max_speed,
        "max_accel": check.max_accel,
        "violations": check.violations,
        "min_clearance": check.min_clearance,
        "accepted": check.ok,
        "segments_file": segments,
        "samples_file": samples,
    }
    print(json.dumps(summary, indent=2))
    return EXIT_OK if check.ok else EXIT_RUN_FAILURE


def cmd_benchmark(args) -> int:
    init_db()
    out_dir = args.out or os.path.join(settings.output_dir(), args.suite)
    result = run_suite(args.suite, args.reps, args.seed, out_dir, workers=args.workers)
    print(format_summary(result), end="")
    errored = [o for o in result.outcomes if o.error]
    if errored:
        logger.error("%d run(s) ended with an error; see %s", len(errored), out_dir)
        return EXIT_RUN_FAILURE
    return EXIT_OK


def cmd_world(args) -> int:
    spec = WorldSpec(kind=args.kind, size=args.size, resolution=args.resolution, density=args.density, seed=args.seed)
    world = generate_world(spec)
    path = save_world(world, args.out)
    logger.info("World written to %s (%d occupied cells)", path, int(np.count_nonzero(world.truth)))
    return EXIT_OK


def cmd_metrics(args) -> int:
    scenario = load_scenario(args.scenario)
    log = RunLog.read_csv(args.log)
    if log.seed != scenario.seed:
        scenario = scenario.with_seed(log.seed)
    timing = None
    if args.timing:
        timing = RunLog.read_csv(args.timing, required=TIMING_COLUMNS)
    metrics = compute_metrics(log, scenario, timing)
    print(json.dumps(metrics.to_dict(), indent=2))
    return EXIT_OK if metrics.success else EXIT_RUN_FAILURE


def cmd_history(args) -> int:
    if args.limit < 1:
        raise ConfigError("history.limit", f"must be at least 1, got {args.limit}")
    init_db(args.db)
    suites = recent_suites(limit=args.limit)
    if not suites:
        logger.info("No benchmark suites recorded yet")
    print(json.dumps(suites, indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rotorguard", description="Rotor-failure flight stack")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="cmd", required=True)

    sim = sub.add_parser("simulate", help="fly one scenario file")
    sim.add_argument("--scenario", required=True)
    sim.add_argument("--seed", type=int)
    sim.add_argument("--out")
    sim.set_defaults(func=cmd_simulate)

    plan = sub.add_parser("plan", help="plan a trajectory in a known map")
    plan.add_argument("--world")
    plan.add_argument("--points", help="x y z obstacle points, one per line")
    plan.add_argument("--resolution", type=float, default=0.1)
    plan.add_argument("--start", type=parse_point, required=True)
    plan.add_argument("--goal", type=parse_point, required=True)
    plan.add_argument("--fault", action="store_true", help="use the post-failure acceleration budget")
    plan.add_argument("--params", help="vehicle parameter file")
    plan.add_argument("--v-max", type=float, default=1.0)
    plan.add_argument("--out", default="trajectory")
    plan.set_defaults(func=cmd_plan)

    bench = sub.add_parser("benchmark", help="run a benchmark suite")
    bench.add_argument("--suite", required=True, choices=sorted(SUITES))
    bench.add_argument("--reps", type=int, default=20)
    bench.add_argument("--seed", type=int, default=0)
    bench.add_argument("--workers", type=int)
    bench.add_argument("--out")
    bench.set_defaults(func=cmd_benchmark)

    world = sub.add_parser("world", help="generate a world file")
    world.add_argument("--kind", choices=WORLD_KINDS, default="forest")
    world.add_argument("--size", type=parse_point, default=(12.0, 8.0, 2.5))
    world.add_argument("--resolution", type=float, default=0.1)
    world.add_argument("--density", type=float, default=0.15)
    world.add_argument("--seed", type=int, default=0)
    world.add_argument("--out", required=True)
    world.set_defaults(func=cmd_world)

    metrics = sub.add_parser("metrics", help="recompute metrics from a written log")
    metrics.add_argument("--log", required=True)
    metrics.add_argument("--scenario", required=True)
    metrics.add_argument("--timing")
    metrics.set_defaults(func=cmd_metrics)

    history = sub.add_parser("history", help="list recent benchmark suites from the ledger")
    history.add_argument("--limit", type=int, default=20)
    history.add_argument("--db", help="ledger file; defaults to ROTORGUARD_DB")
    history.set_defaults(func=cmd_history)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        logger.error("Configuration error: %s", e)
        return EXIT_CONFIG_ERROR
    except (RotorguardError, OSError) as e:
        logger.error("%s failed: %s", args.cmd, e)
        return EXIT_RUN_FAILURE
