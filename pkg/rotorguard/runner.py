"""Closed-loop scenario runs.

One run wires the pieces together at the control rate::

    odometry + RPM thrust estimate -> NMPC -> simulator -> filters -> FDD

with the mission reference sampled from a trajectory, and, for navigation
missions, the known map revealed and the trajectory replanned on the way.
"""

import csv
import json
import logging
import math
import os
import time as walltime
from dataclasses import dataclass, field

import numpy as np

from rotorguard.dynamics import VehicleState, thrust_from_rpm
from rotorguard.errors import ConfigError, PlanningError, RunDivergedError
from rotorguard.fdd import FaultDetector, FaultReport, Stage
from rotorguard.minco import PiecewiseTrajectory, export_trajectory, minimum_jerk_through, rest_boundary
from rotorguard.nmpc import NmpcController, reference_from_trajectory
from rotorguard.pathsearch import reachable_subgoal
from rotorguard.planner import PlannerLimits, plan_trajectory
from rotorguard.runlog import MECHANISM_CODES, TIMING_COLUMNS, RunLog, RunMetrics, compute_metrics
from rotorguard.scenario import Scenario, write_scenario
from rotorguard.sim import SensorFilters, Simulator
from rotorguard.world import OccupancyWorld, generate_world, path_is_clear, reveal, truth_clearance
from rotorguard.worldfile import load_world

logger = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e3
REPLAN_PERIOD = 1.0
GOAL_TOLERANCE = 0.3
LEMNISCATE_SAMPLES = 4000


@dataclass(frozen=True)
class Hold:
    """Reference that stays at one point."""

    position: np.ndarray
    duration: float = 0.0

    def evaluate(self, t: float, order: int = 0) -> np.ndarray:
        return np.array(self.position, dtype=float) if order == 0 else np.zeros(3)


class Shifted:
    """A trajectory started at ``offset`` seconds of run time."""

    def __init__(self, trajectory: PiecewiseTrajectory, offset: float):
        self.trajectory = trajectory
        self.offset = offset
        self.duration = offset + trajectory.duration

    def evaluate(self, t: float, order: int = 0) -> np.ndarray:
        local = float(np.clip(t - self.offset, 0.0, self.trajectory.duration))
        return self.trajectory.evaluate(local, order)

    def state(self, t: float) -> np.ndarray:
        """Position, velocity and acceleration rows for use as a boundary block."""
        return np.vstack([self.evaluate(t, order) for order in range(3)])


def reference_position(reference, t: float) -> np.ndarray:
    return reference.evaluate(min(t, reference.duration), 0)


def lemniscate_trajectory(center, size, speed: float, laps: float = 1.0, ramp: float = 2.0,
                          knot_period: float = 0.25) -> PiecewiseTrajectory:
    """Figure-eight ``x = A sin(th), y = B sin(2 th), z = C sin(th)`` around ``center``.

    ``size`` is the full extent of the box. The phase accelerates linearly
    over ``ramp`` seconds, cruises at the rate giving ``speed`` on average
    and decelerates back to rest; the result is fitted with a minimum-jerk
    spline through knots every ``knot_period`` seconds.
    """
    center = np.asarray(center, dtype=float)
    half = np.asarray(size, dtype=float) / 2.0

    def curve(theta):
        theta = np.asarray(theta, dtype=float)
        return center + np.stack([half[0] * np.sin(theta), half[1] * np.sin(2 * theta), half[2] * np.sin(theta)], axis=-1)

    grid = curve(np.linspace(0.0, 2.0 * np.pi, LEMNISCATE_SAMPLES + 1))
    lap_length = float(np.sum(np.linalg.norm(np.diff(grid, axis=0), axis=1)))
    rate = 2.0 * np.pi * speed / lap_length
    total = 2.0 * np.pi * laps
    cruise = total / rate - ramp
    if cruise < 0:
        raise ConfigError("mission.ramp", f"ramp of {ramp} s is longer than the {total / rate:.2f} s figure")
    duration = 2.0 * ramp + cruise

    def phase(t):
        t = np.asarray(t, dtype=float)
        if ramp == 0:
            return rate * t
        up = rate * t ** 2 / (2.0 * ramp)
        mid = rate * ramp / 2.0 + rate * (t - ramp)
        down = total - rate * (duration - t) ** 2 / (2.0 * ramp)
        return np.where(t < ramp, up, np.where(t < ramp + cruise, mid, down))

    knots = max(int(np.ceil(duration / knot_period)), 2)
    times = np.linspace(0.0, duration, knots + 1)
    return minimum_jerk_through(curve(phase(times)), np.diff(times))


def waypoint_trajectory(start, waypoints, speed: float) -> PiecewiseTrajectory:
    """Rest-to-rest spline through the waypoints; end segments get extra time to accelerate."""
    points = np.vstack([np.asarray(start, dtype=float), np.asarray(waypoints, dtype=float)])
    lengths = np.linalg.norm(np.diff(points, axis=0), axis=1)
    durations = np.maximum(lengths / speed, 0.5)
    durations[0] *= 1.5
    durations[-1] *= 1.5
    return minimum_jerk_through(points, durations)


def build_world(scenario: Scenario) -> OccupancyWorld | None:
    if scenario.world_file:
        world = load_world(scenario.world_file)
    elif scenario.world is not None:
        world = generate_world(scenario.world)
    else:
        return None
    if scenario.mission.kind != "navigate":
        world.reveal_all()
    return world


def start_position(scenario: Scenario, world: OccupancyWorld | None) -> np.ndarray:
    mission = scenario.mission
    if mission.start is not None:
        start = np.array(mission.start, dtype=float)
    elif world is not None and world.start is not None:
        start = np.array(world.start, dtype=float)
    else:
        start = np.array([0.0, 0.0, mission.height])
    if mission.kind == "takeoff":
        start[2] = 0.0
    return start


def mission_reference(scenario: Scenario, start: np.ndarray):
    """Reference for the missions that do not replan."""
    mission = scenario.mission
    if mission.kind == "takeoff":
        top = start + np.array([0.0, 0.0, mission.climb_height])
        return minimum_jerk_through([start, top], [mission.climb_time])
    if mission.kind == "lemniscate":
        return lemniscate_trajectory(start, mission.size, mission.speed, mission.laps, mission.ramp, mission.knot_period)
    if mission.kind == "waypoints":
        return waypoint_trajectory(start, mission.waypoints, mission.speed)
    return Hold(start)


class Navigator:
    """Reveal and replan toward a goal in a partially known world.

    Runs synchronously inside the control loop. A replan happens when the
    controller latches a fault, when newly known cells make the remaining
    reference unsafe, or, while the goal is still out of reach, when the map
    has changed and the last plan is at least ``REPLAN_PERIOD`` old.
    """

    def __init__(self, world: OccupancyWorld, goal, limits: PlannerLimits, reveal_radius: float):
        self.world = world
        self.goal = np.asarray(goal, dtype=float)
        self.limits = limits
        self.reveal_radius = reveal_radius
        self.reference = None
        self.target: np.ndarray | None = None
        self.replans = 0
        self.failures = 0
        self.fault = False
        self._last_plan = -math.inf
        self._dirty = False

    @property
    def targets_goal(self) -> bool:
        return self.target is not None and np.linalg.norm(self.target - self.goal) < GOAL_TOLERANCE

    def start(self, position, time: float) -> float:
        reveal(self.world, position, self.reveal_radius)
        self.reference = Hold(np.asarray(position, dtype=float))
        return self._plan(time, rest_boundary(position))

    def update(self, time: float, position, fault: bool) -> float:
        """Reveal around ``position`` and replan if needed; returns planning milliseconds."""
        changed = reveal(self.world, position, self.reveal_radius)
        self._dirty |= changed > 0
        reason = None
        if fault and not self.fault:
            self.fault = True
            reason = "fault"
        elif changed and not self._remaining_clear(time):
            reason = "blocked"
        elif self._dirty and not self.targets_goal and time - self._last_plan >= REPLAN_PERIOD:
            reason = "frontier"
        if reason is None:
            return 0.0
        logger.info("t=%.2f replanning (%s)", time, reason)
        return self._plan(time, self._head(time))

    def _head(self, time: float) -> np.ndarray:
        if isinstance(self.reference, Shifted):
            return self.reference.state(time)
        return rest_boundary(self.reference.evaluate(time, 0))

    def _remaining_clear(self, time: float) -> bool:
        if not isinstance(self.reference, Shifted):
            return True
        times = np.arange(time, self.reference.duration, 0.1)
        if len(times) == 0:
            return True
        samples = np.array([self.reference.evaluate(t, 0) for t in times])
        return path_is_clear(self.world, samples, self.limits.safe_distance - 0.05)

    def _plan(self, time: float, head: np.ndarray) -> float:
        started = walltime.perf_counter()
        self._last_plan = time
        self._dirty = False
        start = head[0]
        try:
            try:
                target = self.goal
                traj = plan_trajectory(self.world, start, target, self.limits, self.fault, head=head)
            except PlanningError:
                target = reachable_subgoal(self.world, start, self.goal, self.limits.safe_distance)
                if np.linalg.norm(target - start) < self.world.resolution:
                    raise
                traj = plan_trajectory(self.world, start, target, self.limits, self.fault, head=head)
        except PlanningError as e:
            self.failures += 1
            logger.warning("t=%.2f planning failed, keeping the current reference: %s", time, e)
            return (walltime.perf_counter() - started) * 1000.0
        self.reference = Shifted(traj, time)
        self.target = target
        self.replans += 1
        return (walltime.perf_counter() - started) * 1000.0


@dataclass
class RunResult:
    scenario: Scenario
    metrics: RunMetrics
    log: RunLog
    timing: RunLog
    reports: list = field(default_factory=list)
    events: list = field(default_factory=list)
    paths: dict = field(default_factory=dict)


def estimated_thrusts(rpm_meas, params, fault_rotor: int | None) -> np.ndarray:
    """Thrust estimate from rotor speed telemetry; a latched rotor counts as zero."""
    thrusts = np.clip(thrust_from_rpm(rpm_meas, params), 0.0, params.thrust_max)
    if fault_rotor is not None:
        thrusts[fault_rotor] = 0.0
    return thrusts


def _row(time, state, ref_pos, command, effectiveness, frame, detector, stats, clearance, replans) -> dict:
    latched: FaultReport | None = detector.latched
    snap = detector.snapshot
    row = {"time": time, "stage": 0.0 if detector.stage is Stage.TAKEOFF else 1.0}
    for axis, name in enumerate("xyz"):
        row[f"pos_{name}"] = state.position[axis]
        row[f"vel_{name}"] = state.velocity[axis]
        row[f"rate_{name}"] = state.rates[axis]
        row[f"ref_{name}"] = ref_pos[axis]
        row[f"accel_{name}"] = frame.accel_meas[axis]
        row[f"gyro_{name}"] = frame.gyro_meas[axis]
    for i, name in enumerate("wxyz"):
        row[f"q_{name}"] = state.attitude[i]
    for i in range(4):
        row[f"thrust_{i}"] = state.thrusts[i]
        row[f"cmd_{i}"] = command[i]
        row[f"eff_{i}"] = effectiveness[i]
        row[f"rpm_{i}"] = frame.rpm_meas[i]
        row[f"motor_idx_{i}"] = snap.motor[i]
        row[f"prop_idx_{i}"] = snap.propeller[i]
    row["fault_rotor"] = latched.rotor if latched else -1
    row["fault_mechanism"] = MECHANISM_CODES[latched.mechanism] if latched else 0
    row["clearance"] = clearance
    row["nmpc_iterations"] = stats.iterations if stats else 0
    row["nmpc_kkt"] = stats.kkt if stats else float("nan")
    row["nmpc_degraded"] = 1.0 if stats and stats.degraded else 0.0
    row["replans"] = replans
    return row


def run_scenario(scenario: Scenario, out_dir: str | None = None) -> RunResult:
    """Fly one scenario.

    Args:
        scenario: Validated scenario.
        out_dir: Directory for ``log.csv``, ``timing.csv``, ``events.csv``,
            ``metrics.json`` and the copied scenario; nothing is written when
            None.

    Returns:
        The RunResult. A divergent run is returned as failed with its
        diagnostic rather than raised.
    """
    params = scenario.params
    mission = scenario.mission
    dt = scenario.control_dt
    logger.info("Running %s (%s, seed %d, %.1f s)", scenario.name, mission.kind, scenario.seed, scenario.duration)

    world = build_world(scenario)
    start = start_position(scenario, world)
    navigator = None
    if mission.kind == "navigate":
        goal = mission.goal if mission.goal is not None else world.goal
        if goal is None:
            raise ConfigError("mission.goal", "navigate mission without a goal")
        navigator = Navigator(world, goal, scenario.planner_limits(), mission.reveal_radius)
        reference = None
    else:
        reference = mission_reference(scenario, start)

    initial = VehicleState.hover(params, start)
    sim = Simulator(
        params,
        initial,
        scenario.failures,
        scenario.noise,
        scenario.seed,
        scenario.physics_rate,
        scenario.control_rate,
        grounded=mission.kind == "takeoff",
    )
    filters = SensorFilters(dt, scenario.fdd.accel_cutoff, scenario.fdd.ang_accel_cutoff, params.gravity)
    detector = FaultDetector(scenario.fdd, params, dt, initial.thrusts)
    detector.set_stage(scenario.stage_at(0.0))
    controller = NmpcController(params, scenario.controller)
    log = RunLog(seed=scenario.seed, meta={"scenario": scenario.name})
    timing = RunLog(TIMING_COLUMNS, seed=scenario.seed, meta={"scenario": scenario.name})
    reveal_every = max(1, int(round(mission.reveal_period * scenario.control_rate)))

    def clearance_of(position) -> float:
        return float(truth_clearance(world, position[None, :])[0]) if world is not None else float("nan")

    frame = sim.sense()
    filters.update(frame)
    plan_ms = 0.0
    if navigator is not None:
        plan_ms = navigator.start(start, 0.0)
        reference = navigator.reference
    log.append(_row(0.0, sim.state, reference_position(reference, 0.0), initial.thrusts, sim.effectiveness,
                    frame, detector, None, clearance_of(sim.state.position), 0))
    timing.append({"time": 0.0, "nmpc_ms": 0.0, "plan_ms": plan_ms})

    error = None
    ticks = int(round(scenario.duration * scenario.control_rate))
    try:
        for k in range(ticks):
            t = sim.time
            detector.set_stage(scenario.stage_at(t))
            plan_ms = 0.0
            if navigator is not None and k > 0 and k % reveal_every == 0:
                plan_ms = navigator.update(t, frame.odom_position, controller.fault is not None)
                reference = navigator.reference

            estimate = frame.odometry_state(estimated_thrusts(frame.rpm_meas, params, controller.fault_rotor))
            refs = reference_from_trajectory(reference, t, scenario.controller, params, controller.fault)
            command, _, stats = controller.compute(estimate, refs, t)

            frame = sim.advance(command.thrusts)
            filtered = filters.update(frame)
            for report in detector.update(frame, filtered, command.thrusts):
                controller.set_fault(report)

            state = sim.state
            if np.linalg.norm(state.position) > DIVERGENCE_LIMIT:
                raise RunDivergedError(f"vehicle left the {DIVERGENCE_LIMIT:.0f} m envelope at t={sim.time:.3f}")
            log.append(_row(sim.time, state, reference_position(reference, sim.time), command.thrusts,
                            sim.effectiveness, frame, detector, stats, clearance_of(state.position),
                            navigator.replans if navigator else 0))
            timing.append({"time": sim.time, "nmpc_ms": stats.solve_ms, "plan_ms": plan_ms})
    except RunDivergedError as e:
        error = str(e)
        logger.error("Run %s (seed %d) diverged: %s", scenario.name, scenario.seed, e)

    metrics = compute_metrics(log, scenario, timing, error)
    events = [("injection", e.time, e.rotor, e.mode.value, e.severity) for e in sim.applied_events]
    events += [("report", r.time, r.rotor, f"{r.fault_class.value}/{r.mechanism}", r.index_value) for r in detector.reports]
    events += [("degradation", t, rotor, "propeller_index", float("nan")) for rotor, t in detector.degradations.items()]
    result = RunResult(scenario, metrics, log, timing, list(detector.reports), events)
    logger.info(
        "Finished %s (seed %d): %s, rmse %.3f m, fdd latency %s",
        scenario.name, scenario.seed, "success" if metrics.success else "FAILED", metrics.rmse,
        f"{metrics.fdd_latency:.3f} s" if math.isfinite(metrics.fdd_latency) else "n/a",
    )
    if out_dir:
        result.paths = write_run(result, out_dir, reference)
    return result


def write_run(result: RunResult, out_dir: str, reference=None) -> dict:
    """Write a run's log, timing, events, metrics and scenario copy."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "log": result.log.write_csv(os.path.join(out_dir, "log.csv")),
        "timing": result.timing.write_csv(os.path.join(out_dir, "timing.csv")),
        "events": os.path.join(out_dir, "events.csv"),
        "metrics": os.path.join(out_dir, "metrics.json"),
        "scenario": os.path.join(out_dir, "scenario.ini"),
    }
    with open(paths["events"], "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["kind", "time", "rotor", "detail", "value"])
        for kind, t, rotor, detail, value in sorted(result.events, key=lambda e: e[1]):
            writer.writerow([kind, format(t, ".17g"), rotor, detail, format(value, ".17g")])
    with open(paths["metrics"], "w", encoding="utf-8") as f:
        json.dump(result.metrics.to_dict(), f, indent=2)
    with open(paths["scenario"], "w", encoding="utf-8") as f:
        f.write(write_scenario(result.scenario))
    trajectory = getattr(reference, "trajectory", reference)
    if isinstance(trajectory, PiecewiseTrajectory):
        export_trajectory(trajectory, os.path.join(out_dir, "trajectory"))
        paths["trajectory"] = os.path.join(out_dir, "trajectory")
    return paths
