"""Rotor-failure-aware trajectory optimization.

The back-end takes the pruned grid path, spreads it over M quintic segments
and minimizes a weighted sum of total time, jerk energy, velocity,
acceleration and jerk limit penalties, and obstacle penalties over the
interior waypoints and the log-durations with L-BFGS-B. Gradients are exact:
penalties are differentiated at the quadrature samples and pushed through
the spline map by its adjoint.

After a rotor failure the acceleration limit switches to the budget that two
working rotors can sustain.
"""

import logging
import threading
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import minimize

from rotorguard.dynamics import VehicleParams
from rotorguard.errors import ConfigError, InfeasibleFailureError, PlanningError
from rotorguard.minco import (
    NCOEF,
    PiecewiseTrajectory,
    basis_batch,
    jerk_energy_terms,
    minco_adjoint,
    minco_map,
    rest_boundary,
)
from rotorguard.pathsearch import path_length, plan_path
from rotorguard.world import OccupancyWorld, distance_query_batch

logger = logging.getLogger(__name__)

LIMIT_TOLERANCE = 0.01
CLEARANCE_SLACK = 0.05


def failure_accel_limit(params: VehicleParams, v_max: float, gamma_a_f: float = 1.0) -> float:
    """Acceleration the vehicle can still command with one rotor lost.

    The rotor opposite the failed one is assumed unusable too, leaving
    ``2 * thrust_max``; drag at ``v_max`` is bounded by the largest drag
    coefficient.

    Args:
        params: Vehicle parameters.
        v_max: Speed limit, m/s.
        gamma_a_f: Safety factor in (0, 1].

    Returns:
        The post-failure acceleration limit in m/s^2.

    Raises:
        InfeasibleFailureError: Two rotors cannot carry the weight, or drag at
            ``v_max`` uses up the whole lateral budget. A negative budget is
            not folded into its magnitude.
    """
    if not 0 < gamma_a_f <= 1:
        raise ConfigError("planner.gamma_a_f", f"must be in (0, 1], got {gamma_a_f!r}")
    budget = 2.0 * params.thrust_max
    weight = params.weight
    if budget <= weight:
        raise InfeasibleFailureError(
            "vehicle.thrust_max",
            f"two rotors give {budget:.3f} N, not more than the {weight:.3f} N weight",
        )
    lateral = np.sqrt(budget ** 2 - weight ** 2) - max(params.drag) * v_max
    if lateral <= 0:
        raise InfeasibleFailureError(
            "planner.v_max", f"drag at {v_max} m/s exceeds the lateral thrust left after a failure"
        )
    return gamma_a_f * abs(lateral / params.mass)


@dataclass(frozen=True)
class PlannerLimits:
    """Kinematic limits, safe distance and penalty weights ``[time, jerk, limits, collision]``."""

    v_max: float = 1.0
    a_max_n: float = 10.0
    a_max_f: float | None = None
    j_max: float = 30.0
    safe_distance: float = 0.3
    gamma_a_f: float = 0.5
    weights: tuple = (10.0, 1.0, 1e4, 1e4)
    samples_per_segment: int = 16
    max_iterations: int = 300
    gtol: float = 1e-5
    segment_length: float = 2.0
    min_segments: int = 5
    speed_fraction: float = 0.6

    def __post_init__(self):
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        for name in ("v_max", "a_max_n", "j_max", "safe_distance", "segment_length", "speed_fraction"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0):
                raise ConfigError(f"planner.{name}", f"must be positive, got {value!r}")
        if not 0 < self.gamma_a_f <= 1:
            raise ConfigError("planner.gamma_a_f", f"must be in (0, 1], got {self.gamma_a_f!r}")
        if len(self.weights) != 4 or not all(w > 0 for w in self.weights):
            raise ConfigError("planner.weights", "expected four positive weights")
        if self.a_max_f is not None:
            if not self.a_max_f > 0:
                raise ConfigError("planner.a_max_f", f"must be positive, got {self.a_max_f!r}")
            if self.a_max_f > self.a_max_n:
                raise ConfigError("planner.a_max_f", "post-failure limit exceeds the nominal limit")
        if self.samples_per_segment < 1 or self.min_segments < 1:
            raise ConfigError("planner.samples_per_segment", "sample and segment counts must be positive")

    def with_failure_budget(self, params: VehicleParams) -> "PlannerLimits":
        return replace(self, a_max_f=failure_accel_limit(params, self.v_max, self.gamma_a_f))

    def accel_limit(self, fault: bool) -> float:
        if fault:
            if self.a_max_f is None:
                raise ConfigError("planner.a_max_f", "post-failure limit not resolved")
            return self.a_max_f
        return self.a_max_n


@dataclass
class CostBreakdown:
    time: float = 0.0
    jerk: float = 0.0
    limits: float = 0.0
    collision: float = 0.0

    def as_vector(self) -> np.ndarray:
        return np.array([self.time, self.jerk, self.limits, self.collision])


def _sample_times(traj: PiecewiseTrajectory, count: int) -> tuple[np.ndarray, np.ndarray]:
    fractions = np.arange(1, count + 1) / count
    return fractions, traj.durations[:, None] * fractions[None, :]


def _hinge(values: np.ndarray, limit: float):
    """Cubed hinge on squared norms and its gradient in the vectors."""
    excess = np.maximum(np.sum(values * values, axis=-1) - limit * limit, 0.0)
    return excess ** 3, (6.0 * excess ** 2)[..., None] * values


def cost_and_grad(
    waypoints,
    durations,
    world: OccupancyWorld,
    limits: PlannerLimits,
    fault: bool,
    head,
    tail,
):
    """Total penalty cost and its gradients in the waypoints and durations.

    Args:
        waypoints: ``(M-1, 3)`` interior waypoints.
        durations: ``M`` positive segment durations.
        world: Map snapshot; samples outside its bounds count as collisions.
        limits: Limits and weights.
        fault: Use the post-failure acceleration limit.
        head: Start boundary block (position, velocity, acceleration).
        tail: End boundary block.

    Returns:
        ``(J, dJ/dq, dJ/dT, CostBreakdown)``.
    """
    traj = minco_map(waypoints, durations, head, tail)
    m = traj.segment_count
    lam_t, lam_s, lam_d, lam_c = limits.weights
    fractions, times = _sample_times(traj, limits.samples_per_segment)

    rows = [basis_batch(times, order) for order in range(5)]
    values = [np.einsum("mkc,mcx->mkx", rows[order], traj.coeffs) for order in range(5)]

    energy, grad_c_s, grad_t_s = jerk_energy_terms(traj)
    breakdown = CostBreakdown(time=float(np.sum(traj.durations)), jerk=energy)

    # penalties on derivative orders 1-3 and on position (collision)
    grads = [np.zeros_like(values[0]) for _ in range(4)]
    for order, limit in ((1, limits.v_max), (2, limits.accel_limit(fault)), (3, limits.j_max)):
        penalty, grad = _hinge(values[order], limit)
        breakdown.limits += float(np.sum(penalty))
        grads[order] = lam_d * grad

    distance, _, normal = distance_query_batch(world, values[0].reshape(-1, 3))
    shortfall = np.maximum(limits.safe_distance - distance, 0.0)
    breakdown.collision = float(np.sum(shortfall ** 3))
    grads[0] = lam_c * (-3.0 * shortfall ** 2)[:, None] * normal
    grads[0] = grads[0].reshape(values[0].shape)

    grad_c = lam_s * grad_c_s
    grad_t = lam_t * np.ones(m) + lam_s * grad_t_s
    for order in range(4):
        grad_c += np.einsum("mkc,mkx->mcx", rows[order], grads[order])
        # sample times scale with the segment duration
        grad_t += np.einsum("k,mkx,mkx->m", fractions, grads[order], values[order + 1])

    total = float(limits.weights @ breakdown.as_vector())
    grad_q, grad_T = minco_adjoint(traj, grad_c, grad_t)
    return total, grad_q, grad_T, breakdown


@dataclass
class TrajectoryCheck:
    max_speed: float
    max_accel: float
    max_jerk: float
    min_clearance: float
    accel_limit: float
    ok: bool
    violations: list = field(default_factory=list)


def check_trajectory(
    traj: PiecewiseTrajectory,
    world: OccupancyWorld,
    limits: PlannerLimits,
    fault: bool,
    density: int = 4,
) -> TrajectoryCheck:
    """Post-check: limits within 1 % and clearance within 5 cm of the safe distance."""
    count = density * limits.samples_per_segment
    fractions = np.arange(count + 1) / count
    times = traj.durations[:, None] * fractions[None, :]
    speed, accel, jerk, positions = [], [], [], []
    for order, bucket in ((0, positions), (1, speed), (2, accel), (3, jerk)):
        vals = np.einsum("mkc,mcx->mkx", basis_batch(times, order), traj.coeffs).reshape(-1, 3)
        bucket.append(vals if order == 0 else np.linalg.norm(vals, axis=1))
    clearance, _, _ = distance_query_batch(world, positions[0])
    a_limit = limits.accel_limit(fault)
    report = TrajectoryCheck(
        max_speed=float(np.max(speed[0])),
        max_accel=float(np.max(accel[0])),
        max_jerk=float(np.max(jerk[0])),
        min_clearance=float(np.min(clearance)),
        accel_limit=a_limit,
        ok=True,
    )
    for name, value, limit in (
        ("speed", report.max_speed, limits.v_max),
        ("acceleration", report.max_accel, a_limit),
        ("jerk", report.max_jerk, limits.j_max),
    ):
        if value > limit * (1.0 + LIMIT_TOLERANCE):
            report.violations.append(f"{name} {value:.3f} > {limit:.3f}")
    if report.min_clearance < limits.safe_distance - CLEARANCE_SLACK:
        report.violations.append(f"clearance {report.min_clearance:.3f} < {limits.safe_distance - CLEARANCE_SLACK:.3f}")
    report.ok = not report.violations
    return report


def resample_path(path, segments: int) -> np.ndarray:
    """``segments + 1`` points spaced evenly by arc length along a polyline."""
    path = np.asarray(path, dtype=float)
    steps = np.linalg.norm(np.diff(path, axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(steps)])
    targets = np.linspace(0.0, arc[-1], segments + 1)
    return np.stack([np.interp(targets, arc, path[:, axis]) for axis in range(3)], axis=1)


def initial_guess(path, limits: PlannerLimits) -> tuple[np.ndarray, np.ndarray]:
    """Interior waypoints and durations for the optimizer's starting point."""
    length = path_length(path)
    segments = max(limits.min_segments, int(np.ceil(length / limits.segment_length)))
    points = resample_path(path, segments)
    lengths = np.linalg.norm(np.diff(points, axis=0), axis=1)
    durations = np.maximum(lengths / (limits.speed_fraction * limits.v_max), 0.1)
    return points[1:-1], durations


def _solve(q0, t0, world, limits, fault, head, tail):
    m = len(t0)

    def unpack(x):
        return x[: 3 * (m - 1)].reshape(m - 1, 3), np.exp(x[3 * (m - 1) :])

    def fun(x):
        q, durations = unpack(x)
        total, grad_q, grad_t, _ = cost_and_grad(q, durations, world, limits, fault, head, tail)
        return total, np.concatenate([grad_q.ravel(), grad_t * durations])

    x0 = np.concatenate([np.asarray(q0, dtype=float).ravel(), np.log(t0)])
    result = minimize(
        fun,
        x0,
        jac=True,
        method="L-BFGS-B",
        options={"maxiter": limits.max_iterations, "gtol": limits.gtol},
    )
    q, durations = unpack(result.x)
    logger.debug("L-BFGS-B: %d iterations, cost %.4f, %s", result.nit, result.fun, result.message)
    return q, durations


def optimize(
    path,
    world: OccupancyWorld,
    limits: PlannerLimits,
    fault: bool = False,
    head=None,
    tail=None,
) -> PiecewiseTrajectory:
    """Optimize a trajectory along a front-end path.

    Args:
        path: At least two waypoints from :func:`plan_path`.
        world: Map snapshot.
        limits: Limits and weights (``a_max_f`` resolved when ``fault``).
        fault: Apply the post-failure acceleration limit.
        head: Start boundary; defaults to rest at the first waypoint.
        tail: End boundary; defaults to rest at the last waypoint.

    Returns:
        A trajectory that passed the post-check, possibly after one
        escalation of the limit and collision weights.
    """
    path = np.asarray(path, dtype=float)
    if len(path) < 2:
        raise PlanningError("need at least two waypoints")
    head = rest_boundary(path[0]) if head is None else np.asarray(head, dtype=float)
    tail = rest_boundary(path[-1]) if tail is None else np.asarray(tail, dtype=float)

    q, durations = initial_guess(path, limits)
    current = limits
    for attempt in range(2):
        q, durations = _solve(q, durations, world, current, fault, head, tail)
        traj = minco_map(q, durations, head, tail)
        report = check_trajectory(traj, world, current, fault)
        if report.ok:
            logger.info(
                "Planned %d segments, %.2f s, peak speed %.2f m/s, min clearance %.2f m",
                traj.segment_count, traj.duration, report.max_speed, report.min_clearance,
            )
            return traj
        logger.warning("Trajectory post-check failed (attempt %d): %s", attempt + 1, "; ".join(report.violations))
        lam_t, lam_s, lam_d, lam_c = current.weights
        current = replace(current, weights=(lam_t, lam_s, 10.0 * lam_d, 10.0 * lam_c))
    raise PlanningError("trajectory violates limits after weight escalation: " + "; ".join(report.violations))


def plan_trajectory(
    world: OccupancyWorld,
    start,
    goal,
    limits: PlannerLimits,
    fault: bool = False,
    head=None,
) -> PiecewiseTrajectory:
    """Front-end search followed by back-end optimization on one map snapshot."""
    snapshot = world.snapshot()
    path = plan_path(snapshot, start, goal, limits.safe_distance)
    return optimize(path, snapshot, limits, fault, head=head)


@dataclass
class PlanRequest:
    world: OccupancyWorld
    start: np.ndarray
    goal: np.ndarray
    fault: bool = False
    head: np.ndarray | None = None


class Replanner:
    """Single-slot background planner.

    Requests replace any request still waiting; results are published under
    a lock so readers see either the previous or the new trajectory.
    """

    def __init__(self, limits: PlannerLimits):
        self.limits = limits
        self._thread: threading.Thread | None = None
        self._stop_event = threading.Event()
        self._wake = threading.Event()
        self._lock = threading.Lock()
        self._pending: PlanRequest | None = None
        self._trajectory: PiecewiseTrajectory | None = None
        self._version = 0
        self._last_error: Exception | None = None
        self._done = threading.Condition(self._lock)

    @property
    def is_running(self) -> bool:
        return self._thread is not None and self._thread.is_alive()

    @property
    def last_error(self) -> Exception | None:
        return self._last_error

    def start(self) -> None:
        if self.is_running:
            logger.warning("Replanner is already running")
            return
        self._stop_event.clear()
        self._thread = threading.Thread(target=self._run_loop, daemon=True)
        self._thread.start()
        logger.info("Replanner started")

    def stop(self) -> None:
        self._stop_event.set()
        self._wake.set()
        if self._thread:
            self._thread.join(timeout=10)
        logger.info("Replanner stopped")

    def request(self, world: OccupancyWorld, start, goal, fault: bool = False, head=None) -> None:
        with self._lock:
            self._pending = PlanRequest(world.snapshot(), np.asarray(start, float), np.asarray(goal, float), fault, head)
        self._wake.set()

    def latest(self) -> tuple[PiecewiseTrajectory | None, int]:
        with self._lock:
            return self._trajectory, self._version

    def wait(self, version: int, timeout: float | None = None) -> bool:
        """Block until a result newer than ``version`` (or an error) is published."""
        with self._done:
            return self._done.wait_for(lambda: self._version > version or self._last_error is not None, timeout)

    def _run_loop(self) -> None:
        while not self._stop_event.is_set():
            self._wake.wait()
            self._wake.clear()
            with self._lock:
                job, self._pending = self._pending, None
            if job is None:
                continue
            try:
                traj = plan_trajectory(job.world, job.start, job.goal, self.limits, job.fault, job.head)
            except Exception as e:
                logger.error("Replanning failed: %s", e)
                with self._done:
                    self._last_error = e
                    self._done.notify_all()
                continue
            with self._done:
                self._trajectory = traj
                self._version += 1
                self._last_error = None
                self._done.notify_all()
