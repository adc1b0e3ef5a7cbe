"""Fault-tolerant nonlinear model-predictive control.

The optimal control problem runs over the full 17-state model with a
multiple-shooting discretization. Each control tick performs a fixed number
of Gauss-Newton iterations: the shooting nodes are linearized by batched
finite differences, condensed onto the inputs and the resulting
box-constrained least-squares problem is solved with BVLS.

After a rotor failure the failed rotor's input bounds collapse to zero and
the yaw-error weight is dropped, so the vehicle spins about its thrust axis
while still controlling position and tilt.
"""

import logging
import time as walltime
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import lsq_linear

from rotorguard.attitude import reduced_error_batch, reference_attitude, thrust_vector
from rotorguard.dynamics import (
    INPUT_DIM,
    POS,
    QUAT,
    RATE,
    STATE_DIM,
    THRUST,
    VEL,
    ControlCommand,
    VehicleParams,
    VehicleState,
    opposite_rotor,
    rk4,
)
from rotorguard.errors import ConfigError, InvalidInputError
from rotorguard.quaternion import IDENTITY, quat_normalize

logger = logging.getLogger(__name__)

RESIDUAL_DIM = 17
FD_STEP = 1e-6
# residual rows -> state columns for everything except the attitude block
_RES_POS, _RES_VEL, _RES_ATT, _RES_RATE, _RES_THRUST = (
    slice(0, 3),
    slice(3, 6),
    slice(6, 10),
    slice(10, 13),
    slice(13, 17),
)


def _diag(values, size: int, name: str) -> tuple:
    values = tuple(float(v) for v in values)
    if len(values) != size:
        raise ConfigError(f"controller.{name}", f"expected {size} diagonal entries, got {len(values)}")
    if not all(v >= 0 for v in values):
        raise ConfigError(f"controller.{name}", "weights must be non-negative")
    return values


@dataclass(frozen=True)
class OcpConfig:
    """Horizon, weights and bounds of the optimal control problem.

    ``u_lo``/``u_hi`` default to ``[0, thrust_max]``. ``q_n`` defaults to the
    stage weights.
    """

    horizon: int = 20
    dt: float = 0.05
    q_p: tuple = (100.0, 100.0, 600.0)
    q_v: tuple = (5.0, 5.0, 5.0)
    q_q: tuple = (60.0, 60.0, 60.0, 60.0)
    q_w: tuple = (5.0, 5.0, 5.0)
    q_t: tuple = (1.0, 1.0, 1.0, 1.0)
    q_n: tuple | None = None
    r: tuple = (1.0, 1.0, 1.0, 1.0)
    u_lo: tuple | None = None
    u_hi: tuple | None = None
    w_lo: tuple = (-6.0, -6.0, -3.0)
    w_hi: tuple = (6.0, 6.0, 3.0)
    rate_penalty: float = 1e3
    iterations: int = 3
    substeps: int = 2

    def __post_init__(self):
        if int(self.horizon) != self.horizon or self.horizon < 2:
            raise ConfigError("controller.horizon", f"must be an integer >= 2, got {self.horizon!r}")
        if not self.dt > 0:
            raise ConfigError("controller.dt", f"must be positive, got {self.dt!r}")
        if self.iterations < 1:
            raise ConfigError("controller.iterations", "must be at least 1")
        if self.substeps < 1:
            raise ConfigError("controller.substeps", "must be at least 1")
        for name, size in (("q_p", 3), ("q_v", 3), ("q_q", 4), ("q_w", 3), ("q_t", 4), ("r", 4)):
            object.__setattr__(self, name, _diag(getattr(self, name), size, name))
        if self.q_n is not None:
            object.__setattr__(self, "q_n", _diag(self.q_n, RESIDUAL_DIM, "q_n"))
        w_lo = tuple(float(v) for v in self.w_lo)
        w_hi = tuple(float(v) for v in self.w_hi)
        if len(w_lo) != 3 or len(w_hi) != 3 or any(lo > hi for lo, hi in zip(w_lo, w_hi)):
            raise ConfigError("controller.w_lo", "body-rate bounds must be three well-ordered pairs")
        object.__setattr__(self, "w_lo", w_lo)
        object.__setattr__(self, "w_hi", w_hi)
        for name in ("u_lo", "u_hi"):
            value = getattr(self, name)
            if value is not None:
                value = tuple(float(v) for v in value)
                if len(value) != 4:
                    raise ConfigError(f"controller.{name}", "expected four per-rotor bounds")
                object.__setattr__(self, name, value)
        if self.u_lo is not None and self.u_hi is not None and any(lo > hi for lo, hi in zip(self.u_lo, self.u_hi)):
            raise ConfigError("controller.u_lo", "input bounds must satisfy u_lo <= u_hi")

    @property
    def stage_weights(self) -> np.ndarray:
        return np.array(self.q_p + self.q_v + self.q_q + self.q_w + self.q_t)


@dataclass(frozen=True)
class ReferencePoint:
    position: np.ndarray
    velocity: np.ndarray
    attitude: np.ndarray
    rates: np.ndarray
    thrusts: np.ndarray

    def __post_init__(self):
        if abs(np.linalg.norm(self.attitude) - 1.0) > 1e-6:
            raise InvalidInputError(f"reference attitude must be unit, got {self.attitude!r}")

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.position, self.attitude, self.velocity, self.rates, self.thrusts]).astype(float)

    @classmethod
    def hover(cls, position, params: VehicleParams, thrusts=None) -> "ReferencePoint":
        if thrusts is None:
            thrusts = np.full(4, params.weight / 4.0)
        return cls(np.array(position, dtype=float), np.zeros(3), IDENTITY.copy(), np.zeros(3), np.asarray(thrusts, float))


@dataclass(frozen=True)
class Ocp:
    """One instance of the discretized problem."""

    x0: np.ndarray
    refs: np.ndarray
    weights: np.ndarray
    terminal_weights: np.ndarray
    input_weights: np.ndarray
    u_lo: np.ndarray
    u_hi: np.ndarray
    w_lo: np.ndarray
    w_hi: np.ndarray
    horizon: int
    dt: float
    substeps: int
    rate_penalty: float
    fault_rotor: int | None = None


@dataclass
class SolverStats:
    iterations: int = 0
    kkt_history: list = field(default_factory=list)
    solve_ms: float = 0.0
    degraded: bool = False
    qp_status: int = 0
    cost: float = float("nan")

    @property
    def kkt(self) -> float:
        return self.kkt_history[-1] if self.kkt_history else float("nan")


@dataclass
class WarmStart:
    """Input and state trajectories of the previous solve and its start time."""

    inputs: np.ndarray
    states: np.ndarray
    time: float = 0.0


def _fault_rotor(fault) -> int | None:
    if fault is None:
        return None
    return int(getattr(fault, "rotor", fault))


def build_ocp(x0: VehicleState, refs, fault, cfg: OcpConfig, params: VehicleParams) -> Ocp:
    """Assemble the problem for one tick.

    Args:
        x0: Current state estimate.
        refs: ``horizon + 1`` ReferencePoints (or a stacked ``(N+1, 17)`` array).
        fault: Latched FaultReport, a rotor index or None.
        cfg: Controller configuration.
        params: Vehicle parameters.

    Returns:
        The Ocp; under a fault the failed rotor's bounds are [0, 0], the yaw
        weight is zero, yaw rate is unbounded and its reference follows the
        measured rate.
    """
    x = x0.to_vector() if isinstance(x0, VehicleState) else np.asarray(x0, dtype=float)
    ref = np.array([r.to_vector() for r in refs]) if not isinstance(refs, np.ndarray) else refs.astype(float).copy()
    if ref.shape != (cfg.horizon + 1, STATE_DIM):
        raise InvalidInputError(f"expected {cfg.horizon + 1} reference points, got {len(ref)}")

    u_lo = np.array(cfg.u_lo) if cfg.u_lo is not None else np.zeros(4)
    u_hi = np.array(cfg.u_hi) if cfg.u_hi is not None else np.full(4, params.thrust_max)
    weights = cfg.stage_weights
    terminal = np.array(cfg.q_n) if cfg.q_n is not None else weights.copy()
    w_lo = np.array(cfg.w_lo)
    w_hi = np.array(cfg.w_hi)

    rotor = _fault_rotor(fault)
    if rotor is not None:
        u_lo[rotor] = 0.0
        u_hi[rotor] = 0.0
        weights[_RES_ATT.start + 3] = 0.0
        terminal[_RES_ATT.start + 3] = 0.0
        w_lo[2], w_hi[2] = -np.inf, np.inf
        ref[:, RATE.start + 2] = x[RATE.start + 2]

    return Ocp(
        x0=x,
        refs=ref,
        weights=weights,
        terminal_weights=terminal,
        input_weights=np.array(cfg.r),
        u_lo=u_lo,
        u_hi=u_hi,
        w_lo=w_lo,
        w_hi=w_hi,
        horizon=cfg.horizon,
        dt=cfg.dt,
        substeps=cfg.substeps,
        rate_penalty=cfg.rate_penalty,
        fault_rotor=rotor,
    )


def _propagate(x: np.ndarray, u: np.ndarray, ocp: Ocp, params: VehicleParams) -> np.ndarray:
    h = ocp.dt / ocp.substeps
    for _ in range(ocp.substeps):
        x = rk4(x, u, h, params)
    return x


def rollout(x0: np.ndarray, inputs: np.ndarray, ocp: Ocp, params: VehicleParams) -> np.ndarray:
    states = np.empty((len(inputs) + 1, STATE_DIM))
    states[0] = x0
    for k, u in enumerate(inputs):
        states[k + 1] = _propagate(states[k], u, ocp, params)
    return states


def stage_residuals(states: np.ndarray, refs: np.ndarray) -> np.ndarray:
    """Unweighted residual vectors ``(K, 17)``: position, velocity, attitude, rates, thrusts."""
    return np.concatenate(
        [
            states[..., POS] - refs[..., POS],
            states[..., VEL] - refs[..., VEL],
            reduced_error_batch(refs[..., QUAT], states[..., QUAT]),
            states[..., RATE] - refs[..., RATE],
            states[..., THRUST] - refs[..., THRUST],
        ],
        axis=-1,
    )


def _residual_jacobians(states: np.ndarray, refs: np.ndarray) -> np.ndarray:
    """d(residual)/d(state) per node, finite differences on the attitude block only."""
    count = len(states)
    jac = np.zeros((count, RESIDUAL_DIM, STATE_DIM))
    jac[:, _RES_POS, POS] = np.eye(3)
    jac[:, _RES_VEL, VEL] = np.eye(3)
    jac[:, _RES_RATE, RATE] = np.eye(3)
    jac[:, _RES_THRUST, THRUST] = np.eye(4)
    q = states[:, QUAT]
    base = reduced_error_batch(refs[:, QUAT], q)
    perturbed = q[:, None, :] + FD_STEP * np.eye(4)[None, :, :]
    shifted = reduced_error_batch(np.repeat(refs[:, None, QUAT], 4, axis=1), perturbed)
    jac[:, _RES_ATT, QUAT] = np.transpose((shifted - base[:, None, :]) / FD_STEP, (0, 2, 1))
    return jac


def _dynamics_jacobians(states: np.ndarray, inputs: np.ndarray, ocp: Ocp, params: VehicleParams):
    """Shooting-node propagation and its forward-difference Jacobians."""
    n = len(inputs)
    dirs = STATE_DIM + INPUT_DIM
    eye = np.eye(dirs)
    x = np.repeat(states[:n, None, :], dirs + 1, axis=1)
    u = np.repeat(inputs[:, None, :], dirs + 1, axis=1)
    x[:, 1:, :] += FD_STEP * eye[:, :STATE_DIM]
    u[:, 1:, :] += FD_STEP * eye[:, STATE_DIM:]
    out = _propagate(x, u, ocp, params)
    nominal = out[:, 0, :]
    diff = (out[:, 1:, :] - nominal[:, None, :]) / FD_STEP
    a = np.transpose(diff[:, :STATE_DIM, :], (0, 2, 1))
    b = np.transpose(diff[:, STATE_DIM:, :], (0, 2, 1))
    return nominal, a, b


def ocp_cost(ocp: Ocp, states: np.ndarray, inputs: np.ndarray) -> float:
    """Weighted least-squares objective including the body-rate penalties."""
    res = stage_residuals(states, ocp.refs)
    cost = float(np.sum(ocp.weights * res[:-1] ** 2) + np.sum(ocp.terminal_weights * res[-1] ** 2))
    cost += float(np.sum(ocp.input_weights * (inputs - ocp.refs[:-1, THRUST]) ** 2))
    rates = states[1:, RATE]
    excess = np.maximum(rates - ocp.w_hi, 0.0) + np.maximum(ocp.w_lo - rates, 0.0)
    cost += float(np.sum((ocp.rate_penalty * excess) ** 2))
    return cost


def _least_squares(ocp: Ocp, states: np.ndarray, inputs: np.ndarray, g: np.ndarray, c: np.ndarray):
    """Stack the condensed Gauss-Newton system ``min ||M d + r||``."""
    n = ocp.horizon
    res = stage_residuals(states, ocp.refs)
    jac = _residual_jacobians(states, ocp.refs)

    blocks = []
    rhs = []
    for k in range(1, n + 1):
        sw = np.sqrt(ocp.terminal_weights if k == n else ocp.weights)
        blocks.append(sw[:, None] * (jac[k] @ g[k]))
        rhs.append(sw * (res[k] + jac[k] @ c[k]))

    sr = np.sqrt(ocp.input_weights)
    input_rows = np.zeros((4 * n, 4 * n))
    input_rows[np.arange(4 * n), np.arange(4 * n)] = np.tile(sr, n)
    blocks.append(input_rows)
    rhs.append((sr * (inputs - ocp.refs[:-1, THRUST])).ravel())

    rho = ocp.rate_penalty
    for k in range(1, n + 1):
        predicted = states[k, RATE] + c[k, RATE]
        for axis in range(3):
            row = g[k, RATE.start + axis]
            if predicted[axis] > ocp.w_hi[axis]:
                blocks.append(rho * row[None, :])
                rhs.append(np.array([rho * (predicted[axis] - ocp.w_hi[axis])]))
            elif predicted[axis] < ocp.w_lo[axis]:
                blocks.append(-rho * row[None, :])
                rhs.append(np.array([rho * (ocp.w_lo[axis] - predicted[axis])]))
    return np.vstack(blocks), np.concatenate(rhs)


def _projected_gradient(grad: np.ndarray, u: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    grad = grad.copy()
    grad[(u <= lo + 1e-12) & (grad > 0)] = 0.0
    grad[(u >= hi - 1e-12) & (grad < 0)] = 0.0
    grad[lo >= hi] = 0.0
    return grad


def shift_warm_start(warm: WarmStart | None, ocp: Ocp, time: float, default_input: np.ndarray) -> np.ndarray:
    """Inputs for this tick: the previous plan shifted by the elapsed time, interpolated."""
    n = ocp.horizon
    if warm is None or warm.inputs.shape != (n, INPUT_DIM):
        return np.tile(default_input, (n, 1))
    offset = max(time - warm.time, 0.0) / ocp.dt
    grid = np.arange(n) + offset
    idx = np.arange(n)
    shifted = np.stack([np.interp(grid, idx, warm.inputs[:, j]) for j in range(INPUT_DIM)], axis=1)
    return shifted


def solve_nmpc(
    ocp: Ocp,
    warm_start: WarmStart | None,
    params: VehicleParams,
    iterations: int = 3,
    time: float = 0.0,
) -> tuple[ControlCommand, np.ndarray, SolverStats, WarmStart]:
    """Run a fixed budget of Gauss-Newton iterations on ``ocp``.

    Args:
        ocp: Problem instance from :func:`build_ocp`.
        warm_start: Previous solution or None.
        params: Vehicle parameters.
        iterations: Iteration budget.
        time: Time stamp of this solve, used to shift the warm start.

    Returns:
        The first command clamped to its bounds, the predicted state
        trajectory ``(N+1, 17)``, solver statistics and the next warm start.
    """
    if np.any(ocp.u_lo > ocp.u_hi):
        raise ConfigError("controller.u_lo", f"infeasible input bounds {ocp.u_lo} > {ocp.u_hi}")
    started = walltime.perf_counter()
    n = ocp.horizon
    lo = np.tile(ocp.u_lo, n)
    hi = np.tile(ocp.u_hi, n)
    free = lo < hi

    inputs = np.clip(shift_warm_start(warm_start, ocp, time, ocp.refs[0, THRUST]), ocp.u_lo, ocp.u_hi)
    fallback = inputs.copy()
    states = rollout(ocp.x0, inputs, ocp, params)
    stats = SolverStats()

    try:
        for _ in range(iterations):
            nominal, a, b = _dynamics_jacobians(states, inputs, ocp, params)
            defects = nominal - states[1:]
            g = np.zeros((n + 1, STATE_DIM, INPUT_DIM * n))
            c = np.zeros((n + 1, STATE_DIM))
            for k in range(n):
                g[k + 1] = a[k] @ g[k]
                g[k + 1][:, 4 * k : 4 * k + 4] += b[k]
                c[k + 1] = a[k] @ c[k] + defects[k]

            matrix, rhs = _least_squares(ocp, states, inputs, g, c)
            u_flat = inputs.ravel()
            grad = matrix.T @ rhs
            kkt = float(np.linalg.norm(_projected_gradient(grad, u_flat, lo, hi)) + np.linalg.norm(defects))
            stats.kkt_history.append(kkt)

            delta = np.zeros(INPUT_DIM * n)
            if np.any(free):
                result = lsq_linear(
                    matrix[:, free],
                    -rhs,
                    bounds=(lo[free] - u_flat[free], hi[free] - u_flat[free]),
                    method="bvls",
                )
                stats.qp_status = int(result.status)
                if result.status < 0 or not np.all(np.isfinite(result.x)):
                    raise FloatingPointError(f"BVLS status {result.status}")
                delta[free] = result.x

            inputs = np.clip((u_flat + delta).reshape(n, INPUT_DIM), ocp.u_lo, ocp.u_hi)
            states = states + np.einsum("kij,j->ki", g, delta) + c
            states[0] = ocp.x0
            states[:, QUAT] = quat_normalize(states[:, QUAT])
            stats.iterations += 1
            if not np.all(np.isfinite(states)):
                raise FloatingPointError("non-finite prediction")
        stats.cost = ocp_cost(ocp, states, inputs)
    except (FloatingPointError, np.linalg.LinAlgError, ValueError) as e:
        logger.warning("NMPC stalled at t=%.4f (%s); using shifted warm start", time, e)
        stats.degraded = True
        inputs = fallback
        states = rollout(ocp.x0, inputs, ocp, params)
        stats.cost = ocp_cost(ocp, states, inputs)

    stats.solve_ms = (walltime.perf_counter() - started) * 1000.0
    command = ControlCommand(np.clip(inputs[0], ocp.u_lo, ocp.u_hi), time)
    logger.debug("NMPC t=%.4f iters=%d kkt=%.3e cost=%.4e %.2f ms", time, stats.iterations, stats.kkt, stats.cost, stats.solve_ms)
    return command, states, stats, WarmStart(inputs.copy(), states.copy(), time)


class NmpcController:
    """Stateful controller: owns the warm start and the latched fault."""

    def __init__(self, params: VehicleParams, config: OcpConfig | None = None):
        self.params = params
        self.config = config or OcpConfig()
        self.fault = None
        self._warm: WarmStart | None = None
        self.last_stats: SolverStats | None = None

    @property
    def fault_rotor(self) -> int | None:
        return _fault_rotor(self.fault)

    def set_fault(self, report) -> None:
        """Latch the first reported fault; later reports are ignored."""
        if self.fault is not None:
            return
        self.fault = report
        self._warm = None
        logger.info("Controller reconfigured for loss of rotor %d", self.fault_rotor)

    def reset(self) -> None:
        self._warm = None
        self.fault = None

    def compute(self, state: VehicleState, refs, time: float):
        ocp = build_ocp(state, refs, self.fault, self.config, self.params)
        command, predicted, stats, self._warm = solve_nmpc(
            ocp, self._warm, self.params, self.config.iterations, time
        )
        self.last_stats = stats
        return command, predicted, stats


def split_thrust(total: float, fault_rotor: int | None, params: VehicleParams) -> np.ndarray:
    """Per-rotor thrust reference; under a fault only the two load-carrying rotors share it."""
    if fault_rotor is None:
        return np.full(4, total / 4.0)
    thrusts = np.full(4, total / 2.0)
    thrusts[fault_rotor] = 0.0
    thrusts[opposite_rotor(fault_rotor, params)] = 0.0
    return thrusts


def reference_from_trajectory(traj, t0: float, cfg: OcpConfig, params: VehicleParams, fault=None) -> list[ReferencePoint]:
    """Sample ``horizon + 1`` reference points from a trajectory.

    Anything with ``duration`` and ``evaluate(t, order)`` works; past the end
    the reference holds the final position at rest.
    """
    rotor = _fault_rotor(fault)
    refs = []
    for k in range(cfg.horizon + 1):
        t = t0 + k * cfg.dt
        if t >= traj.duration:
            position = traj.evaluate(traj.duration, 0)
            velocity = np.zeros(3)
            accel = np.zeros(3)
        else:
            position = traj.evaluate(max(t, 0.0), 0)
            velocity = traj.evaluate(max(t, 0.0), 1)
            accel = traj.evaluate(max(t, 0.0), 2)
        force = thrust_vector(accel, velocity, params.mass, params.gravity, params.drag_diag)
        refs.append(
            ReferencePoint(
                position=np.asarray(position, dtype=float),
                velocity=np.asarray(velocity, dtype=float),
                attitude=reference_attitude(force),
                rates=np.zeros(3),
                thrusts=split_thrust(float(np.linalg.norm(force)), rotor, params),
            )
        )
    return refs
