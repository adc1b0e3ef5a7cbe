"""Deterministic closed-loop simulation engine.

Fixed-step fourth-order integration of the vehicle model, scheduled rotor
failures, synthetic sensing with seeded Gaussian noise and the first-order
filter bank feeding failure detection.
"""

import enum
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from rotorguard.dynamics import (
    QUAT,
    THRUST,
    VEL,
    ControlCommand,
    VehicleParams,
    VehicleState,
    dynamics_batch,
    rk4,
    rotor_rpm,
)
from rotorguard.errors import ConfigError, RunDivergedError
from rotorguard.quaternion import quat_from_rotvec, quat_mul, quat_to_rotmat

logger = logging.getLogger(__name__)

MAX_STEP = 0.01
LIFTOFF_HEIGHT = 0.02


class FailureMode(str, enum.Enum):
    MOTOR_STOP = "motor_stop"
    PROPELLER_LOSS = "propeller_loss"


@dataclass(frozen=True)
class FailureEvent:
    """A rotor losing ``severity`` of its thrust capability at ``time``."""

    time: float
    rotor: int
    mode: FailureMode
    severity: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "mode", FailureMode(self.mode))
        if not (np.isfinite(self.time) and self.time >= 0):
            raise ConfigError("failure.time", f"must be non-negative, got {self.time!r}")
        if self.rotor not in (0, 1, 2, 3):
            raise ConfigError("failure.rotor", f"must be 0-3, got {self.rotor!r}")
        if not 0.0 < self.severity <= 1.0:
            raise ConfigError("failure.severity", f"must be in (0, 1], got {self.severity!r}")
        if self.mode is FailureMode.MOTOR_STOP and self.severity != 1.0:
            raise ConfigError("failure.severity", "a motor stop removes all thrust (severity 1)")

    def to_text(self) -> str:
        return f"{self.time!r}:{self.rotor}:{self.mode.value}:{self.severity!r}"

    @classmethod
    def from_text(cls, text: str) -> "FailureEvent":
        """Parse ``time:rotor:mode[:severity]``."""
        parts = [p.strip() for p in text.split(":")]
        if len(parts) not in (3, 4):
            raise ConfigError("failure.events", f"expected time:rotor:mode[:severity], got {text!r}")
        try:
            time, rotor = float(parts[0]), int(parts[1])
            severity = float(parts[3]) if len(parts) == 4 else 1.0
            mode = FailureMode(parts[2])
        except ValueError as e:
            raise ConfigError("failure.events", f"bad event {text!r}: {e}") from None
        return cls(time, rotor, mode, severity)


@dataclass(frozen=True)
class FailureSchedule:
    events: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "events", tuple(self.events))
        times = [e.time for e in self.events]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ConfigError("failure.events", "event times must be strictly increasing")

    @property
    def first_time(self) -> float | None:
        return self.events[0].time if self.events else None


def effectiveness_at(schedule: FailureSchedule, t: float) -> np.ndarray:
    """Per-rotor fraction of thrust capability remaining at time ``t``."""
    e = np.ones(4)
    for event in schedule.events:
        if event.time <= t:
            e[event.rotor] = min(e[event.rotor], 1.0 - event.severity)
    return e


def stopped_rotors(schedule: FailureSchedule, t: float) -> np.ndarray:
    stopped = np.zeros(4, dtype=bool)
    for event in schedule.events:
        if event.time <= t and event.mode is FailureMode.MOTOR_STOP:
            stopped[event.rotor] = True
    return stopped


def _check_step(dt: float) -> None:
    if not 0.0 < dt <= MAX_STEP:
        raise ConfigError("sim.dt", f"integration step must be in (0, {MAX_STEP}] s, got {dt!r}")


def step(x: VehicleState, u: ControlCommand, effectiveness, dt: float, params: VehicleParams) -> VehicleState:
    """Advance the state by one fourth-order step.

    Args:
        x: Current state.
        u: Thrust command, clamped to [0, thrust_max] before use.
        effectiveness: Per-rotor remaining fraction in [0, 1].
        dt: Step size in seconds, at most 0.01.
        params: Vehicle parameters.

    Returns:
        The next state with a unit quaternion and thrusts clamped to
        [0, effectiveness * thrust_max].
    """
    _check_step(dt)
    e = np.asarray(effectiveness, dtype=float)
    if e.shape != (4,) or np.any(e < 0) or np.any(e > 1):
        raise ConfigError("sim.effectiveness", f"entries must lie in [0, 1], got {effectiveness!r}")
    command = np.clip(np.asarray(u.thrusts, dtype=float), 0.0, params.thrust_max)
    vector = x.to_vector()
    vector[THRUST] = np.clip(vector[THRUST], 0.0, e * params.thrust_max)
    out = rk4(vector, e * command, dt, params)
    out[THRUST] = np.clip(out[THRUST], 0.0, e * params.thrust_max)
    out[THRUST][e == 0.0] = 0.0
    return VehicleState.from_vector(out)


def motor_lag_factor(dt: float, sigma: float) -> float:
    """Factor applied to (thrust - command) by one RK4 step of the motor lag."""
    h = dt / sigma
    return 1.0 - h + h * h / 2.0 - h ** 3 / 6.0 + h ** 4 / 24.0


@dataclass(frozen=True)
class NoiseProfile:
    """Standard deviations of the synthetic sensor noise."""

    accel: float = 0.05
    gyro: float = 0.005
    rpm: float = 30.0
    position: float = 0.005
    velocity: float = 0.01
    attitude: float = 0.002

    def __post_init__(self):
        for name in ("accel", "gyro", "rpm", "position", "velocity", "attitude"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value >= 0):
                raise ConfigError(f"noise.{name}", f"must be non-negative, got {value!r}")

    @classmethod
    def zero(cls) -> "NoiseProfile":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class SensorFrame:
    timestamp: float
    accel_meas: np.ndarray
    gyro_meas: np.ndarray
    rpm_meas: np.ndarray
    odom_position: np.ndarray
    odom_velocity: np.ndarray
    odom_attitude: np.ndarray

    def odometry_state(self, thrusts) -> VehicleState:
        """State estimate for the controller; thrusts come from the caller's model."""
        return VehicleState(
            position=self.odom_position.copy(),
            attitude=self.odom_attitude.copy(),
            velocity=self.odom_velocity.copy(),
            rates=self.gyro_meas.copy(),
            thrusts=np.asarray(thrusts, dtype=float).copy(),
        )


def sense(
    x: VehicleState,
    xdot: np.ndarray,
    rng: np.random.Generator,
    noise: NoiseProfile,
    params: VehicleParams,
    timestamp: float,
    motor_thrusts=None,
) -> SensorFrame:
    """Synthesize one sensor frame from the true state.

    ``motor_thrusts`` is the thrust each motor would make with an intact
    propeller; rotor speed telemetry follows the motor, not the propeller.
    The noise draws happen in a fixed order so a seeded stream reproduces
    the same frames.
    """
    rot = quat_to_rotmat(x.attitude)
    specific_force = rot.T @ (xdot[VEL] - params.gravity_vector)
    motor = x.thrusts if motor_thrusts is None else np.asarray(motor_thrusts, dtype=float)

    accel = specific_force + noise.accel * rng.standard_normal(3)
    gyro = x.rates + noise.gyro * rng.standard_normal(3)
    rpm = np.maximum(rotor_rpm(motor, params) + noise.rpm * rng.standard_normal(4), 0.0)
    position = x.position + noise.position * rng.standard_normal(3)
    velocity = x.velocity + noise.velocity * rng.standard_normal(3)
    tilt_noise = quat_from_rotvec(noise.attitude * rng.standard_normal(3))
    attitude = quat_mul(x.attitude, tilt_noise)
    attitude = attitude / np.linalg.norm(attitude)
    return SensorFrame(timestamp, accel, gyro, rpm, position, velocity, attitude)


@dataclass(frozen=True)
class FilterState:
    """First-order low-pass filter; ``value`` is None until the first sample."""

    cutoff: float
    value: np.ndarray | None = None

    def __post_init__(self):
        if not self.cutoff > 0:
            raise ConfigError("filter.cutoff", f"must be positive, got {self.cutoff!r}")


def lowpass(f: FilterState, sample, dt: float) -> tuple[FilterState, np.ndarray]:
    """One filter update ``y += alpha (x - y)`` with ``alpha = dt / (dt + 1/(2 pi fc))``.

    The filter is primed with its first sample.
    """
    if not dt > 0:
        raise ConfigError("filter.dt", f"must be positive, got {dt!r}")
    sample = np.asarray(sample, dtype=float)
    if f.value is None:
        return replace(f, value=sample.copy()), sample.copy()
    alpha = dt / (dt + 1.0 / (2.0 * np.pi * f.cutoff))
    y = f.value + alpha * (sample - f.value)
    return replace(f, value=y), y


@dataclass(frozen=True)
class FilteredSignals:
    """World acceleration, body angular acceleration and body rates after filtering."""

    accel_world: np.ndarray
    ang_accel: np.ndarray
    rates: np.ndarray
    attitude: np.ndarray
    velocity: np.ndarray
    warm: bool


class SensorFilters:
    """Filter bank: 20 Hz on acceleration and rates, 10 Hz on angular acceleration."""

    def __init__(self, dt: float, accel_cutoff: float = 20.0, ang_accel_cutoff: float = 10.0, gravity: float = 9.81):
        for name, cutoff in (("accel_cutoff", accel_cutoff), ("ang_accel_cutoff", ang_accel_cutoff)):
            if cutoff >= 0.5 / dt:
                raise ConfigError(f"fdd.{name}", f"{cutoff} Hz is not below the {0.5 / dt:.0f} Hz Nyquist limit")
        self.dt = dt
        self._gravity = np.array([0.0, 0.0, -gravity])
        self._accel = FilterState(accel_cutoff)
        self._gyro = FilterState(accel_cutoff)
        self._ang_accel = FilterState(ang_accel_cutoff)
        self._prev_rates: np.ndarray | None = None
        self._samples = 0
        # five time constants of the slowest channel
        self._warmup = int(np.ceil(5.0 / (2.0 * np.pi * min(accel_cutoff, ang_accel_cutoff) * dt)))

    def update(self, frame: SensorFrame) -> FilteredSignals:
        rot = quat_to_rotmat(frame.odom_attitude)
        accel_world = rot @ frame.accel_meas + self._gravity
        self._accel, accel_f = lowpass(self._accel, accel_world, self.dt)
        self._gyro, rates_f = lowpass(self._gyro, frame.gyro_meas, self.dt)
        if self._prev_rates is None:
            diff = np.zeros(3)
        else:
            diff = (rates_f - self._prev_rates) / self.dt
        self._prev_rates = rates_f
        self._ang_accel, ang_accel_f = lowpass(self._ang_accel, diff, self.dt)
        self._samples += 1
        return FilteredSignals(
            accel_world=accel_f,
            ang_accel=ang_accel_f,
            rates=rates_f,
            attitude=frame.odom_attitude,
            velocity=frame.odom_velocity,
            warm=self._samples >= self._warmup,
        )


@dataclass
class Simulator:
    """Single-run plant: owns the true state, failures, motors and noise stream.

    Physics runs at ``physics_rate`` and one call to :meth:`advance` covers
    one control period. Before lift-off the vehicle rests on the plane
    z = 0; after lift-off the ground is not modelled.
    """

    params: VehicleParams
    state: VehicleState
    schedule: FailureSchedule = field(default_factory=FailureSchedule)
    noise: NoiseProfile = field(default_factory=NoiseProfile)
    seed: int = 0
    physics_rate: float = 400.0
    control_rate: float = 200.0
    grounded: bool = False
    time: float = 0.0

    def __post_init__(self):
        ratio = self.physics_rate / self.control_rate
        if ratio < 1 or abs(ratio - round(ratio)) > 1e-9:
            raise ConfigError("sim.physics_rate", "must be an integer multiple of the control rate")
        self.substeps = int(round(ratio))
        self.dt = 1.0 / self.physics_rate
        _check_step(self.dt)
        self.rng = np.random.default_rng(self.seed)
        self.motor = self.state.thrusts.copy()
        self.lifted = not self.grounded
        self.applied_events: list[FailureEvent] = []
        self.xdot = dynamics_batch(self.state.to_vector(), self.state.thrusts, self.params)
        self._lag = motor_lag_factor(self.dt, self.params.sigma)

    @property
    def effectiveness(self) -> np.ndarray:
        return effectiveness_at(self.schedule, self.time)

    def _apply_events(self) -> None:
        for event in self.schedule.events:
            if event.time <= self.time + 1e-12 and event not in self.applied_events:
                self.applied_events.append(event)
                logger.info("t=%.4f injecting %s on rotor %d (severity %.2f)",
                            self.time, event.mode.value, event.rotor, event.severity)
        stopped = stopped_rotors(self.schedule, self.time + 1e-12)
        self.motor[stopped] = 0.0
        e = effectiveness_at(self.schedule, self.time + 1e-12)
        self.state = replace(self.state, thrusts=e * self.motor)

    def _physics_step(self, command: np.ndarray) -> None:
        self._apply_events()
        e = effectiveness_at(self.schedule, self.time + 1e-12)
        stopped = stopped_rotors(self.schedule, self.time + 1e-12)
        previous = self.state
        nxt = step(previous, ControlCommand(command, self.time), e, self.dt, self.params)

        self.motor = np.clip(command + (self.motor - command) * self._lag, 0.0, self.params.thrust_max)
        self.motor[stopped] = 0.0
        nxt = replace(nxt, thrusts=e * self.motor)

        if not self.lifted:
            if nxt.position[2] > LIFTOFF_HEIGHT:
                self.lifted = True
                logger.debug("lift-off at t=%.4f", self.time + self.dt)
            elif nxt.position[2] <= 0.0:
                position = nxt.position.copy()
                position[2] = 0.0
                nxt = replace(nxt, position=position, attitude=previous.attitude.copy(),
                              velocity=np.zeros(3), rates=np.zeros(3))

        vector = nxt.to_vector()
        if not np.all(np.isfinite(vector)):
            raise RunDivergedError(f"non-finite state at t={self.time + self.dt:.4f}")
        self.state = nxt
        self.time += self.dt
        self.xdot = dynamics_batch(vector, e * command, self.params)
        if not self.lifted and self.state.position[2] == 0.0:
            self.xdot[VEL] = np.maximum(self.xdot[VEL], 0.0) * np.array([0.0, 0.0, 1.0])

    def advance(self, command) -> SensorFrame:
        """Hold ``command`` for one control period and return the sensor frame at its end."""
        u = np.clip(np.asarray(command, dtype=float), 0.0, self.params.thrust_max)
        for _ in range(self.substeps):
            self._physics_step(u)
        self.time = round(self.time, 12)
        return self.sense()

    def sense(self) -> SensorFrame:
        return sense(self.state, self.xdot, self.rng, self.noise, self.params, self.time, self.motor)
