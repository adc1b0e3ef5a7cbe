"""Composite failure detection and diagnosis.

Three mechanisms watch the rotors:

* the motor index compares measured rotor speed with the speed expected from
  the commands (catches stopped motors),
* the thrust-loss observer compares thrust implied by rotor speed with the
  thrust implied by the measured motion (catches lost propellers),
* the takeoff monitor looks for the lateral acceleration and angular
  acceleration pattern a dead rotor produces right after lift-off.

An arbitration layer enables the mechanisms per flight stage and latches
reports.
"""

import enum
import logging
from dataclasses import dataclass, field

import numpy as np

from rotorguard.dynamics import (
    VehicleParams,
    hover_thrusts,
    mixer_matrix,
    rotor_rpm,
    thrust_from_rpm,
    yaw_damping_torque,
)
from rotorguard.errors import ConfigError
from rotorguard.quaternion import quat_to_euler, quat_to_rotmat
from rotorguard.sim import FilteredSignals, SensorFilters, SensorFrame

logger = logging.getLogger(__name__)

MECHANISM_MOTOR = "motor_index"
MECHANISM_TAKEOFF = "takeoff_monitor"
MECHANISM_PROPELLER = "propeller_index"
PRIORITY = (MECHANISM_MOTOR, MECHANISM_TAKEOFF, MECHANISM_PROPELLER)


class Stage(str, enum.Enum):
    TAKEOFF = "takeoff"
    TRACKING = "tracking"


class FaultClass(str, enum.Enum):
    MOTOR = "motor"
    PROPELLER = "propeller"
    TAKEOFF_DETECTED = "takeoff_detected"


MECHANISM_CLASS = {
    MECHANISM_MOTOR: FaultClass.MOTOR,
    MECHANISM_TAKEOFF: FaultClass.TAKEOFF_DETECTED,
    MECHANISM_PROPELLER: FaultClass.PROPELLER,
}


@dataclass(frozen=True)
class FddConfig:
    """Detector thresholds.

    ``gamma_q`` holds the lateral acceleration thresholds (m/s^2) followed by
    the angular acceleration thresholds (rad/s^2).
    """

    gamma_m: float = 0.2
    gamma_p: float = 0.8
    gamma_q: tuple = (0.005, 0.005, 0.2, 0.2)
    debounce_count: int = 3
    stage: Stage = Stage.TRACKING
    rpm_floor_fraction: float = 0.1
    degradation_floor: float = 0.2
    accel_cutoff: float = 20.0
    ang_accel_cutoff: float = 10.0

    def __post_init__(self):
        object.__setattr__(self, "stage", Stage(self.stage))
        object.__setattr__(self, "gamma_q", tuple(float(g) for g in self.gamma_q))
        if not 0 < self.gamma_m <= 1:
            raise ConfigError("fdd.gamma_m", f"must be in (0, 1], got {self.gamma_m!r}")
        if not 0 < self.gamma_p <= 1:
            raise ConfigError("fdd.gamma_p", f"must be in (0, 1], got {self.gamma_p!r}")
        if len(self.gamma_q) != 4 or not all(g > 0 for g in self.gamma_q):
            raise ConfigError("fdd.gamma_q", "expected four positive thresholds")
        if int(self.debounce_count) != self.debounce_count or self.debounce_count < 1:
            raise ConfigError("fdd.debounce_count", f"must be an integer >= 1, got {self.debounce_count!r}")
        if not 0 < self.rpm_floor_fraction < 1:
            raise ConfigError("fdd.rpm_floor_fraction", "must be in (0, 1)")
        if not 0 <= self.degradation_floor < self.gamma_p:
            raise ConfigError("fdd.degradation_floor", "must be in [0, gamma_p)")


@dataclass(frozen=True)
class FaultReport:
    rotor: int
    fault_class: FaultClass
    time: float
    index_value: float
    mechanism: str

    def to_dict(self) -> dict:
        return {
            "rotor": self.rotor,
            "fault_class": self.fault_class.value,
            "time": self.time,
            "index_value": self.index_value,
            "mechanism": self.mechanism,
        }


def motor_index(rpm_meas, rpm_ref, floor: float = 0.0) -> np.ndarray:
    """Ratio of measured to expected rotor speed; NaN where the reference is below ``floor``."""
    rpm_meas = np.asarray(rpm_meas, dtype=float)
    rpm_ref = np.asarray(rpm_ref, dtype=float)
    out = np.full(rpm_ref.shape, np.nan)
    valid = (rpm_ref >= floor) & (rpm_ref > 0)
    out[valid] = rpm_meas[valid] / rpm_ref[valid]
    return out


def thrust_loss_observer(
    frame: SensorFrame,
    filtered: FilteredSignals,
    params: VehicleParams,
    thrust_estimates=None,
) -> np.ndarray:
    """Per-rotor thrust loss t* in newtons.

    The expected thrusts come from measured rotor speed unless
    ``thrust_estimates`` is given. The translational residual is projected on
    the body z axis, so a rotor producing more than expected gives a negative
    loss.

    Args:
        frame: Latest sensor frame (rotor speeds).
        filtered: Filtered acceleration, angular acceleration and rates.
        params: Vehicle parameters.
        thrust_estimates: Optional expected per-rotor thrusts.

    Returns:
        The four-element loss vector.
    """
    expected = thrust_from_rpm(frame.rpm_meas, params) if thrust_estimates is None else np.asarray(thrust_estimates)
    matrix = mixer_matrix(params)
    wrench_f = matrix @ expected

    rot = quat_to_rotmat(filtered.attitude)
    z_body = rot[:, 2]
    v = filtered.velocity
    drag_force = rot @ (params.drag_diag * (rot.T @ v))
    force_loss = wrench_f[0] * z_body + params.mass * params.gravity_vector - params.mass * filtered.accel_world - drag_force
    thrust_loss = float(z_body @ force_loss)

    inertia = params.inertia_diag
    w = filtered.rates
    torque_loss = (
        wrench_f[1:]
        - inertia * filtered.ang_accel
        - np.cross(w, inertia * w)
        + yaw_damping_torque(w[2], params)
    )
    return np.linalg.solve(matrix, np.concatenate([[thrust_loss], torque_loss]))


def propeller_index(t_star, params: VehicleParams) -> np.ndarray:
    return np.asarray(t_star, dtype=float) / params.thrust_max


def takeoff_sign_table(params: VehicleParams) -> np.ndarray:
    """Expected signs of [x accel, y accel, roll accel, pitch accel] per failed rotor.

    Losing rotor i removes column i of the mixer from the torque, so the
    angular acceleration signs are those of ``-M[1:3, i]``; positive pitch
    pushes the vehicle toward +x and positive roll toward -y.
    """
    matrix = mixer_matrix(params)
    table = np.zeros((4, 4))
    for i in range(4):
        roll, pitch = np.sign(-matrix[1:3, i])
        table[i] = [pitch, -roll, roll, pitch]
    return table


def takeoff_monitor(accel_xy, ang_accel_xy, gamma_q, sign_table: np.ndarray) -> np.ndarray:
    """Per-rotor abnormality flags for one sample (before debouncing).

    A rotor is flagged when both lateral accelerations exceed their thresholds
    with its sign pattern, or both angular accelerations do.
    """
    gamma = np.asarray(gamma_q, dtype=float)
    signals = np.concatenate([np.asarray(accel_xy, dtype=float), np.asarray(ang_accel_xy, dtype=float)])
    scaled = sign_table * signals
    accel_hit = np.all(scaled[:, :2] >= gamma[:2], axis=1)
    ang_hit = np.all(scaled[:, 2:] >= gamma[2:], axis=1)
    return accel_hit | ang_hit


def arbitrate(
    stage: Stage,
    motor_hits,
    propeller_hits,
    takeoff_hits,
    clock: float,
    values: dict | None = None,
) -> list[FaultReport]:
    """Reports for debounced hits of the mechanisms active in ``stage``.

    At most one report per rotor, chosen by mechanism priority
    (motor, takeoff, propeller); reports for different rotors are ordered by
    that priority, then rotor index.
    """
    values = values or {}
    hits = {MECHANISM_MOTOR: np.asarray(motor_hits, dtype=bool)}
    if Stage(stage) is Stage.TAKEOFF:
        hits[MECHANISM_TAKEOFF] = np.asarray(takeoff_hits, dtype=bool)
    else:
        hits[MECHANISM_PROPELLER] = np.asarray(propeller_hits, dtype=bool)

    reports = []
    claimed = set()
    for mechanism in PRIORITY:
        if mechanism not in hits:
            continue
        for rotor in np.flatnonzero(hits[mechanism]):
            rotor = int(rotor)
            if rotor in claimed:
                continue
            claimed.add(rotor)
            value = values.get(mechanism)
            reports.append(
                FaultReport(
                    rotor=rotor,
                    fault_class=MECHANISM_CLASS[mechanism],
                    time=clock,
                    index_value=float(value[rotor]) if value is not None else float("nan"),
                    mechanism=mechanism,
                )
            )
    return reports


@dataclass
class DetectorSnapshot:
    """Index values of the last update, for logging."""

    motor: np.ndarray = field(default_factory=lambda: np.full(4, np.nan))
    propeller: np.ndarray = field(default_factory=lambda: np.full(4, np.nan))
    takeoff: np.ndarray = field(default_factory=lambda: np.zeros(4, dtype=bool))


class FaultDetector:
    """Per-vehicle detector state machine driven once per control tick."""

    def __init__(self, config: FddConfig, params: VehicleParams, dt: float, initial_thrusts=None):
        self.config = config
        self.params = params
        self.dt = dt
        self.stage = config.stage
        self.sign_table = takeoff_sign_table(params)
        self.rpm_floor = config.rpm_floor_fraction * float(rotor_rpm(hover_thrusts(params)[0], params))
        self._decay = float(np.exp(-dt / params.sigma))
        self._reference = np.zeros(4) if initial_thrusts is None else np.asarray(initial_thrusts, dtype=float).copy()
        self._counters = {m: np.zeros(4, dtype=int) for m in PRIORITY}
        self._degradation_counter = np.zeros(4, dtype=int)
        self.reports: list[FaultReport] = []
        self.degradations: dict[int, float] = {}
        self.multi_fault = False
        self.snapshot = DetectorSnapshot()

    @property
    def latched(self) -> FaultReport | None:
        return self.reports[0] if self.reports else None

    def set_stage(self, stage: Stage) -> None:
        stage = Stage(stage)
        if stage is not self.stage:
            logger.info("FDD stage %s -> %s", self.stage.value, stage.value)
            self.stage = stage
            for counter in self._counters.values():
                counter[:] = 0

    def _debounce(self, mechanism: str, condition: np.ndarray) -> np.ndarray:
        counter = self._counters[mechanism]
        counter[:] = np.where(condition, counter + 1, 0)
        return counter >= self.config.debounce_count

    def update(self, frame: SensorFrame, filtered: FilteredSignals, applied_command) -> list[FaultReport]:
        """Process one tick.

        Args:
            frame: Sensor frame at the end of the control period.
            filtered: Output of the filter bank for that frame.
            applied_command: Thrust command held during the period.

        Returns:
            Newly emitted reports (usually empty).
        """
        cfg = self.config
        command = np.asarray(applied_command, dtype=float)
        self._reference = command + (self._reference - command) * self._decay
        rpm_ref = rotor_rpm(self._reference, self.params)

        m_index = motor_index(frame.rpm_meas, rpm_ref, self.rpm_floor)
        motor_hits = self._debounce(MECHANISM_MOTOR, np.nan_to_num(m_index, nan=np.inf) <= cfg.gamma_m)

        p_index = np.full(4, np.nan)
        propeller_hits = np.zeros(4, dtype=bool)
        takeoff_flags = np.zeros(4, dtype=bool)
        if self.stage is Stage.TRACKING:
            if filtered.warm:
                p_index = propeller_index(thrust_loss_observer(frame, filtered, self.params), self.params)
                self._track_degradation(p_index, frame.timestamp)
            propeller_hits = self._debounce(MECHANISM_PROPELLER, np.nan_to_num(p_index, nan=-np.inf) >= cfg.gamma_p)
        else:
            yaw = quat_to_euler(filtered.attitude)[2]
            c, s = np.cos(yaw), np.sin(yaw)
            ax, ay = filtered.accel_world[:2]
            accel_heading = np.array([c * ax + s * ay, -s * ax + c * ay])
            takeoff_flags = takeoff_monitor(accel_heading, filtered.ang_accel[:2], cfg.gamma_q, self.sign_table)
        takeoff_hits = self._debounce(MECHANISM_TAKEOFF, takeoff_flags) if self.stage is Stage.TAKEOFF else takeoff_flags

        self.snapshot = DetectorSnapshot(motor=m_index, propeller=p_index, takeoff=takeoff_flags)
        candidates = arbitrate(
            self.stage,
            motor_hits,
            propeller_hits,
            takeoff_hits,
            frame.timestamp,
            {MECHANISM_MOTOR: m_index, MECHANISM_PROPELLER: p_index, MECHANISM_TAKEOFF: takeoff_flags.astype(float)},
        )
        known = {r.rotor for r in self.reports}
        fresh = [r for r in candidates if r.rotor not in known]
        for report in fresh:
            if self.reports:
                self.multi_fault = True
                logger.warning("Multiple rotor faults: rotor %d after rotor %d", report.rotor, self.reports[0].rotor)
            self.reports.append(report)
            logger.info(
                "t=%.4f fault on rotor %d: %s via %s (index %.3f)",
                report.time, report.rotor, report.fault_class.value, report.mechanism, report.index_value,
            )
        return fresh

    def _track_degradation(self, p_index: np.ndarray, timestamp: float) -> None:
        partial = (p_index >= self.config.degradation_floor) & (p_index < self.config.gamma_p)
        self._degradation_counter[:] = np.where(partial, self._degradation_counter + 1, 0)
        for rotor in np.flatnonzero(self._degradation_counter >= self.config.debounce_count):
            rotor = int(rotor)
            if rotor not in self.degradations:
                self.degradations[rotor] = timestamp
                logger.warning("t=%.4f rotor %d degraded: loss fraction %.2f", timestamp, rotor, p_index[rotor])


def replay(
    frames,
    commands,
    config: FddConfig,
    params: VehicleParams,
    dt: float,
    stages=None,
    initial_thrusts=None,
) -> list[FaultReport]:
    """Run a fresh detector over a recorded log and return every report."""
    filters = SensorFilters(dt, config.accel_cutoff, config.ang_accel_cutoff, params.gravity)
    detector = FaultDetector(config, params, dt, initial_thrusts)
    for k, (frame, command) in enumerate(zip(frames, commands)):
        if stages is not None:
            detector.set_stage(stages[k])
        detector.update(frame, filters.update(frame), command)
    return list(detector.reports)
