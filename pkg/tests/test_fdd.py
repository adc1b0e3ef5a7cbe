"""Tests for failure detection and diagnosis."""

from dataclasses import replace

import numpy as np
import pytest
from numpy.testing import assert_allclose

from rotorguard.dynamics import VehicleParams, VehicleState, hover_thrusts, mixer_matrix, rotor_rpm
from rotorguard.fdd import (
    FaultClass,
    FaultDetector,
    FddConfig,
    Stage,
    arbitrate,
    motor_index,
    propeller_index,
    replay,
    takeoff_monitor,
    takeoff_sign_table,
    thrust_loss_observer,
)
from rotorguard.errors import ConfigError
from rotorguard.quaternion import IDENTITY
from rotorguard.sim import FailureEvent, FailureSchedule, FilteredSignals, NoiseProfile, SensorFilters, SensorFrame, Simulator

PARAMS = VehicleParams()
HOVER = hover_thrusts(PARAMS)
DT = 0.005


def _consistent(commanded, actual, timestamp=1.0):
    """Noise-free frame and filtered signals for a level vehicle at rest whose rotors make ``actual``."""
    commanded = np.asarray(commanded, dtype=float)
    actual = np.asarray(actual, dtype=float)
    wrench = mixer_matrix(PARAMS) @ actual
    accel = np.array([0.0, 0.0, wrench[0] / PARAMS.mass - PARAMS.gravity])
    ang_accel = wrench[1:] / PARAMS.inertia_diag
    frame = SensorFrame(
        timestamp,
        accel_meas=accel + np.array([0.0, 0.0, PARAMS.gravity]),
        gyro_meas=np.zeros(3),
        rpm_meas=rotor_rpm(commanded, PARAMS),
        odom_position=np.zeros(3),
        odom_velocity=np.zeros(3),
        odom_attitude=IDENTITY.copy(),
    )
    filtered = FilteredSignals(accel, ang_accel, np.zeros(3), IDENTITY.copy(), np.zeros(3), True)
    return frame, filtered


def test_motor_index_ratio():
    assert motor_index([1528.0], [10185.0])[0] == pytest.approx(0.150, abs=1e-3)
    assert motor_index([5000.0], [5000.0])[0] == 1.0
    assert motor_index([0.21 * 8000.0], [8000.0])[0] > 0.2


def test_motor_index_undefined_below_floor():
    m = motor_index([0.0, 100.0], [500.0, 9000.0], floor=1000.0)
    assert np.isnan(m[0])
    assert m[1] == pytest.approx(100.0 / 9000.0)


def test_observer_is_zero_for_consistent_hover():
    frame, filtered = _consistent(HOVER, HOVER)
    assert_allclose(thrust_loss_observer(frame, filtered, PARAMS), 0.0, atol=1e-6 * PARAMS.thrust_max)


def test_observer_recovers_lost_rotor_thrust():
    actual = HOVER.copy()
    actual[0] = 0.0
    frame, filtered = _consistent(HOVER, actual)
    assert_allclose(thrust_loss_observer(frame, filtered, PARAMS), [HOVER[0], 0, 0, 0], atol=1e-9)


def test_observer_splits_symmetric_loss_equally():
    actual = HOVER * np.array([1.0, 1.0, 0.5, 0.5])
    frame, filtered = _consistent(HOVER, actual)
    t_star = thrust_loss_observer(frame, filtered, PARAMS)
    assert t_star[2] == pytest.approx(t_star[3])
    assert_allclose(t_star[:2], 0.0, atol=1e-9)


def test_observer_ignores_lateral_force_residual():
    frame, filtered = _consistent(HOVER, HOVER)
    gust = replace(filtered, accel_world=filtered.accel_world + np.array([0.8, -0.5, 0.0]))
    assert_allclose(thrust_loss_observer(frame, gust, PARAMS), 0.0, atol=1e-9)


def test_observer_reports_excess_thrust_as_negative_loss():
    frame, filtered = _consistent(HOVER, HOVER * 1.1)
    t_star = thrust_loss_observer(frame, filtered, PARAMS)
    assert_allclose(t_star, -0.1 * HOVER, atol=1e-9)


def test_propeller_index_thresholds():
    p = propeller_index([0.82 * PARAMS.thrust_max, 0.0, 0.5 * PARAMS.thrust_max, 0.0], PARAMS)
    assert_allclose(p, [0.82, 0.0, 0.5, 0.0])
    assert list(p >= FddConfig().gamma_p) == [True, False, False, False]


def test_takeoff_sign_table_rotor_zero():
    table = takeoff_sign_table(PARAMS)
    # rotor 0: x acceleration positive, y acceleration negative
    assert list(table[0, :2]) == [1.0, -1.0]
    assert len({tuple(row) for row in table}) == 4


def test_takeoff_monitor_flags_matching_pattern_only():
    table = takeoff_sign_table(PARAMS)
    gamma = FddConfig().gamma_q
    assert not takeoff_monitor([0.0, 0.0], [0.0, 0.0], gamma, table).any()
    assert list(takeoff_monitor([0.01, -0.01], [0.0, 0.0], gamma, table)) == [True, False, False, False]
    assert not takeoff_monitor([0.004, -0.004], [0.1, 0.1], gamma, table).any()
    ang = -mixer_matrix(PARAMS)[1:3, 3] * 100.0
    assert list(takeoff_monitor([0.0, 0.0], ang, gamma, table)) == [False, False, False, True]


def test_arbitrate_priority_and_stage_gating():
    hits = np.array([True, False, False, False])
    reports = arbitrate(Stage.TRACKING, hits, hits, hits, 2.0)
    assert len(reports) == 1
    assert reports[0].fault_class is FaultClass.MOTOR
    none = np.zeros(4, dtype=bool)
    assert arbitrate(Stage.TAKEOFF, none, hits, none, 2.0) == []
    assert arbitrate(Stage.TRACKING, none, none, hits, 2.0) == []
    both = arbitrate(Stage.TRACKING, hits, np.array([False, False, True, False]), none, 2.0)
    assert [(r.rotor, r.fault_class) for r in both] == [(0, FaultClass.MOTOR), (2, FaultClass.PROPELLER)]


def test_config_validation():
    with pytest.raises(ConfigError):
        FddConfig(gamma_m=0.0)
    with pytest.raises(ConfigError):
        FddConfig(gamma_p=1.5)
    with pytest.raises(ConfigError):
        FddConfig(gamma_q=(0.1, 0.1, 0.1))
    with pytest.raises(ConfigError):
        FddConfig(debounce_count=0)


def test_detector_reports_propeller_after_debounce():
    command = HOVER.copy()
    command[0] = 7.0
    actual = HOVER.copy()
    actual[0] = 0.0
    detector = FaultDetector(FddConfig(), PARAMS, DT, initial_thrusts=command)
    emitted = []
    for k in range(5):
        frame, filtered = _consistent(command, actual, timestamp=1.0 + k * DT)
        emitted.append(detector.update(frame, filtered, command))
    assert [len(e) for e in emitted] == [0, 0, 1, 0, 0]
    report = emitted[2][0]
    assert (report.rotor, report.fault_class, report.mechanism) == (0, FaultClass.PROPELLER, "propeller_index")
    assert report.index_value == pytest.approx(7.0 / PARAMS.thrust_max)
    assert detector.latched is report


def test_partial_loss_is_a_degradation_not_a_fault():
    command = HOVER.copy()
    actual = HOVER * np.array([1.0, 1.0, 1.0, 0.3])
    detector = FaultDetector(FddConfig(), PARAMS, DT, initial_thrusts=command)
    for k in range(10):
        frame, filtered = _consistent(command, actual, timestamp=k * DT)
        detector.update(frame, filtered, command)
    assert detector.reports == []
    assert list(detector.degradations) == [3]
    assert detector.snapshot.propeller[3] == pytest.approx(0.7 * HOVER[3] / PARAMS.thrust_max)


def _hover_run(schedule, stage=Stage.TRACKING, noise=None, ticks=100, command=None, grounded=False, seed=0):
    start = (0.0, 0.0, 0.0) if grounded else (0.0, 0.0, 1.0)
    sim = Simulator(PARAMS, VehicleState.hover(PARAMS, start), schedule,
                    NoiseProfile.zero() if noise is None else noise, seed=seed, grounded=grounded)
    command = HOVER if command is None else command
    filters = SensorFilters(DT)
    detector = FaultDetector(FddConfig(stage=stage), PARAMS, DT, initial_thrusts=sim.state.thrusts)
    frames = []
    for _ in range(ticks):
        frame = sim.advance(command)
        frames.append(frame)
        detector.update(frame, filters.update(frame), command)
    return detector, frames


def test_motor_stop_detected_within_fifty_milliseconds():
    detector, _ = _hover_run(FailureSchedule((FailureEvent(0.2, 0, "motor_stop"),)), ticks=80)
    report = detector.latched
    assert report is not None
    assert (report.rotor, report.fault_class) == (0, FaultClass.MOTOR)
    assert 0.2 < report.time <= 0.25 + 1e-9


def test_takeoff_monitor_catches_propeller_loss_at_liftoff():
    detector, _ = _hover_run(
        FailureSchedule((FailureEvent(0.3, 0, "propeller_loss"),)),
        stage=Stage.TAKEOFF,
        ticks=80,
        command=HOVER * 1.2,
        grounded=True,
    )
    report = detector.latched
    assert report is not None
    assert (report.rotor, report.fault_class) == (0, FaultClass.TAKEOFF_DETECTED)
    assert 0.3 < report.time <= 0.32 + 1e-9


def test_no_false_alarm_in_noisy_hover():
    detector, _ = _hover_run(FailureSchedule(), noise=NoiseProfile(), ticks=4000, seed=5)
    assert detector.reports == []
    assert detector.degradations == {}


def test_replay_reproduces_live_reports():
    schedule = FailureSchedule((FailureEvent(0.1, 2, "motor_stop"),))
    detector, frames = _hover_run(schedule, noise=NoiseProfile(), ticks=60, seed=9)
    commands = [HOVER] * len(frames)
    first = replay(frames, commands, FddConfig(), PARAMS, DT, initial_thrusts=HOVER)
    second = replay(frames, commands, FddConfig(), PARAMS, DT, initial_thrusts=HOVER)
    assert first == second == detector.reports
    assert first[0].rotor == 2


def test_latched_rotor_is_never_reported_twice():
    detector, _ = _hover_run(FailureSchedule((FailureEvent(0.1, 1, "motor_stop"),)), ticks=120)
    assert [r.rotor for r in detector.reports].count(1) == 1
