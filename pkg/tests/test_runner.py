"""Tests for closed-loop scenario runs."""

import json
import os

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from rotorguard.dynamics import VehicleParams, hover_thrusts
from rotorguard.errors import ConfigError
from rotorguard.nmpc import OcpConfig
from rotorguard.planner import PlannerLimits
from rotorguard.runlog import RunLog, compute_metrics
from rotorguard.runner import (
    Hold,
    Shifted,
    estimated_thrusts,
    lemniscate_trajectory,
    mission_reference,
    run_scenario,
    start_position,
    waypoint_trajectory,
)
from rotorguard.scenario import MissionConfig, Scenario, load_scenario
from rotorguard.sim import FailureEvent, FailureMode, FailureSchedule, NoiseProfile
from rotorguard.world import WorldSpec

PARAMS = VehicleParams()
QUIET = NoiseProfile(accel=0.0, gyro=0.0, rpm=0.0, position=0.0, velocity=0.0, attitude=0.0)
SHORT_HORIZON = OcpConfig(horizon=8, dt=0.05, iterations=1)


def _scenario(**kwargs):
    values = dict(name="short", duration=0.5, controller=SHORT_HORIZON, mission=MissionConfig(start=(0.0, 0.0, 1.0)))
    values.update(kwargs)
    return Scenario(**values)


def test_lemniscate_starts_and_ends_at_rest():
    center = np.array([0.0, 0.0, 1.0])
    traj = lemniscate_trajectory(center, (6.0, 3.0, 1.0), 1.0, ramp=2.0)
    assert_allclose(traj.evaluate(0.0), center, atol=1e-9)
    assert_allclose(traj.evaluate(traj.duration), center, atol=1e-6)
    assert_allclose(traj.evaluate(0.0, 1), 0.0, atol=1e-9)
    assert_allclose(traj.evaluate(traj.duration, 1), 0.0, atol=1e-9)
    quarter = traj.evaluate(traj.duration / 4.0)
    assert quarter[0] > 2.0
    speeds = [np.linalg.norm(traj.evaluate(t, 1)) for t in np.linspace(0.0, traj.duration, 200)]
    assert 1.0 < max(speeds) < 2.0
    with pytest.raises(ConfigError):
        lemniscate_trajectory(center, (6.0, 3.0, 1.0), 1.0, ramp=60.0)


def test_waypoint_trajectory_visits_each_point():
    start = [0.0, 0.0, 1.0]
    points = [[2.0, 0.0, 1.0], [2.0, 2.0, 1.5]]
    traj = waypoint_trajectory(start, points, 1.0)
    assert_allclose(traj.durations, [3.0, np.hypot(2.0, 0.5) * 1.5])
    assert_allclose(traj.evaluate(3.0), points[0], atol=1e-9)
    assert_allclose(traj.evaluate(traj.duration), points[1], atol=1e-9)


def test_start_position_and_references():
    takeoff = Scenario(duration=5.0, mission=MissionConfig(kind="takeoff", start=(1.0, 2.0, 0.4)))
    start = start_position(takeoff, None)
    assert_allclose(start, [1.0, 2.0, 0.0])
    climb = mission_reference(takeoff, start)
    assert climb.duration == pytest.approx(1.875)
    assert_allclose(climb.evaluate(climb.duration), [1.0, 2.0, 1.0], atol=1e-9)
    hover = Scenario(mission=MissionConfig(height=1.5))
    assert_allclose(start_position(hover, None), [0.0, 0.0, 1.5])
    hold = mission_reference(hover, np.array([0.0, 0.0, 1.5]))
    assert isinstance(hold, Hold)
    assert_allclose(hold.evaluate(3.0, 1), 0.0)


def test_shifted_reference_clamps_to_its_span():
    traj = waypoint_trajectory([0.0, 0.0, 1.0], [[1.0, 0.0, 1.0]], 1.0)
    shifted = Shifted(traj, 2.0)
    assert shifted.duration == pytest.approx(2.0 + traj.duration)
    assert_allclose(shifted.evaluate(0.0), [0.0, 0.0, 1.0], atol=1e-9)
    assert_allclose(shifted.evaluate(100.0), [1.0, 0.0, 1.0], atol=1e-9)
    assert shifted.state(2.0).shape == (3, 3)


def test_estimated_thrusts_zero_the_latched_rotor():
    rpm = np.full(4, 14142.0)
    thrusts = estimated_thrusts(rpm, PARAMS, None)
    assert_allclose(thrusts, PARAMS.k_n * 14142.0**2)
    assert_allclose(estimated_thrusts(rpm, PARAMS, 2), [thrusts[0], thrusts[1], 0.0, thrusts[3]])
    assert_allclose(estimated_thrusts(np.full(4, 1e5), PARAMS, None), PARAMS.thrust_max)


def test_quiet_hover_run():
    result = run_scenario(_scenario(noise=QUIET))
    assert len(result.log) == 101
    assert result.metrics.success
    assert result.metrics.rmse < 0.01
    assert not result.reports and not result.metrics.false_alarm
    assert_allclose(result.log.columns_of(("thrust_0", "thrust_1", "thrust_2", "thrust_3"))[-1],
                    hover_thrusts(PARAMS), rtol=0.05)


def test_runs_are_reproducible():
    first = run_scenario(_scenario(seed=11, duration=0.3))
    second = run_scenario(_scenario(seed=11, duration=0.3))
    assert_array_equal(first.log.data, second.log.data)
    other = run_scenario(_scenario(seed=12, duration=0.3))
    assert not np.array_equal(first.log.data, other.log.data)


def test_motor_stop_is_reported_and_logged():
    failures = FailureSchedule((FailureEvent(0.3, 0, FailureMode.MOTOR_STOP),))
    result = run_scenario(_scenario(duration=0.8, failures=failures))
    assert result.reports[0].rotor == 0
    assert result.metrics.detected_rotor == 0
    assert 0.0 < result.metrics.fdd_latency < 0.1
    assert not result.metrics.missed_detection
    fault_column = result.log.column("fault_rotor")
    assert fault_column[0] == -1 and fault_column[-1] == 0
    kinds = [event[0] for event in result.events]
    assert kinds.count("injection") == 1 and kinds.count("report") == len(result.reports)


def test_run_directory_contents(tmp_path):
    scenario = _scenario(noise=QUIET, duration=0.2)
    result = run_scenario(scenario, str(tmp_path / "run"))
    for name in ("log.csv", "timing.csv", "events.csv", "metrics.json", "scenario.ini"):
        assert os.path.isfile(tmp_path / "run" / name)
    with open(result.paths["metrics"], encoding="utf-8") as f:
        assert json.load(f) == result.metrics.to_dict()
    assert load_scenario(result.paths["scenario"]) == scenario
    reread = compute_metrics(RunLog.read_csv(result.paths["log"]), scenario)
    assert reread.rmse == result.metrics.rmse


def test_navigation_plans_toward_the_goal():
    scenario = Scenario(
        name="nav",
        duration=0.5,
        noise=QUIET,
        controller=SHORT_HORIZON,
        mission=MissionConfig(kind="navigate", reveal_radius=5.0),
        world=WorldSpec(kind="empty", size=(4.0, 2.0, 2.0), resolution=0.2),
        planner=PlannerLimits(v_max=1.0),
    )
    result = run_scenario(scenario)
    assert result.log.column("replans")[-1] >= 1
    clearance = result.log.column("clearance")
    assert np.all(np.isfinite(clearance)) and np.all(clearance > 0)
    assert result.log.column("ref_x")[-1] > 1.0
    assert not result.metrics.collision
