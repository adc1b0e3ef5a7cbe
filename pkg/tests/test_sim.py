"""Tests for the simulation engine: failures, integration, sensing and filters."""

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from rotorguard.dynamics import ControlCommand, VehicleParams, VehicleState, dynamics_batch, hover_thrusts
from rotorguard.errors import ConfigError
from rotorguard.sim import (
    FailureEvent,
    FailureMode,
    FailureSchedule,
    FilterState,
    NoiseProfile,
    SensorFilters,
    Simulator,
    effectiveness_at,
    lowpass,
    sense,
    step,
)

PARAMS = VehicleParams()
HOVER = hover_thrusts(PARAMS)


def _schedule(*events):
    return FailureSchedule(tuple(FailureEvent(*e) for e in events))


def test_event_text_round_trip():
    event = FailureEvent(2.5, 3, FailureMode.PROPELLER_LOSS, 0.6)
    assert FailureEvent.from_text(event.to_text()) == event
    assert FailureEvent.from_text("1.0:0:motor_stop") == FailureEvent(1.0, 0, FailureMode.MOTOR_STOP)


def test_event_validation():
    with pytest.raises(ConfigError):
        FailureEvent(-1.0, 0, "motor_stop")
    with pytest.raises(ConfigError):
        FailureEvent(1.0, 4, "motor_stop")
    with pytest.raises(ConfigError):
        FailureEvent(1.0, 0, "motor_stop", 0.5)
    with pytest.raises(ConfigError):
        FailureEvent.from_text("1.0:0:explodes")
    with pytest.raises(ConfigError):
        _schedule((2.0, 0, "motor_stop"), (1.0, 1, "motor_stop"))


def test_effectiveness_follows_schedule():
    schedule = _schedule((1.0, 0, "propeller_loss", 0.4), (2.0, 2, "motor_stop"))
    assert_allclose(effectiveness_at(schedule, 0.5), [1, 1, 1, 1])
    assert_allclose(effectiveness_at(schedule, 1.0), [0.6, 1, 1, 1])
    assert_allclose(effectiveness_at(schedule, 5.0), [0.6, 1, 0, 1])


def test_step_keeps_hover():
    state = VehicleState.hover(PARAMS)
    nxt = step(state, ControlCommand(HOVER), np.ones(4), 0.0025, PARAMS)
    assert_allclose(nxt.to_vector(), state.to_vector(), atol=1e-9)


def test_step_rejects_bad_arguments():
    state = VehicleState.hover(PARAMS)
    with pytest.raises(ConfigError):
        step(state, ControlCommand(HOVER), np.ones(4), 0.02, PARAMS)
    with pytest.raises(ConfigError):
        step(state, ControlCommand(HOVER), [1.0, 1.0, 1.0, 1.2], 0.0025, PARAMS)


def test_losing_rotor_zero_tips_away_from_it():
    state = VehicleState.hover(PARAMS)
    e = np.array([0.0, 1.0, 1.0, 1.0])
    for _ in range(40):
        state = step(state, ControlCommand(HOVER), e, 0.0025, PARAMS)
    # rotor 0 sits at -x/-y torque; without it the remaining torque is positive
    assert state.rates[0] > 0 and state.rates[1] > 0
    assert state.velocity[2] < 0
    assert state.thrusts[0] == 0.0


def test_step_clamps_to_effective_limit():
    state = VehicleState.hover(PARAMS)
    e = np.array([0.5, 1.0, 1.0, 1.0])
    for _ in range(100):
        state = step(state, ControlCommand(np.full(4, 100.0)), e, 0.0025, PARAMS)
        assert np.all(state.thrusts <= e * PARAMS.thrust_max + 1e-12)


def test_sense_without_noise_reads_specific_force():
    state = VehicleState.hover(PARAMS)
    xdot = dynamics_batch(state.to_vector(), HOVER, PARAMS)
    frame = sense(state, xdot, np.random.default_rng(0), NoiseProfile.zero(), PARAMS, 0.0)
    assert_allclose(frame.accel_meas, [0.0, 0.0, 9.81], atol=1e-9)
    assert_allclose(frame.gyro_meas, 0.0)
    assert_allclose(frame.rpm_meas, np.sqrt(HOVER / PARAMS.k_n))
    assert 14000 < frame.rpm_meas[0] < 14200


def test_sense_is_deterministic_per_seed():
    state = VehicleState.hover(PARAMS)
    xdot = np.zeros(17)
    a = [sense(state, xdot, rng, NoiseProfile(), PARAMS, 0.0) for rng in [np.random.default_rng(3)] * 3]
    b = [sense(state, xdot, rng, NoiseProfile(), PARAMS, 0.0) for rng in [np.random.default_rng(3)] * 3]
    for fa, fb in zip(a, b):
        assert_array_equal(fa.accel_meas, fb.accel_meas)
        assert_array_equal(fa.rpm_meas, fb.rpm_meas)
        assert_array_equal(fa.odom_attitude, fb.odom_attitude)


def test_lowpass_dc_gain():
    f = FilterState(20.0)
    for _ in range(50):
        f, y = lowpass(f, [3.0, -1.0], 0.005)
    assert_allclose(y, [3.0, -1.0])


def test_lowpass_step_response_time_constant():
    dt, cutoff = 1e-4, 10.0
    tau = 1.0 / (2.0 * np.pi * cutoff)
    f, _ = lowpass(FilterState(cutoff), 0.0, dt)
    for _ in range(int(round(tau / dt))):
        f, y = lowpass(f, 1.0, dt)
    assert float(y) == pytest.approx(0.632, rel=0.02)


def test_lowpass_infinite_cutoff_passes_input():
    f, _ = lowpass(FilterState(1e12), 0.0, 0.005)
    f, y = lowpass(f, 2.5, 0.005)
    assert float(y) == pytest.approx(2.5, rel=1e-9)


def test_filter_validation():
    with pytest.raises(ConfigError):
        FilterState(0.0)
    with pytest.raises(ConfigError):
        lowpass(FilterState(5.0), 1.0, 0.0)
    with pytest.raises(ConfigError):
        SensorFilters(0.005, accel_cutoff=120.0)


def test_filters_report_world_acceleration_at_hover():
    sim = Simulator(PARAMS, VehicleState.hover(PARAMS), noise=NoiseProfile.zero())
    filters = SensorFilters(0.005)
    for _ in range(100):
        signals = filters.update(sim.advance(HOVER))
    assert signals.warm
    assert_allclose(signals.accel_world, 0.0, atol=1e-9)
    assert_allclose(signals.ang_accel, 0.0, atol=1e-9)


def test_simulator_is_deterministic():
    def run():
        sim = Simulator(PARAMS, VehicleState.hover(PARAMS), _schedule((0.1, 0, "motor_stop")), seed=11)
        return np.array([np.concatenate([sim.advance(HOVER).accel_meas, sim.state.to_vector()]) for _ in range(60)])

    assert_array_equal(run(), run())


def test_motor_stop_latches_zero_thrust():
    sim = Simulator(PARAMS, VehicleState.hover(PARAMS), _schedule((0.05, 1, "motor_stop")), noise=NoiseProfile.zero())
    for _ in range(100):
        frame = sim.advance(np.full(4, 5.0))
        if sim.time > 0.05 + 1e-9:
            assert sim.state.thrusts[1] == 0.0
            assert frame.rpm_meas[1] == 0.0
    assert sim.applied_events == [FailureEvent(0.05, 1, FailureMode.MOTOR_STOP)]


def test_propeller_loss_keeps_motor_spinning():
    sim = Simulator(PARAMS, VehicleState.hover(PARAMS), _schedule((0.05, 0, "propeller_loss")),
                    noise=NoiseProfile.zero())
    for _ in range(40):
        frame = sim.advance(HOVER)
    assert sim.state.thrusts[0] == 0.0
    assert frame.rpm_meas[0] == pytest.approx(np.sqrt(HOVER[0] / PARAMS.k_n), rel=1e-6)


def test_grounded_vehicle_rests_on_the_floor():
    sim = Simulator(PARAMS, VehicleState.hover(PARAMS, (0.0, 0.0, 0.0)), noise=NoiseProfile.zero(), grounded=True)
    for _ in range(50):
        sim.advance(HOVER * 0.5)
    assert sim.state.position[2] == 0.0
    assert not sim.lifted
    for _ in range(100):
        sim.advance(HOVER * 1.3)
    assert sim.lifted and sim.state.position[2] > 0.02


def test_zero_thrust_energy_never_increases():
    state = VehicleState(
        position=np.array([0.0, 0.0, 50.0]),
        velocity=np.array([2.0, -1.0, 0.5]),
        rates=np.array([1.0, -2.0, 6.0]),
    )
    sim = Simulator(PARAMS, state, noise=NoiseProfile.zero())
    inertia = PARAMS.inertia_diag

    def energy(s):
        return (0.5 * PARAMS.mass * s.velocity @ s.velocity + PARAMS.weight * s.position[2]
                + 0.5 * s.rates @ (inertia * s.rates))

    previous = energy(sim.state)
    for _ in range(200):
        sim.advance(np.zeros(4))
        current = energy(sim.state)
        assert current <= previous + 1e-9
        previous = current


def test_simulator_rate_validation():
    with pytest.raises(ConfigError):
        Simulator(PARAMS, VehicleState.hover(PARAMS), physics_rate=300.0, control_rate=200.0)
    with pytest.raises(ConfigError):
        Simulator(PARAMS, VehicleState.hover(PARAMS), physics_rate=50.0, control_rate=50.0)
