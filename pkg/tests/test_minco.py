"""Tests for minimum-jerk splines and their gradients."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from rotorguard.errors import InvalidInputError
from rotorguard.minco import (
    NCOEF,
    PiecewiseTrajectory,
    basis,
    eval_traj,
    export_trajectory,
    jerk_energy,
    jerk_energy_terms,
    load_segments,
    minco_adjoint,
    minco_map,
    minimum_jerk_through,
    rest_boundary,
    sample_traj,
)

HEAD = np.array([[0.0, 0.0, 1.0], [0.5, 0.0, 0.0], [0.0, 0.2, 0.0]])
TAIL = rest_boundary([4.0, 2.0, 1.5])
WAYPOINTS = np.array([[1.0, 0.5, 1.2], [2.0, 1.8, 0.9], [3.0, 1.0, 1.4]])
DURATIONS = np.array([1.0, 0.8, 1.3, 1.1])


def _dense_oracle(waypoints, durations, head, tail):
    """Minimize jerk energy with a dense KKT solve, imposing only C2 continuity."""
    m = len(durations)
    n = NCOEF * m
    hessian = np.zeros((n, n))
    for i, end in enumerate(durations):
        for k in range(3, NCOEF):
            for j in range(3, NCOEF):
                ak, aj = k * (k - 1) * (k - 2), j * (j - 1) * (j - 2)
                p = k + j - 5
                hessian[NCOEF * i + k, NCOEF * i + j] = ak * aj * end**p / p
    rows, rhs = [], []

    def constraint(entries, value):
        row = np.zeros(n)
        for segment, values in entries:
            row[NCOEF * segment : NCOEF * segment + NCOEF] += values
        rows.append(row)
        rhs.append(value)

    for d in range(3):
        constraint([(0, basis(0.0, d))], head[d])
        constraint([(m - 1, basis(durations[-1], d))], tail[d])
    for j in range(m - 1):
        constraint([(j, basis(durations[j], 0))], waypoints[j])
        for d in range(3):
            constraint([(j, basis(durations[j], d)), (j + 1, -basis(0.0, d))], np.zeros(3))
    a = np.array(rows)
    kkt = np.block([[2.0 * hessian, a.T], [a, np.zeros((len(a), len(a)))]])
    solution = np.linalg.solve(kkt, np.vstack([np.zeros((n, 3)), np.array(rhs)]))
    return solution[:n].reshape(m, NCOEF, 3)


def test_single_segment_rest_to_rest():
    traj = minimum_jerk_through([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]], [1.0])
    assert_allclose(traj.coeffs[0][:, 0], [0, 0, 0, 10, -15, 6], atol=1e-10)
    assert jerk_energy(traj) == pytest.approx(720.0)


def test_boundary_and_waypoint_conditions():
    traj = minco_map(WAYPOINTS, DURATIONS, HEAD, TAIL)
    for d in range(3):
        assert_allclose(traj.evaluate(0.0, d), HEAD[d], atol=1e-10)
        assert_allclose(traj.evaluate(traj.duration, d), TAIL[d], atol=1e-9)
    assert_allclose(traj.waypoints, WAYPOINTS, atol=1e-10)


def test_junctions_are_smooth_to_fourth_order():
    traj = minco_map(WAYPOINTS, DURATIONS, HEAD, TAIL)
    for j in range(traj.segment_count - 1):
        for d in range(5):
            left = traj.coeffs[j].T @ basis(DURATIONS[j], d)
            right = traj.coeffs[j + 1].T @ basis(0.0, d)
            assert_allclose(left, right, atol=1e-8)


def test_matches_dense_quadratic_program():
    traj = minco_map(WAYPOINTS, DURATIONS, HEAD, TAIL)
    oracle = _dense_oracle(WAYPOINTS, DURATIONS, HEAD, TAIL)
    assert_allclose(traj.coeffs, oracle, atol=1e-6)


def test_energy_terms_match_finite_differences():
    traj = minco_map(WAYPOINTS, DURATIONS, HEAD, TAIL)
    _, grad_c, grad_t = jerk_energy_terms(traj)
    h = 1e-6

    def with_coeff(delta):
        coeffs = traj.coeffs.copy()
        coeffs[1, 4, 2] += delta
        return jerk_energy(PiecewiseTrajectory(traj.durations, coeffs, traj.head, traj.tail))

    def with_duration(delta):
        durations = traj.durations + np.array([0.0, 0.0, delta, 0.0])
        return jerk_energy(PiecewiseTrajectory(durations, traj.coeffs, traj.head, traj.tail))

    assert (with_coeff(h) - with_coeff(-h)) / (2 * h) == pytest.approx(grad_c[1, 4, 2], rel=1e-5, abs=1e-6)
    assert (with_duration(h) - with_duration(-h)) / (2 * h) == pytest.approx(grad_t[2], rel=1e-5, abs=1e-6)


def test_adjoint_gradient_matches_finite_differences():
    def energy(q, t):
        return jerk_energy(minco_map(q, t, HEAD, TAIL))

    traj = minco_map(WAYPOINTS, DURATIONS, HEAD, TAIL)
    _, grad_c, grad_t = jerk_energy_terms(traj)
    grad_q, grad_total_t = minco_adjoint(traj, grad_c, grad_t)
    h = 1e-6
    for j in range(len(WAYPOINTS)):
        for axis in range(3):
            plus, minus = WAYPOINTS.copy(), WAYPOINTS.copy()
            plus[j, axis] += h
            minus[j, axis] -= h
            numeric = (energy(plus, DURATIONS) - energy(minus, DURATIONS)) / (2 * h)
            assert grad_q[j, axis] == pytest.approx(numeric, rel=1e-4, abs=1e-4)
    for i in range(len(DURATIONS)):
        plus, minus = DURATIONS.copy(), DURATIONS.copy()
        plus[i] += h
        minus[i] -= h
        numeric = (energy(WAYPOINTS, plus) - energy(WAYPOINTS, minus)) / (2 * h)
        assert grad_total_t[i] == pytest.approx(numeric, rel=1e-4, abs=1e-4)


def test_waypoint_gradient_vanishes_at_optimum_of_free_waypoint():
    # a straight rest-to-rest line through its own minimum-jerk midpoint
    line = minimum_jerk_through([[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]], [2.0])
    midpoint = line.evaluate(1.0)
    traj = minco_map([midpoint], [1.0, 1.0], rest_boundary([0, 0, 0]), rest_boundary([2, 0, 0]))
    _, grad_c, grad_t = jerk_energy_terms(traj)
    grad_q, _ = minco_adjoint(traj, grad_c, grad_t)
    assert_allclose(grad_q, 0.0, atol=1e-8)


def test_input_validation():
    with pytest.raises(InvalidInputError):
        minco_map(WAYPOINTS, [1.0, 0.0, 1.0, 1.0], HEAD, TAIL)
    with pytest.raises(InvalidInputError):
        minco_map(WAYPOINTS[:2], DURATIONS, HEAD, TAIL)
    with pytest.raises(InvalidInputError):
        minco_map(np.zeros((0, 3)), [], HEAD, TAIL)
    traj = minco_map(WAYPOINTS, DURATIONS, HEAD, TAIL)
    with pytest.raises(InvalidInputError):
        eval_traj(traj, 1.0, 5)


def test_evaluation_outside_span_is_clamped():
    traj = minco_map(WAYPOINTS, DURATIONS, HEAD, TAIL)
    value, clamped = eval_traj(traj, traj.duration + 1.0)
    assert clamped
    assert_allclose(value, TAIL[0], atol=1e-9)
    assert not eval_traj(traj, 0.5)[1]


def test_samples_at_fixed_rate():
    traj = minco_map(WAYPOINTS, DURATIONS, HEAD, TAIL)
    samples = sample_traj(traj, 100.0)
    assert len(samples) == int(np.floor(traj.duration * 100 + 1e-9)) + 1
    assert_allclose(np.diff(samples[:, 0]), 0.01)
    assert_allclose(samples[0, 1:4], HEAD[0])
    assert_allclose(samples[0, 4:7], HEAD[1])


def test_export_and_reload(tmp_path):
    traj = minco_map(WAYPOINTS, DURATIONS, HEAD, TAIL)
    segments, samples = export_trajectory(traj, str(tmp_path / "trajectory"))
    loaded = load_segments(segments)
    assert_allclose(loaded.durations, traj.durations)
    assert_allclose(loaded.coeffs, traj.coeffs)
    assert_allclose(loaded.head, HEAD, atol=1e-12)
    with open(samples, encoding="utf-8") as f:
        assert f.readline().strip() == "t,px,py,pz,vx,vy,vz,ax,ay,az"
