"""Tests for the tilt/yaw attitude error split."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from rotorguard.attitude import (
    attitude_error,
    attitude_error_decompose,
    quat_between,
    reduced_error_batch,
    reference_attitude,
    thrust_vector,
    yaw_quaternion,
)
from rotorguard.errors import InvalidInputError
from rotorguard.quaternion import (
    IDENTITY,
    quat_conj,
    quat_from_axis_angle,
    quat_mul,
    quat_normalize,
    quat_to_euler,
    quat_to_rotmat,
)


def _random_pairs(n, seed=0):
    rng = np.random.default_rng(seed)
    return quat_normalize(rng.normal(size=(n, 4))), quat_normalize(rng.normal(size=(n, 4)))


def test_identical_attitudes_give_zero_error():
    q = quat_from_axis_angle([0.3, -1.0, 0.2], 0.8)
    d = attitude_error_decompose(q, q)
    assert_allclose(d.error.as_vector(), 0.0, atol=1e-12)
    assert not d.singular


def test_pure_yaw_error_has_no_tilt():
    d = attitude_error_decompose(yaw_quaternion(0.4), IDENTITY)
    assert d.error.tilt_x == pytest.approx(0.0, abs=1e-12)
    assert d.error.tilt_y == pytest.approx(0.0, abs=1e-12)
    assert d.error.yaw_z == pytest.approx(np.sin(0.2))


def test_pure_tilt_error_has_no_yaw():
    d = attitude_error_decompose(quat_from_axis_angle([1.0, 0.0, 0.0], 0.3), IDENTITY)
    assert d.error.tilt_x == pytest.approx(np.sin(0.15))
    assert d.error.yaw_z == pytest.approx(0.0, abs=1e-12)
    assert d.error.tilt_sq == pytest.approx(np.sin(0.15) ** 2)


def test_parts_recompose_the_error():
    q_ref, q = _random_pairs(30)
    for a, b in zip(q_ref, q):
        d = attitude_error_decompose(a, b)
        assert d.q_tilde[0] >= 0.0
        assert_allclose(quat_mul(d.q_z, d.q_xy), d.q_tilde, atol=1e-12)
        assert d.q_xy[3] == pytest.approx(0.0, abs=1e-15)
        assert_allclose(d.q_z[1:3], 0.0, atol=1e-15)
        assert np.linalg.norm(d.q_xy) == pytest.approx(1.0)
        assert np.linalg.norm(d.q_z) == pytest.approx(1.0)
        # the tilt part carries all of the x/y magnitude
        assert d.error.tilt_x**2 + d.error.tilt_y**2 == pytest.approx(d.error.tilt_sq)


def test_half_turn_tilt_uses_fallback_axis():
    d = attitude_error_decompose(np.array([0.0, 1.0, 0.0, 0.0]), IDENTITY)
    assert d.singular
    assert_allclose(d.q_z, IDENTITY)
    assert_allclose(d.q_xy, [0.0, 1.0, 0.0, 0.0])
    assert_allclose(quat_mul(d.q_z, d.q_xy), d.q_tilde, atol=1e-12)


def test_error_is_reference_times_inverse_with_yaw_applied_last():
    q_ref = quat_from_axis_angle([0.3, 0.5, 0.8], 0.9)
    q = quat_from_axis_angle([-0.6, 0.2, 0.4], 0.7)
    d = attitude_error_decompose(q_ref, q)
    assert_allclose(d.q_tilde, quat_mul(q_ref, quat_conj(q)), atol=1e-12)
    assert_allclose(d.q_tilde, [0.894, 0.363, 0.245, 0.093], atol=2e-3)
    assert_allclose(quat_mul(d.q_z, d.q_xy), d.q_tilde, atol=1e-12)
    # the reverse order does not rebuild the error when both parts are non-trivial
    assert np.linalg.norm(quat_mul(d.q_xy, d.q_z) - d.q_tilde) > 0.05


def test_yaw_then_tilt_reference_splits_exactly():
    tilt = quat_from_axis_angle([1.0, -2.0, 0.0], 0.5)
    d = attitude_error_decompose(quat_mul(yaw_quaternion(0.6), tilt), IDENTITY)
    assert_allclose(d.q_z, yaw_quaternion(0.6), atol=1e-12)
    assert_allclose(d.q_xy, tilt, atol=1e-12)


def test_batch_matches_single_evaluation():
    q_ref, q = _random_pairs(12, seed=3)
    batch = reduced_error_batch(q_ref, q)
    for k in range(12):
        assert_allclose(batch[k], attitude_error_decompose(q_ref[k], q[k]).error.as_vector(), atol=1e-12)


def test_error_ignores_quaternion_sign():
    q_ref, q = _random_pairs(5, seed=4)
    assert_allclose(attitude_error(q_ref, q), attitude_error(-q_ref, q), atol=1e-12)


def test_decompose_rejects_non_unit_input():
    with pytest.raises(InvalidInputError):
        attitude_error_decompose([1.0, 0.5, 0.0, 0.0], IDENTITY)
    with pytest.raises(InvalidInputError):
        attitude_error_decompose(IDENTITY, [1.0, 0.0, 0.0])


def test_quat_between_maps_vectors():
    rng = np.random.default_rng(5)
    for _ in range(10):
        a, b = (v / np.linalg.norm(v) for v in rng.normal(size=(2, 3)))
        assert_allclose(quat_to_rotmat(quat_between(a, b)) @ a, b, atol=1e-12)
    flip = quat_between([0.0, 0.0, 1.0], [0.0, 0.0, -1.0])
    assert_allclose(quat_to_rotmat(flip) @ [0.0, 0.0, 1.0], [0.0, 0.0, -1.0], atol=1e-12)


def test_hover_force_points_up():
    force = thrust_vector([0.0, 0.0, 0.0], [0.0, 0.0, 0.0], 1.15, 9.81, [0.1, 0.1, 0.2])
    assert_allclose(force, [0.0, 0.0, 1.15 * 9.81])
    assert_allclose(reference_attitude(force), IDENTITY, atol=1e-12)


def test_reference_attitude_aligns_thrust_axis_and_heading():
    force = np.array([2.0, -1.0, 11.0])
    q = reference_attitude(force, yaw=0.3)
    assert_allclose(quat_to_rotmat(q)[:, 2], force / np.linalg.norm(force), atol=1e-12)
    assert_allclose(reference_attitude(np.zeros(3), yaw=0.3), yaw_quaternion(0.3))
    assert quat_to_euler(reference_attitude([0.0, 0.0, 1.0], yaw=0.3))[2] == pytest.approx(0.3)
