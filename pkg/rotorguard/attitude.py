"""Tilt-prioritized attitude error.

The error ``q_e = q_ref ⊗ q^-1`` is split into a yaw rotation ``q_z`` and a
tilt rotation ``q_xy`` whose axis lies in the x-y plane, so that
``q_e = q_z ⊗ q_xy``. The controller weights the two parts separately
and drops the yaw part after a rotor failure.
"""

from dataclasses import dataclass

import numpy as np

from rotorguard.errors import InvalidInputError
from rotorguard.quaternion import IDENTITY, quat_conj, quat_mul

SINGULAR_EPS = 1e-12


@dataclass(frozen=True)
class ReducedAttitudeError:
    """``[tilt_x, tilt_y, tilt_x^2 + tilt_y^2, yaw_z]`` of the error quaternion."""

    tilt_x: float
    tilt_y: float
    tilt_sq: float
    yaw_z: float

    def as_vector(self) -> np.ndarray:
        return np.array([self.tilt_x, self.tilt_y, self.tilt_sq, self.yaw_z])


@dataclass(frozen=True)
class AttitudeDecomposition:
    q_tilde: np.ndarray
    q_z: np.ndarray
    q_xy: np.ndarray
    error: ReducedAttitudeError
    singular: bool = False


def _decompose_batch(q_tilde: np.ndarray):
    w, x, y, z = np.moveaxis(q_tilde, -1, 0)
    n2 = w * w + z * z
    singular = n2 < SINGULAR_EPS
    n = np.sqrt(np.where(singular, 1.0, n2))

    q_z = np.stack([w / n, np.zeros_like(w), np.zeros_like(w), z / n], axis=-1)
    q_xy = np.stack([n2 / n, (w * x + y * z) / n, (w * y - x * z) / n, np.zeros_like(w)], axis=-1)

    if np.any(singular):
        # tilt of pi: any yaw split works, keep yaw at identity
        lateral = np.hypot(x, y)
        degenerate = lateral < SINGULAR_EPS
        safe = np.where(degenerate, 1.0, lateral)
        fallback_xy = np.stack(
            [np.zeros_like(w), np.where(degenerate, 1.0, x / safe), np.where(degenerate, 0.0, y / safe), np.zeros_like(w)],
            axis=-1,
        )
        q_z = np.where(singular[..., None], IDENTITY, q_z)
        q_xy = np.where(singular[..., None], fallback_xy, q_xy)
    return q_z, q_xy, singular


def attitude_error(q_ref: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Error quaternion ``q_ref ⊗ q^-1`` with non-negative scalar part, batched."""
    q_tilde = quat_mul(q_ref, quat_conj(q))
    sign = np.where(q_tilde[..., :1] < 0, -1.0, 1.0)
    return q_tilde * sign


def reduced_error_batch(q_ref: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Reduced error vectors ``(..., 4)`` for arrays of attitude pairs."""
    q_tilde = attitude_error(q_ref, q)
    q_z, q_xy, _ = _decompose_batch(q_tilde)
    tilt_sq = q_tilde[..., 1] ** 2 + q_tilde[..., 2] ** 2
    return np.stack([q_xy[..., 1], q_xy[..., 2], tilt_sq, q_z[..., 3]], axis=-1)


def attitude_error_decompose(q_ref, q) -> AttitudeDecomposition:
    """Split the attitude error into tilt and yaw parts.

    Args:
        q_ref: Reference attitude, unit quaternion.
        q: Current attitude, unit quaternion.

    Returns:
        The decomposition; ``singular`` is set when the tilt is a half turn
        and the fallback axis was used.
    """
    q_ref = np.asarray(q_ref, dtype=float)
    q = np.asarray(q, dtype=float)
    for name, value in (("q_ref", q_ref), ("q", q)):
        if value.shape != (4,) or abs(np.linalg.norm(value) - 1.0) > 1e-6:
            raise InvalidInputError(f"{name} must be a unit quaternion, got {value!r}")
    q_tilde = attitude_error(q_ref, q)
    q_z, q_xy, singular = _decompose_batch(q_tilde)
    tilt_sq = q_tilde[1] ** 2 + q_tilde[2] ** 2
    error = ReducedAttitudeError(float(q_xy[1]), float(q_xy[2]), float(tilt_sq), float(q_z[3]))
    return AttitudeDecomposition(q_tilde, q_z, q_xy, error, bool(singular))


def quat_between(a, b) -> np.ndarray:
    """Smallest rotation taking unit vector ``a`` onto unit vector ``b``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    dot = float(a @ b)
    if dot < -1.0 + 1e-12:
        axis = np.cross(a, [1.0, 0.0, 0.0])
        if np.linalg.norm(axis) < 1e-9:
            axis = np.cross(a, [0.0, 1.0, 0.0])
        axis = axis / np.linalg.norm(axis)
        return np.concatenate([[0.0], axis])
    q = np.concatenate([[1.0 + dot], np.cross(a, b)])
    return q / np.linalg.norm(q)


def yaw_quaternion(yaw: float) -> np.ndarray:
    return np.array([np.cos(0.5 * yaw), 0.0, 0.0, np.sin(0.5 * yaw)])


def thrust_vector(acceleration, velocity, mass: float, gravity: float, drag_diag) -> np.ndarray:
    """Force the rotors must produce to follow ``acceleration`` at ``velocity``."""
    return mass * (np.asarray(acceleration, dtype=float) + np.array([0.0, 0.0, gravity])) + np.asarray(
        drag_diag
    ) * np.asarray(velocity, dtype=float)


def reference_attitude(force, yaw: float = 0.0) -> np.ndarray:
    """Attitude whose body z axis is along ``force``, with the given heading."""
    force = np.asarray(force, dtype=float)
    norm = np.linalg.norm(force)
    if norm < 1e-9:
        return yaw_quaternion(yaw)
    tilt = quat_between(np.array([0.0, 0.0, 1.0]), force / norm)
    return quat_mul(tilt, yaw_quaternion(yaw))
