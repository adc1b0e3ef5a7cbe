"""Quaternion helpers.

Quaternions are stored scalar-first, ``[w, x, y, z]``, and rotate body-frame
vectors into the world frame. Every function accepts arrays with arbitrary
leading dimensions so the simulator and the NMPC predictor can share them.
"""

import numpy as np
from scipy.spatial.transform import Rotation

IDENTITY = np.array([1.0, 0.0, 0.0, 0.0])


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product ``a ⊗ b``."""
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=float), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=float), -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conj(q: np.ndarray) -> np.ndarray:
    """Conjugate; equals the inverse for unit quaternions."""
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrix (world←body) of a unit quaternion, shape ``(..., 3, 3)``."""
    w, x, y, z = np.moveaxis(np.asarray(q, dtype=float), -1, 0)
    r00 = 1.0 - 2.0 * (y * y + z * z)
    r01 = 2.0 * (x * y - w * z)
    r02 = 2.0 * (x * z + w * y)
    r10 = 2.0 * (x * y + w * z)
    r11 = 1.0 - 2.0 * (x * x + z * z)
    r12 = 2.0 * (y * z - w * x)
    r20 = 2.0 * (x * z - w * y)
    r21 = 2.0 * (y * z + w * x)
    r22 = 1.0 - 2.0 * (x * x + y * y)
    return np.stack(
        [np.stack([r00, r01, r02], -1), np.stack([r10, r11, r12], -1), np.stack([r20, r21, r22], -1)],
        axis=-2,
    )


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate body vector ``v`` into the world frame."""
    return np.einsum("...ij,...j->...i", quat_to_rotmat(q), v)


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    norm = np.linalg.norm(axis)
    if norm == 0.0:
        return IDENTITY.copy()
    half = 0.5 * angle
    return np.concatenate([[np.cos(half)], np.sin(half) * axis / norm])


def quat_from_rotvec(rotvec: np.ndarray) -> np.ndarray:
    """Quaternion of a rotation vector (axis times angle), scalar-first."""
    xyzw = Rotation.from_rotvec(np.asarray(rotvec, dtype=float)).as_quat()
    return np.roll(xyzw, 1, axis=-1)


def quat_to_euler(q: np.ndarray) -> np.ndarray:
    """Roll, pitch, yaw (rad) of a unit quaternion, intrinsic z-y-x."""
    xyzw = np.roll(np.asarray(q, dtype=float), -1, axis=-1)
    return Rotation.from_quat(xyzw).as_euler("ZYX")[..., ::-1]


def tilt_angle(q: np.ndarray) -> np.ndarray:
    """Angle between the body z axis and the world z axis."""
    w, x, y, z = np.moveaxis(np.asarray(q, dtype=float), -1, 0)
    cos_tilt = 1.0 - 2.0 * (x * x + y * y)
    return np.arccos(np.clip(cos_tilt, -1.0, 1.0))
