"""Quadrotor physical types and continuous-time dynamics.

The model covers rigid-body translation with rotor drag, quaternion
kinematics, rotational dynamics with gyroscopic coupling and aerodynamic yaw
damping, the thrust mixer and first-order motor lag. The full state is a
17-vector laid out as ``[position(3), quaternion(4), velocity(3),
body rates(3), rotor thrusts(4)]``.
"""

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from rotorguard.errors import ConfigError, InvalidInputError, InvalidStateError
from rotorguard.quaternion import IDENTITY, quat_mul, quat_normalize, quat_to_rotmat

STATE_DIM = 17
INPUT_DIM = 4
POS = slice(0, 3)
QUAT = slice(3, 7)
VEL = slice(7, 10)
RATE = slice(10, 13)
THRUST = slice(13, 17)

QUAT_TOLERANCE = 1e-6
SQRT2_2 = np.sqrt(2.0) / 2.0


@dataclass(frozen=True)
class VehicleParams:
    """Physical and actuation constants of the vehicle.

    ``k_n`` maps squared rotor speed in rev/min to thrust in newtons; with the
    default value a 2.82 N hover thrust corresponds to about 14 100 rev/min.
    """

    mass: float = 1.15
    inertia: tuple = (6.862e-3, 6.992e-3, 8.650e-3)
    r_d: float = 0.125
    k_n: float = 1.41e-8
    kappa_t: float = 0.01
    drag: tuple = (0.48, 0.50, 0.65)
    k_d_psi: float = 0.011
    sigma: float = 0.03
    thrust_max: float = 8.0
    gravity: float = 9.81
    rotor_count: int = 4

    def __post_init__(self):
        object.__setattr__(self, "inertia", tuple(float(v) for v in self.inertia))
        object.__setattr__(self, "drag", tuple(float(v) for v in self.drag))
        for name in ("inertia", "drag"):
            values = getattr(self, name)
            if len(values) != 3:
                raise ConfigError(f"vehicle.{name}", "expected three diagonal entries")
            if not all(np.isfinite(v) and v > 0 for v in values):
                raise ConfigError(f"vehicle.{name}", "diagonal entries must be positive")
        for name in ("mass", "r_d", "k_n", "kappa_t", "k_d_psi", "sigma", "thrust_max", "gravity"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0):
                raise ConfigError(f"vehicle.{name}", f"must be positive, got {value!r}")
        if self.rotor_count != 4:
            # Other layouts only need a different mixer_matrix(); not supported yet.
            raise ConfigError("vehicle.rotor_count", "only the four-rotor X layout is supported")
        if 4 * self.thrust_max <= self.mass * self.gravity:
            raise ConfigError("vehicle.thrust_max", "four rotors at the limit cannot lift the vehicle")

    @property
    def inertia_diag(self) -> np.ndarray:
        return np.array(self.inertia)

    @property
    def drag_diag(self) -> np.ndarray:
        return np.array(self.drag)

    @property
    def weight(self) -> float:
        return self.mass * self.gravity

    @property
    def gravity_vector(self) -> np.ndarray:
        return np.array([0.0, 0.0, -self.gravity])


@dataclass(frozen=True)
class Wrench:
    """Total thrust (N) along body z and body torque (N·m)."""

    thrust: float
    torque: np.ndarray

    def as_vector(self) -> np.ndarray:
        return np.concatenate([[self.thrust], self.torque])


@dataclass(frozen=True)
class ControlCommand:
    """Per-rotor thrust commands (N) issued at ``timestamp`` (s)."""

    thrusts: np.ndarray
    timestamp: float = 0.0

    def clamped(self, lower, upper) -> "ControlCommand":
        return ControlCommand(np.clip(self.thrusts, lower, upper), self.timestamp)


@dataclass(frozen=True)
class VehicleState:
    """Full simulation and control state."""

    position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    attitude: np.ndarray = field(default_factory=lambda: IDENTITY.copy())
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rates: np.ndarray = field(default_factory=lambda: np.zeros(3))
    thrusts: np.ndarray = field(default_factory=lambda: np.zeros(4))

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.position, self.attitude, self.velocity, self.rates, self.thrusts]).astype(float)

    @classmethod
    def from_vector(cls, x: np.ndarray) -> "VehicleState":
        x = np.asarray(x, dtype=float)
        return cls(
            position=x[POS].copy(),
            attitude=x[QUAT].copy(),
            velocity=x[VEL].copy(),
            rates=x[RATE].copy(),
            thrusts=x[THRUST].copy(),
        )

    @classmethod
    def hover(cls, params: VehicleParams, position=(0.0, 0.0, 1.0)) -> "VehicleState":
        return cls(position=np.array(position, dtype=float), thrusts=hover_thrusts(params))


@lru_cache(maxsize=32)
def _mixer(r_d: float, kappa_t: float) -> np.ndarray:
    a = SQRT2_2 * r_d
    matrix = np.array(
        [
            [1.0, 1.0, 1.0, 1.0],
            [-a, a, a, -a],
            [-a, a, -a, a],
            [-kappa_t, -kappa_t, kappa_t, kappa_t],
        ]
    )
    matrix.setflags(write=False)
    return matrix


def mixer_matrix(params: VehicleParams) -> np.ndarray:
    """Control effectiveness matrix M_t mapping rotor thrusts to [T, τx, τy, τz]."""
    return _mixer(params.r_d, params.kappa_t)


def mix_thrusts(thrusts, params: VehicleParams) -> Wrench:
    """Total thrust and body torque produced by per-rotor thrusts.

    Args:
        thrusts: Four rotor thrusts in newtons, each finite and non-negative.
        params: Vehicle parameters providing r_d and kappa_t.

    Returns:
        The resulting Wrench.
    """
    t = np.asarray(thrusts, dtype=float)
    if t.shape != (4,) or not np.all(np.isfinite(t)):
        raise InvalidInputError(f"rotor thrusts must be four finite values, got {thrusts!r}")
    if np.any(t < 0):
        raise InvalidInputError(f"rotor thrusts must be non-negative, got {thrusts!r}")
    w = mixer_matrix(params) @ t
    return Wrench(thrust=float(w[0]), torque=w[1:].copy())


def unmix(wrench, params: VehicleParams) -> np.ndarray:
    """Rotor thrusts producing a wrench (inverse of the mixer, no sign checks)."""
    vector = wrench.as_vector() if isinstance(wrench, Wrench) else np.asarray(wrench, dtype=float)
    if not np.all(np.isfinite(vector)):
        raise InvalidInputError(f"wrench must be finite, got {vector!r}")
    return np.linalg.solve(mixer_matrix(params), vector)


def hover_thrusts(params: VehicleParams) -> np.ndarray:
    return np.full(4, params.weight / 4.0)


def opposite_rotor(rotor: int, params: VehicleParams) -> int:
    """Index of the rotor whose roll and pitch mixer entries are both negated."""
    matrix = mixer_matrix(params)
    for j in range(matrix.shape[1]):
        if j != rotor and np.allclose(matrix[1:3, j], -matrix[1:3, rotor]):
            return j
    raise InvalidInputError(f"rotor {rotor} has no opposite rotor")


def rotor_rpm(thrust, params: VehicleParams) -> np.ndarray:
    """Rotor speed (rev/min) needed for the given thrust."""
    return np.sqrt(np.maximum(np.asarray(thrust, dtype=float), 0.0) / params.k_n)


def thrust_from_rpm(rpm, params: VehicleParams) -> np.ndarray:
    rpm = np.asarray(rpm, dtype=float)
    return params.k_n * rpm * rpm


def yaw_damping_torque(yaw_rate, params: VehicleParams) -> np.ndarray:
    """Aerodynamic torque A(r) = [0, 0, -k_d_psi r]; always opposes the spin."""
    yaw_rate = np.asarray(yaw_rate, dtype=float)
    zeros = np.zeros_like(yaw_rate)
    return np.stack([zeros, zeros, -params.k_d_psi * yaw_rate], axis=-1)


def dynamics_batch(x: np.ndarray, u: np.ndarray, params: VehicleParams) -> np.ndarray:
    """State derivative for arrays of states ``(..., 17)`` and commands ``(..., 4)``."""
    q = x[..., QUAT]
    v = x[..., VEL]
    w = x[..., RATE]
    t = x[..., THRUST]

    rot = quat_to_rotmat(q)
    wrench = t @ mixer_matrix(params).T
    thrust = wrench[..., 0]
    torque = wrench[..., 1:]

    body_velocity = np.einsum("...ji,...j->...i", rot, v)
    drag_force = np.einsum("...ij,...j->...i", rot, params.drag_diag * body_velocity)
    accel = (thrust[..., None] * rot[..., :, 2] - drag_force) / params.mass + params.gravity_vector

    omega = np.concatenate([np.zeros(w.shape[:-1] + (1,)), w], axis=-1)
    qdot = 0.5 * quat_mul(q, omega)

    inertia = params.inertia_diag
    gyroscopic = np.cross(w, inertia * w)
    wdot = (torque - gyroscopic + yaw_damping_torque(w[..., 2], params)) / inertia

    tdot = (u - t) / params.sigma
    return np.concatenate([v, qdot, accel, wdot, tdot], axis=-1)


def continuous_dynamics(state: VehicleState, command: ControlCommand, params: VehicleParams) -> np.ndarray:
    """Time derivative of the full state under a thrust command.

    Args:
        state: Current vehicle state; its quaternion must be unit within 1e-6.
        command: Per-rotor thrust commands driving the motor lag.
        params: Vehicle parameters.

    Returns:
        The 17-element derivative ``[η̇, q̇, v̇, ω̇, Ṫ]``.
    """
    x = state.to_vector()
    if not np.all(np.isfinite(x)):
        raise InvalidStateError("state contains non-finite values")
    norm = np.linalg.norm(x[QUAT])
    if abs(norm - 1.0) > QUAT_TOLERANCE:
        raise InvalidStateError(f"attitude quaternion norm {norm:.9f} is not unit")
    u = np.asarray(command.thrusts, dtype=float)
    if u.shape != (4,) or not np.all(np.isfinite(u)):
        raise InvalidInputError(f"command must be four finite thrusts, got {command.thrusts!r}")
    return dynamics_batch(x, u, params)


def rk4(x: np.ndarray, u: np.ndarray, dt: float, params: VehicleParams) -> np.ndarray:
    """One classical fourth-order step with zero-order-hold input, batched."""
    k1 = dynamics_batch(x, u, params)
    k2 = dynamics_batch(x + 0.5 * dt * k1, u, params)
    k3 = dynamics_batch(x + 0.5 * dt * k2, u, params)
    k4 = dynamics_batch(x + dt * k3, u, params)
    out = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    out[..., QUAT] = quat_normalize(out[..., QUAT])
    return out


def yaw_equilibrium_rate(thrusts, params: VehicleParams) -> float:
    """Steady yaw rate at which aerodynamic damping balances the residual yaw torque.

    Args:
        thrusts: Four rotor thrusts in newtons.
        params: Vehicle parameters; k_d_psi must be positive.

    Returns:
        The equilibrium yaw rate r_eq = τz / k_d_psi in rad/s.
    """
    t = np.asarray(thrusts, dtype=float)
    if t.shape != (4,) or not np.all(np.isfinite(t)):
        raise InvalidInputError(f"rotor thrusts must be four finite values, got {thrusts!r}")
    tau_z = float(mixer_matrix(params)[3] @ t)
    return tau_z / params.k_d_psi
