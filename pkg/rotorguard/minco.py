"""Minimum-jerk piecewise quintic splines.

Given interior waypoints ``q``, segment durations ``T`` and the boundary
position/velocity/acceleration, the unique jerk-energy minimizer is found by
one banded linear solve whose size grows linearly with the segment count.
The same system gives exact gradients of any cost defined on the
coefficients with respect to ``q`` and ``T`` through a single adjoint solve.
"""

import csv
import logging
import os
from dataclasses import dataclass
from math import factorial

import numpy as np
from scipy.linalg import solve_banded

from rotorguard.errors import InvalidInputError

logger = logging.getLogger(__name__)

DEGREE = 5
NCOEF = DEGREE + 1
BANDWIDTH = 8
_JERK_FACTORS = np.array([k * (k - 1) * (k - 2) for k in range(NCOEF)], dtype=float)


def basis(t: float, order: int) -> np.ndarray:
    """Row vector of the ``order``-th derivative of ``[1, t, ..., t^5]``."""
    row = np.zeros(NCOEF)
    for k in range(order, NCOEF):
        row[k] = factorial(k) / factorial(k - order) * t ** (k - order)
    return row


def basis_batch(t: np.ndarray, order: int) -> np.ndarray:
    """``(..., 6)`` basis rows for an array of local times."""
    t = np.asarray(t, dtype=float)
    out = np.zeros(t.shape + (NCOEF,))
    for k in range(order, NCOEF):
        out[..., k] = factorial(k) / factorial(k - order) * t ** (k - order)
    return out


@dataclass(frozen=True)
class PiecewiseTrajectory:
    """Quintic segments with per-segment durations.

    ``coeffs`` has shape ``(M, 6, 3)``; segment ``i`` evaluates
    ``coeffs[i].T @ [1, t, ..., t^5]`` for local time ``t`` in ``[0, T_i]``.
    """

    durations: np.ndarray
    coeffs: np.ndarray
    head: np.ndarray
    tail: np.ndarray

    @property
    def segment_count(self) -> int:
        return len(self.durations)

    @property
    def duration(self) -> float:
        return float(np.sum(self.durations))

    @property
    def junction_times(self) -> np.ndarray:
        return np.concatenate([[0.0], np.cumsum(self.durations)])

    @property
    def waypoints(self) -> np.ndarray:
        """Interior junction positions."""
        return np.array([self.coeffs[i].T @ basis(self.durations[i], 0) for i in range(self.segment_count - 1)])

    def locate(self, t: float) -> tuple[int, float]:
        edges = self.junction_times
        index = int(np.clip(np.searchsorted(edges, t, side="right") - 1, 0, self.segment_count - 1))
        return index, t - edges[index]

    def evaluate(self, t: float, order: int = 0) -> np.ndarray:
        value, clamped = eval_traj(self, t, order)
        if clamped:
            logger.debug("trajectory evaluated outside [0, %.3f] at t=%.3f", self.duration, t)
        return value


def eval_traj(traj: PiecewiseTrajectory, t: float, order: int = 0) -> tuple[np.ndarray, bool]:
    """Derivative ``order`` (0-4) of the trajectory at global time ``t``.

    Returns:
        ``(value, clamped)``; times outside ``[0, duration]`` are clamped to
        the nearest end and flagged.
    """
    if order not in range(5):
        raise InvalidInputError(f"derivative order must be 0-4, got {order!r}")
    clamped = not 0.0 <= t <= traj.duration
    t = float(np.clip(t, 0.0, traj.duration))
    index, local = traj.locate(t)
    return traj.coeffs[index].T @ basis(local, order), clamped


def _system_entries(durations: np.ndarray):
    """Nonzero entries of the constraint matrix and the rows that evaluate segment ends.

    Returns:
        ``(rows, cols, vals, end_rows)`` where ``end_rows[g]`` lists
        ``(row, order)`` pairs evaluating segment ``g`` at ``T_g``.
    """
    m = len(durations)
    rows, cols, vals = [], [], []
    end_rows = [[] for _ in range(m)]

    def put(row: int, segment: int, values: np.ndarray) -> None:
        for k in np.flatnonzero(values):
            rows.append(row)
            cols.append(NCOEF * segment + k)
            vals.append(values[k])

    for d in range(3):
        put(d, 0, basis(0.0, d))
    for j in range(m - 1):
        base = 3 + NCOEF * j
        put(base, j, basis(durations[j], 0))
        end_rows[j].append((base, 0))
        for d in range(5):
            put(base + 1 + d, j, basis(durations[j], d))
            put(base + 1 + d, j + 1, -basis(0.0, d))
            end_rows[j].append((base + 1 + d, d))
    for d in range(3):
        row = NCOEF * m - 3 + d
        put(row, m - 1, basis(durations[-1], d))
        end_rows[m - 1].append((row, d))
    return np.array(rows), np.array(cols), np.array(vals), end_rows


def _banded(rows, cols, vals, size: int, transpose: bool = False) -> np.ndarray:
    if transpose:
        rows, cols = cols, rows
    ab = np.zeros((2 * BANDWIDTH + 1, size))
    ab[BANDWIDTH + rows - cols, cols] = vals
    return ab


def _check_inputs(waypoints, durations, head, tail):
    durations = np.asarray(durations, dtype=float).ravel()
    if durations.size < 1:
        raise InvalidInputError("need at least one segment")
    if not np.all(np.isfinite(durations)) or np.any(durations <= 0):
        raise InvalidInputError(f"segment durations must be positive, got {durations!r}")
    waypoints = np.asarray(waypoints, dtype=float).reshape(-1, 3)
    if len(waypoints) != durations.size - 1:
        raise InvalidInputError(f"{durations.size} segments need {durations.size - 1} waypoints, got {len(waypoints)}")
    head = np.asarray(head, dtype=float).reshape(3, 3)
    tail = np.asarray(tail, dtype=float).reshape(3, 3)
    return waypoints, durations, head, tail


def _rhs(waypoints: np.ndarray, head: np.ndarray, tail: np.ndarray, m: int) -> np.ndarray:
    b = np.zeros((NCOEF * m, 3))
    b[:3] = head
    for j in range(m - 1):
        b[3 + NCOEF * j] = waypoints[j]
    b[NCOEF * m - 3 :] = tail
    return b


def minco_map(waypoints, durations, head, tail) -> PiecewiseTrajectory:
    """Coefficients of the minimum-jerk spline.

    Args:
        waypoints: ``(M-1, 3)`` interior junction positions.
        durations: ``M`` positive segment durations.
        head: Start position, velocity and acceleration as rows of a 3x3 array.
        tail: End position, velocity and acceleration.

    Returns:
        The PiecewiseTrajectory.
    """
    waypoints, durations, head, tail = _check_inputs(waypoints, durations, head, tail)
    m = durations.size
    rows, cols, vals, _ = _system_entries(durations)
    ab = _banded(rows, cols, vals, NCOEF * m)
    coeffs = solve_banded((BANDWIDTH, BANDWIDTH), ab, _rhs(waypoints, head, tail, m))
    return PiecewiseTrajectory(durations, coeffs.reshape(m, NCOEF, 3), head, tail)


def minco_adjoint(traj: PiecewiseTrajectory, grad_coeffs: np.ndarray, grad_durations: np.ndarray):
    """Propagate partial derivatives on ``(c, T)`` to total derivatives on ``(q, T)``.

    Args:
        traj: Trajectory produced by :func:`minco_map`.
        grad_coeffs: ``(M, 6, 3)`` partial derivative of the cost in the coefficients.
        grad_durations: ``M`` partial derivatives in the durations at fixed coefficients.

    Returns:
        ``(dJ/dq (M-1, 3), dJ/dT (M,))``.
    """
    m = traj.segment_count
    rows, cols, vals, end_rows = _system_entries(traj.durations)
    ab_t = _banded(rows, cols, vals, NCOEF * m, transpose=True)
    lam = solve_banded((BANDWIDTH, BANDWIDTH), ab_t, np.asarray(grad_coeffs, dtype=float).reshape(NCOEF * m, 3))

    grad_q = np.array([lam[3 + NCOEF * j] for j in range(m - 1)]).reshape(m - 1, 3)
    grad_t = np.asarray(grad_durations, dtype=float).copy()
    for g in range(m):
        segment = traj.coeffs[g]
        end = traj.durations[g]
        for row, order in end_rows[g]:
            grad_t[g] -= lam[row] @ (segment.T @ basis(end, order + 1))
    return grad_q, grad_t


def jerk_energy_terms(traj: PiecewiseTrajectory) -> tuple[float, np.ndarray, np.ndarray]:
    """Jerk energy with its partials in the coefficients and durations."""
    energy = 0.0
    grad_c = np.zeros_like(traj.coeffs)
    grad_t = np.zeros(traj.segment_count)
    k = np.arange(3, NCOEF)
    a = _JERK_FACTORS[3:]
    powers = k[:, None] + k[None, :] - 5
    for i, (segment, end) in enumerate(zip(traj.coeffs, traj.durations)):
        c = segment[3:]
        gram = c @ c.T
        weights = a[:, None] * a[None, :] * end ** powers / powers
        energy += float(np.sum(weights * gram))
        grad_c[i, 3:] = 2.0 * weights @ c
        jerk_end = a @ (c * end ** (k - 3)[:, None])
        grad_t[i] = float(jerk_end @ jerk_end)
    return energy, grad_c, grad_t


def jerk_energy(traj: PiecewiseTrajectory) -> float:
    """Integral of the squared jerk over the whole trajectory."""
    return jerk_energy_terms(traj)[0]


def rest_boundary(point) -> np.ndarray:
    """Boundary block for a point at rest."""
    return np.vstack([np.asarray(point, dtype=float), np.zeros(3), np.zeros(3)])


def minimum_jerk_through(points, durations, head=None, tail=None) -> PiecewiseTrajectory:
    """Spline through ``points`` (endpoints included), at rest at both ends by default."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    head = rest_boundary(points[0]) if head is None else np.asarray(head, dtype=float)
    tail = rest_boundary(points[-1]) if tail is None else np.asarray(tail, dtype=float)
    return minco_map(points[1:-1], durations, head, tail)


def sample_traj(traj: PiecewiseTrajectory, rate_hz: float = 100.0) -> np.ndarray:
    """Rows of ``[t, px, py, pz, vx, vy, vz, ax, ay, az]`` at ``rate_hz``."""
    count = int(np.floor(traj.duration * rate_hz + 1e-9)) + 1
    times = np.arange(count) / rate_hz
    rows = []
    for t in times:
        index, local = traj.locate(t)
        segment = traj.coeffs[index]
        rows.append(
            np.concatenate([[t], segment.T @ basis(local, 0), segment.T @ basis(local, 1), segment.T @ basis(local, 2)])
        )
    return np.array(rows)


def export_trajectory(traj: PiecewiseTrajectory, directory: str, rate_hz: float = 100.0) -> tuple[str, str]:
    """Write ``segments.csv`` (durations and coefficients) and ``samples.csv``."""
    os.makedirs(directory, exist_ok=True)
    segments_path = os.path.join(directory, "segments.csv")
    samples_path = os.path.join(directory, "samples.csv")
    with open(segments_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["segment", "duration", "axis"] + [f"c{k}" for k in range(NCOEF)])
        for i, (end, segment) in enumerate(zip(traj.durations, traj.coeffs)):
            for axis, name in enumerate("xyz"):
                writer.writerow([i, repr(float(end)), name] + [repr(float(v)) for v in segment[:, axis]])
    with open(samples_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["t", "px", "py", "pz", "vx", "vy", "vz", "ax", "ay", "az"])
        for row in sample_traj(traj, rate_hz):
            writer.writerow([f"{v:.9g}" for v in row])
    logger.info("Exported %d-segment trajectory to %s", traj.segment_count, directory)
    return segments_path, samples_path


def load_segments(path: str) -> PiecewiseTrajectory:
    """Rebuild a trajectory from an exported ``segments.csv``."""
    with open(path, "r", newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    count = max(int(r["segment"]) for r in rows) + 1
    durations = np.zeros(count)
    coeffs = np.zeros((count, NCOEF, 3))
    for r in rows:
        i = int(r["segment"])
        axis = "xyz".index(r["axis"])
        durations[i] = float(r["duration"])
        coeffs[i, :, axis] = [float(r[f"c{k}"]) for k in range(NCOEF)]
    head = np.vstack([coeffs[0].T @ basis(0.0, d) for d in range(3)])
    tail = np.vstack([coeffs[-1].T @ basis(durations[-1], d) for d in range(3)])
    return PiecewiseTrajectory(durations, coeffs, head, tail)
