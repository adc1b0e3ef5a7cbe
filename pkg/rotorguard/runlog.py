"""Run logs and run metrics.

One row per control tick with a fixed column order. Floats are written with
17 significant digits, so metrics computed from a re-read log equal the
in-memory ones exactly. Compute times live in a separate timing table; they
are informational and never feed back into the run.
"""

import csv
import logging
import math
import os
from dataclasses import asdict, dataclass

import numpy as np

from rotorguard.dynamics import VehicleParams, yaw_equilibrium_rate
from rotorguard.errors import LogFormatError
from rotorguard.quaternion import tilt_angle

logger = logging.getLogger(__name__)


def _group(prefix: str, suffixes) -> tuple:
    return tuple(f"{prefix}_{s}" for s in suffixes)


COLUMNS = (
    ("time",)
    + _group("pos", "xyz")
    + _group("q", "wxyz")
    + _group("vel", "xyz")
    + _group("rate", "xyz")
    + _group("thrust", range(4))
    + _group("ref", "xyz")
    + _group("cmd", range(4))
    + _group("eff", range(4))
    + _group("accel", "xyz")
    + _group("gyro", "xyz")
    + _group("rpm", range(4))
    + _group("motor_idx", range(4))
    + _group("prop_idx", range(4))
    + ("stage", "fault_rotor", "fault_mechanism", "clearance", "nmpc_iterations", "nmpc_kkt", "nmpc_degraded", "replans")
)
TIMING_COLUMNS = ("time", "nmpc_ms", "plan_ms")

# fault_mechanism codes
MECHANISM_CODES = {"motor_index": 1, "takeoff_monitor": 2, "propeller_index": 3}

TILT_LIMIT = math.radians(5.0)
TERMINAL_WINDOW = 5.0
TERMINAL_ERROR_LIMIT = 1.5
STEADY_WINDOW = 2.0


class RunLog:
    """Columnar log with a ``# key=value`` preamble (the seed always included)."""

    def __init__(self, columns=COLUMNS, seed: int = 0, meta: dict | None = None):
        self.columns = tuple(columns)
        self.seed = int(seed)
        self.meta = dict(meta or {})
        self._index = {name: i for i, name in enumerate(self.columns)}
        self._rows: list[list[float]] = []
        self._data: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self._rows)

    def append(self, values: dict) -> None:
        """Add one row; every column must be present."""
        missing = [c for c in self.columns if c not in values]
        if missing:
            raise LogFormatError(f"row missing columns: {', '.join(missing[:5])}")
        self._rows.append([float(values[c]) for c in self.columns])
        self._data = None

    @property
    def data(self) -> np.ndarray:
        """Read-only array of all rows, rebuilt only after an append."""
        if self._data is None:
            data = np.array(self._rows, dtype=float).reshape(len(self._rows), len(self.columns))
            data.flags.writeable = False
            self._data = data
        return self._data

    def column(self, name: str) -> np.ndarray:
        if name not in self._index:
            raise LogFormatError(f"log has no column {name!r}")
        return self.data[:, self._index[name]]

    def columns_of(self, names) -> np.ndarray:
        data = self.data
        try:
            return data[:, [self._index[n] for n in names]]
        except KeyError as e:
            raise LogFormatError(f"log has no column {e.args[0]!r}") from None

    def write_csv(self, path: str) -> str:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as f:
            f.write(f"# seed={self.seed}\n")
            for key, value in self.meta.items():
                f.write(f"# {key}={value}\n")
            writer = csv.writer(f)
            writer.writerow(self.columns)
            for row in self._rows:
                writer.writerow([format(v, ".17g") for v in row])
        return path

    @classmethod
    def read_csv(cls, path: str, required=COLUMNS) -> "RunLog":
        """Read a log written by :meth:`write_csv`.

        Raises:
            LogFormatError: if the file is unreadable, a required column is
                missing or a row has the wrong width.
        """
        if not os.path.isfile(path):
            raise LogFormatError(f"no such log: {path}")
        meta = {}
        with open(path, "r", newline="", encoding="utf-8") as f:
            lines = f.read().splitlines()
        body_start = 0
        for body_start, line in enumerate(lines):
            if not line.startswith("#"):
                break
            key, _, value = line[1:].strip().partition("=")
            meta[key.strip()] = value.strip()
        reader = csv.reader(lines[body_start:])
        try:
            header = next(reader)
        except StopIteration:
            raise LogFormatError(f"{path}: empty log") from None
        missing = [c for c in required if c not in header]
        if missing:
            raise LogFormatError(f"{path}: missing columns {', '.join(missing[:5])}")
        try:
            seed = int(meta.pop("seed", "0"))
        except ValueError:
            raise LogFormatError(f"{path}: bad seed line") from None
        log = cls(columns=header, seed=seed, meta=meta)
        for lineno, row in enumerate(reader, start=body_start + 2):
            if len(row) != len(header):
                raise LogFormatError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                log._rows.append([float(v) for v in row])
            except ValueError:
                raise LogFormatError(f"{path}:{lineno}: non-numeric field") from None
        return log


@dataclass
class RunMetrics:
    success: bool
    status: str
    fdd_latency: float
    detected_rotor: int
    detection_time: float
    injection_time: float
    missed_detection: bool
    false_alarm: bool
    mini_a: float
    rmse: float
    rmse_literal: float
    terminal_error: float
    max_yaw_rate: float
    steady_yaw_rate: float
    yaw_equilibrium_rate: float
    tilt_recovery: float
    collision: bool
    min_clearance: float
    nmpc_mean_ms: float = float("nan")
    nmpc_max_ms: float = float("nan")
    plan_mean_ms: float = float("nan")
    error: str | None = None

    def to_dict(self) -> dict:
        out = asdict(self)
        for key, value in out.items():
            if isinstance(value, float) and not math.isfinite(value):
                out[key] = None
        return out


def tracking_rmse(times, errors) -> tuple[float, float]:
    """Standard and literal tracking error of position errors ``(K, 3)``.

    The standard value is ``sqrt(mean ||e||^2)``. The literal value is
    ``sqrt(integral ||e||^2 dt) / (t2 - t1)`` with each sample held over the
    following interval.
    """
    times = np.asarray(times, dtype=float)
    sq = np.sum(np.asarray(errors, dtype=float) ** 2, axis=1)
    if len(sq) == 0:
        return float("nan"), float("nan")
    standard = float(np.sqrt(np.mean(sq)))
    span = times[-1] - times[0] if len(times) > 1 else 0.0
    if span <= 0:
        return standard, float("nan")
    integral = float(np.sum(sq[:-1] * np.diff(times)))
    return standard, float(np.sqrt(integral) / span)


def _fault_events(log: RunLog, schedule) -> dict:
    times = log.column("time")
    rotors = log.column("fault_rotor")
    flagged = np.flatnonzero(rotors >= 0)
    detection = float(times[flagged[0]]) if len(flagged) else float("nan")
    detected_rotor = int(rotors[flagged[0]]) if len(flagged) else -1

    injection = schedule.first_time if schedule is not None else None
    injected_rotor = schedule.events[0].rotor if injection is not None else None
    end = float(times[-1]) if len(times) else 0.0
    active = injection is not None and injection <= end

    correct = active and detected_rotor == injected_rotor and detection >= injection
    false_alarm = bool(len(flagged)) and not correct
    return {
        "detection_time": detection,
        "detected_rotor": detected_rotor,
        "injection_time": float(injection) if injection is not None else float("nan"),
        "fdd_latency": detection - injection if correct else float("nan"),
        "missed_detection": bool(active and not correct),
        "false_alarm": bool(false_alarm),
    }


def compute_metrics(
    log: RunLog,
    scenario,
    timing: RunLog | None = None,
    error: str | None = None,
) -> RunMetrics:
    """Metrics of one run, from the log columns and the scenario alone.

    Args:
        log: Control-tick log.
        scenario: The Scenario that produced it (failure schedule, vehicle,
            takeoff completion time).
        timing: Optional timing table for compute-time statistics.
        error: Diagnostic of a failed run; forces ``success = False``.

    Raises:
        LogFormatError: if a column the metrics need is missing.
    """
    missing = [c for c in COLUMNS if c not in log.columns]
    if missing:
        raise LogFormatError(f"log lacks columns {', '.join(missing[:5])}")
    params: VehicleParams = scenario.params
    times = log.column("time")
    if len(times) == 0:
        raise LogFormatError("log has no rows")
    positions = log.columns_of(("pos_x", "pos_y", "pos_z"))
    refs = log.columns_of(("ref_x", "ref_y", "ref_z"))
    errors = positions - refs
    standard, literal = tracking_rmse(times, errors)
    error_norm = np.linalg.norm(errors, axis=1)

    terminal = times >= times[-1] - TERMINAL_WINDOW
    terminal_error = float(np.max(error_norm[terminal]))
    flying = times >= scenario.takeoff_complete
    altitude_ok = bool(np.all(positions[flying, 2] >= 0.0)) if np.any(flying) else True

    clearance = log.column("clearance")
    has_world = np.any(np.isfinite(clearance))
    min_clearance = float(np.nanmin(clearance)) if has_world else float("nan")
    collision = bool(has_world and min_clearance <= 0.0)

    faults = _fault_events(log, scenario.failures)
    injection = faults["injection_time"]
    after = times >= injection if math.isfinite(injection) else np.ones(len(times), dtype=bool)
    mini_a = float(np.min(positions[after, 2])) if np.any(after) else float(np.min(positions[:, 2]))

    yaw_rates = log.column("rate_z")
    steady = times >= times[-1] - STEADY_WINDOW
    thrusts = log.columns_of(tuple(f"thrust_{i}" for i in range(4)))
    steady_yaw = float(np.mean(yaw_rates[steady]))
    equilibrium = yaw_equilibrium_rate(np.mean(thrusts[steady], axis=0), params)

    tilt_recovery = float("nan")
    if math.isfinite(injection) and np.any(after):
        tilt = tilt_angle(log.columns_of(("q_w", "q_x", "q_y", "q_z")))
        bad = np.flatnonzero(after & (tilt > TILT_LIMIT))
        if len(bad) == 0:
            tilt_recovery = 0.0
        elif bad[-1] < len(times) - 1:
            tilt_recovery = float(times[bad[-1] + 1] - injection)
        else:
            tilt_recovery = float("inf")

    success = error is None and not collision and altitude_ok and terminal_error < TERMINAL_ERROR_LIMIT
    metrics = RunMetrics(
        success=bool(success),
        status="failed" if error else "completed",
        fdd_latency=faults["fdd_latency"],
        detected_rotor=faults["detected_rotor"],
        detection_time=faults["detection_time"],
        injection_time=injection,
        missed_detection=faults["missed_detection"],
        false_alarm=faults["false_alarm"],
        mini_a=mini_a,
        rmse=standard,
        rmse_literal=literal,
        terminal_error=terminal_error,
        max_yaw_rate=float(np.max(np.abs(yaw_rates))),
        steady_yaw_rate=steady_yaw,
        yaw_equilibrium_rate=float(equilibrium),
        tilt_recovery=tilt_recovery,
        collision=collision,
        min_clearance=min_clearance,
        error=error,
    )
    if timing is not None and len(timing):
        nmpc = timing.column("nmpc_ms")
        plan = timing.column("plan_ms")
        metrics.nmpc_mean_ms = float(np.mean(nmpc))
        metrics.nmpc_max_ms = float(np.max(nmpc))
        planned = plan[plan > 0]
        metrics.plan_mean_ms = float(np.mean(planned)) if len(planned) else float("nan")
    return metrics
