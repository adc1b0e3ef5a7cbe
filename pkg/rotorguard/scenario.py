"""Scenario files.

A scenario is an INI file with the sections ``scenario``, ``vehicle``,
``mission``, ``world``, ``failure``, ``fdd``, ``controller``, ``planner``
and ``noise``; every section is optional and every key maps onto a field of
the matching configuration dataclass::

    [scenario]
    name = test2
    duration = 12
    seed = 3

    [mission]
    kind = lemniscate
    speed = 1.0

    [failure]
    events = 6.0:0:motor_stop

Vectors are written as whitespace- or comma-separated numbers, waypoint
lists as points separated by ``;``. Unknown sections and keys are
configuration errors.
"""

import configparser
import logging
import os
from dataclasses import dataclass, field, fields, replace

import numpy as np

from rotorguard.dynamics import VehicleParams
from rotorguard.errors import ConfigError
from rotorguard.fdd import FddConfig, Stage
from rotorguard.nmpc import OcpConfig
from rotorguard.params import load_params
from rotorguard.planner import PlannerLimits
from rotorguard.sim import FailureEvent, FailureSchedule, NoiseProfile
from rotorguard.world import WorldSpec

logger = logging.getLogger(__name__)

MISSION_KINDS = ("hover", "takeoff", "lemniscate", "waypoints", "navigate")
# quintic rest-to-rest peak speed is 15/8 of the mean speed
QUINTIC_PEAK = 1.875
TAKEOFF_SETTLE = 0.5


@dataclass(frozen=True)
class MissionConfig:
    """What the vehicle is asked to fly.

    ``size`` is the full extent of the figure-eight box; ``start`` defaults
    to the world start or ``(0, 0, height)``.
    """

    kind: str = "hover"
    start: tuple | None = None
    height: float = 1.0
    speed: float = 1.0
    size: tuple = (6.0, 3.0, 1.0)
    laps: float = 1.0
    ramp: float = 2.0
    knot_period: float = 0.25
    waypoints: tuple = ()
    goal: tuple | None = None
    climb_height: float = 1.0
    climb_speed: float = 1.0
    reveal_radius: float = 8.0
    reveal_period: float = 0.5

    def __post_init__(self):
        if self.kind not in MISSION_KINDS:
            raise ConfigError("mission.kind", f"unknown mission {self.kind!r}; expected one of {MISSION_KINDS}")
        for name in ("height", "speed", "laps", "knot_period", "climb_height", "climb_speed",
                     "reveal_radius", "reveal_period"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0):
                raise ConfigError(f"mission.{name}", f"must be positive, got {value!r}")
        if self.ramp < 0:
            raise ConfigError("mission.ramp", "must be non-negative")
        if len(self.size) != 3 or any(s <= 0 for s in self.size):
            raise ConfigError("mission.size", "expected three positive extents")
        object.__setattr__(self, "waypoints", tuple(tuple(float(v) for v in p) for p in self.waypoints))
        if any(len(p) != 3 for p in self.waypoints):
            raise ConfigError("mission.waypoints", "each waypoint needs x, y and z")
        if self.kind == "waypoints" and not self.waypoints:
            raise ConfigError("mission.waypoints", "a waypoint mission needs at least one waypoint")

    @property
    def climb_time(self) -> float:
        return QUINTIC_PEAK * self.climb_height / self.climb_speed


@dataclass(frozen=True)
class Scenario:
    name: str = "scenario"
    duration: float = 10.0
    seed: int = 0
    params: VehicleParams = field(default_factory=VehicleParams)
    mission: MissionConfig = field(default_factory=MissionConfig)
    world: WorldSpec | None = None
    world_file: str | None = None
    world_seed_fixed: bool = False
    failures: FailureSchedule = field(default_factory=FailureSchedule)
    fdd: FddConfig = field(default_factory=FddConfig)
    controller: OcpConfig = field(default_factory=OcpConfig)
    planner: PlannerLimits = field(default_factory=PlannerLimits)
    noise: NoiseProfile = field(default_factory=NoiseProfile)
    physics_rate: float = 400.0
    control_rate: float = 200.0
    output_dir: str | None = None

    def __post_init__(self):
        if not (np.isfinite(self.duration) and self.duration > 0):
            raise ConfigError("scenario.duration", f"must be positive, got {self.duration!r}")
        if not self.control_rate > 0 or not self.physics_rate >= self.control_rate:
            raise ConfigError("scenario.physics_rate", "physics rate must be at least the control rate")
        if self.mission.kind == "navigate" and self.world is None and self.world_file is None:
            raise ConfigError("world.kind", "a navigate mission needs a world")
        if self.mission.kind == "takeoff" and self.duration <= self.takeoff_complete:
            raise ConfigError("scenario.duration", "run ends before the takeoff completes")
        for event in self.failures.events:
            if event.time >= self.duration:
                logger.warning("Failure at t=%.2f lies beyond the %.2f s run", event.time, self.duration)

    @property
    def takeoff_complete(self) -> float:
        """Time after which the ground no longer counts as a valid altitude."""
        if self.mission.kind == "takeoff":
            return self.mission.climb_time + TAKEOFF_SETTLE
        return 0.0

    @property
    def control_dt(self) -> float:
        return 1.0 / self.control_rate

    def stage_at(self, t: float) -> Stage:
        if self.mission.kind == "takeoff" and t < self.takeoff_complete:
            return Stage.TAKEOFF
        return Stage.TRACKING

    def with_seed(self, seed: int) -> "Scenario":
        """Same scenario with a new run seed; the world follows unless its seed was set explicitly."""
        world = self.world
        if world is not None and not self.world_seed_fixed:
            world = replace(world, seed=seed)
        return replace(self, seed=seed, world=world)

    def planner_limits(self) -> PlannerLimits:
        return self.planner.with_failure_budget(self.params)


def _vector(path: str, raw: str, size: int | None = None) -> tuple:
    try:
        values = tuple(float(v) for v in raw.replace(",", " ").split())
    except ValueError:
        raise ConfigError(path, f"not a list of numbers: {raw!r}") from None
    if size is not None and len(values) != size:
        raise ConfigError(path, f"expected {size} values, got {len(values)}")
    return values


def _points(path: str, raw: str) -> tuple:
    return tuple(_vector(path, chunk, 3) for chunk in raw.replace("\n", ";").split(";") if chunk.strip())


def _events(path: str, raw: str) -> tuple:
    chunks = [c for c in raw.replace("\n", ",").replace(";", ",").split(",") if c.strip()]
    return tuple(FailureEvent.from_text(c) for c in chunks)


def _optional_vector(size):
    def convert(path, raw):
        return None if raw.strip().lower() in ("", "none") else _vector(path, raw, size)

    return convert


def _scalar(kind):
    def convert(path, raw):
        try:
            return kind(raw.strip())
        except ValueError:
            raise ConfigError(path, f"expected {kind.__name__}, got {raw!r}") from None

    return convert


def _fixed_vector(size):
    return lambda path, raw: _vector(path, raw, size)


_FLOAT = _scalar(float)
_INT = _scalar(int)
_STR = _scalar(str)

_SCENARIO_KEYS = {
    "name": _STR,
    "duration": _FLOAT,
    "seed": _INT,
    "physics_rate": _FLOAT,
    "control_rate": _FLOAT,
    "output_dir": _STR,
}
_VEHICLE_KEYS = {
    "params_file": _STR,
    "mass": _FLOAT,
    "inertia": _fixed_vector(3),
    "r_d": _FLOAT,
    "k_n": _FLOAT,
    "kappa_t": _FLOAT,
    "drag": _fixed_vector(3),
    "k_d_psi": _FLOAT,
    "sigma": _FLOAT,
    "thrust_max": _FLOAT,
    "gravity": _FLOAT,
    "rotor_count": _INT,
}
_MISSION_KEYS = {
    "kind": _STR,
    "start": _optional_vector(3),
    "height": _FLOAT,
    "speed": _FLOAT,
    "size": _fixed_vector(3),
    "laps": _FLOAT,
    "ramp": _FLOAT,
    "knot_period": _FLOAT,
    "waypoints": _points,
    "goal": _optional_vector(3),
    "climb_height": _FLOAT,
    "climb_speed": _FLOAT,
    "reveal_radius": _FLOAT,
    "reveal_period": _FLOAT,
}
_WORLD_KEYS = {
    "file": _STR,
    "kind": _STR,
    "size": _fixed_vector(3),
    "resolution": _FLOAT,
    "density": _FLOAT,
    "seed": _INT,
    "start": _optional_vector(3),
    "goal": _optional_vector(3),
    "min_gap": _FLOAT,
    "safe_distance": _FLOAT,
    "max_retries": _INT,
}
_FDD_KEYS = {
    "gamma_m": _FLOAT,
    "gamma_p": _FLOAT,
    "gamma_q": _fixed_vector(4),
    "debounce_count": _INT,
    "stage": _STR,
    "rpm_floor_fraction": _FLOAT,
    "degradation_floor": _FLOAT,
    "accel_cutoff": _FLOAT,
    "ang_accel_cutoff": _FLOAT,
}
_CONTROLLER_KEYS = {
    "horizon": _INT,
    "dt": _FLOAT,
    "q_p": _fixed_vector(3),
    "q_v": _fixed_vector(3),
    "q_q": _fixed_vector(4),
    "q_w": _fixed_vector(3),
    "q_t": _fixed_vector(4),
    "q_n": _optional_vector(17),
    "r": _fixed_vector(4),
    "u_lo": _optional_vector(4),
    "u_hi": _optional_vector(4),
    "w_lo": _fixed_vector(3),
    "w_hi": _fixed_vector(3),
    "rate_penalty": _FLOAT,
    "iterations": _INT,
    "substeps": _INT,
}
_PLANNER_KEYS = {
    "v_max": _FLOAT,
    "a_max_n": _FLOAT,
    "a_max_f": lambda path, raw: None if raw.strip().lower() in ("", "none") else _FLOAT(path, raw),
    "j_max": _FLOAT,
    "safe_distance": _FLOAT,
    "gamma_a_f": _FLOAT,
    "weights": _fixed_vector(4),
    "samples_per_segment": _INT,
    "max_iterations": _INT,
    "gtol": _FLOAT,
    "segment_length": _FLOAT,
    "min_segments": _INT,
    "speed_fraction": _FLOAT,
}
_NOISE_KEYS = {name: _FLOAT for name in ("accel", "gyro", "rpm", "position", "velocity", "attitude")}

SECTIONS = {
    "scenario": _SCENARIO_KEYS,
    "vehicle": _VEHICLE_KEYS,
    "mission": _MISSION_KEYS,
    "world": _WORLD_KEYS,
    "failure": {"events": _events},
    "fdd": _FDD_KEYS,
    "controller": _CONTROLLER_KEYS,
    "planner": _PLANNER_KEYS,
    "noise": _NOISE_KEYS,
}


def _read_sections(parser: configparser.ConfigParser) -> dict:
    values = {}
    for section in parser.sections():
        schema = SECTIONS.get(section)
        if schema is None:
            raise ConfigError(section, "unknown section")
        values[section] = {}
        for key, raw in parser.items(section):
            convert = schema.get(key)
            if convert is None:
                raise ConfigError(f"{section}.{key}", "unknown key")
            values[section][key] = convert(f"{section}.{key}", raw)
    return values


def _build(cls, section: str, values: dict):
    try:
        return cls(**values)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(section, str(e)) from None


def parse_scenario(content: str, base_dir: str | None = None) -> Scenario:
    """Parse scenario text.

    Args:
        content: INI text.
        base_dir: Directory relative file references are resolved against.

    Returns:
        The validated Scenario.
    """
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    try:
        parser.read_string(content)
    except configparser.Error as e:
        raise ConfigError("scenario", f"malformed scenario file: {e}") from None
    values = _read_sections(parser)
    base_dir = base_dir or os.getcwd()

    def resolve(path: str) -> str:
        return path if os.path.isabs(path) else os.path.join(base_dir, path)

    vehicle = dict(values.get("vehicle", {}))
    params_file = vehicle.pop("params_file", None)
    params = load_params(resolve(params_file) if params_file else None)
    if vehicle:
        params = _apply(params, vehicle)

    world_values = dict(values.get("world", {}))
    world_file = world_values.pop("file", None)
    world = _build(WorldSpec, "world", world_values) if world_values else None

    top = values.get("scenario", {})
    seed = top.get("seed", 0)
    world_seed_fixed = "seed" in world_values
    if world is not None and not world_seed_fixed:
        world = replace(world, seed=seed)

    fdd_values = dict(values.get("fdd", {}))
    if "stage" in fdd_values:
        try:
            fdd_values["stage"] = Stage(fdd_values["stage"])
        except ValueError:
            raise ConfigError("fdd.stage", f"unknown stage {fdd_values['stage']!r}") from None

    return Scenario(
        name=top.get("name", "scenario"),
        duration=top.get("duration", 10.0),
        seed=seed,
        params=params,
        mission=_build(MissionConfig, "mission", values.get("mission", {})),
        world=world,
        world_file=resolve(world_file) if world_file else None,
        world_seed_fixed=world_seed_fixed,
        failures=FailureSchedule(values.get("failure", {}).get("events", ())),
        fdd=_build(FddConfig, "fdd", fdd_values),
        controller=_build(OcpConfig, "controller", values.get("controller", {})),
        planner=_build(PlannerLimits, "planner", values.get("planner", {})),
        noise=_build(NoiseProfile, "noise", values.get("noise", {})),
        physics_rate=top.get("physics_rate", 400.0),
        control_rate=top.get("control_rate", 200.0),
        output_dir=top.get("output_dir"),
    )


def _apply(params: VehicleParams, overrides: dict) -> VehicleParams:
    try:
        return replace(params, **overrides)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError("vehicle", str(e)) from None


def load_scenario(path: str) -> Scenario:
    if not os.path.isfile(path):
        raise ConfigError("scenario.file", f"no such file: {path}")
    with open(path, "r", encoding="utf-8") as f:
        content = f.read()
    scenario = parse_scenario(content, base_dir=os.path.dirname(os.path.abspath(path)))
    if scenario.name == "scenario":
        scenario = replace(scenario, name=os.path.splitext(os.path.basename(path))[0])
    logger.info("Loaded scenario %s from %s", scenario.name, path)
    return scenario


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, (tuple, list, np.ndarray)):
        if len(value) and isinstance(value[0], (tuple, list, np.ndarray)):
            return "; ".join(_format(v) for v in value)
        return " ".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    if hasattr(value, "value"):
        return str(value.value)
    return str(value)


def write_scenario(scenario: Scenario) -> str:
    """Serialize a scenario; parsing the result gives back an equal scenario."""
    parser = configparser.ConfigParser(interpolation=None)
    parser["scenario"] = {
        "name": scenario.name,
        "duration": _format(float(scenario.duration)),
        "seed": str(scenario.seed),
        "physics_rate": _format(float(scenario.physics_rate)),
        "control_rate": _format(float(scenario.control_rate)),
    }
    if scenario.output_dir:
        parser["scenario"]["output_dir"] = scenario.output_dir
    for section, obj in (
        ("vehicle", scenario.params),
        ("mission", scenario.mission),
        ("fdd", scenario.fdd),
        ("controller", scenario.controller),
        ("planner", scenario.planner),
        ("noise", scenario.noise),
    ):
        schema = SECTIONS[section]
        parser[section] = {f.name: _format(getattr(obj, f.name)) for f in fields(obj) if f.name in schema}
    if scenario.world is not None:
        world = {f.name: _format(getattr(scenario.world, f.name)) for f in fields(scenario.world)}
        if not scenario.world_seed_fixed:
            world.pop("seed")
        parser["world"] = world
    elif scenario.world_file:
        parser["world"] = {}
    if scenario.world_file:
        parser["world"]["file"] = scenario.world_file
    if scenario.failures.events:
        parser["failure"] = {"events": ", ".join(e.to_text() for e in scenario.failures.events)}

    lines = []
    for section in parser.sections():
        lines.append(f"[{section}]")
        lines.extend(f"{key} = {value}" for key, value in parser[section].items())
        lines.append("")
    return "\n".join(lines)
