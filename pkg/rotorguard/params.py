"""Vehicle parameter file reader and writer.

Parameter files are plain ``key = value`` lines whose keys are exactly the
VehicleParams field names. ``#`` starts a comment; vector fields hold
whitespace-separated numbers.
"""

import os
from dataclasses import fields

from rotorguard.dynamics import VehicleParams, hover_thrusts, rotor_rpm
from rotorguard.errors import ConfigError

VECTOR_FIELDS = {"inertia", "drag"}
INTEGER_FIELDS = {"rotor_count"}

# Units written into generated files; k_n is per (rev/min)^2, which puts
# hover near 14 000 rev/min for the default vehicle.
UNITS = {
    "mass": "kg",
    "inertia": "kg m^2, diagonal",
    "r_d": "m",
    "k_n": "N/(rev/min)^2",
    "kappa_t": "m",
    "drag": "kg/s, diagonal",
    "k_d_psi": "N m s",
    "sigma": "s",
    "thrust_max": "N per rotor",
    "gravity": "m/s^2",
    "rotor_count": "",
}

HOVER_RPM_RANGE = (5000.0, 20000.0)


def parse_params(content: str) -> VehicleParams:
    """Parse parameter file content into VehicleParams.

    Keys missing from the file keep their defaults.

    Args:
        content: Raw text of a parameter file.

    Returns:
        Validated VehicleParams.
    """
    known = {f.name for f in fields(VehicleParams)}
    values = {}
    for lineno, raw in enumerate(content.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"vehicle (line {lineno})", f"expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"vehicle.{key}", "unknown parameter")
        try:
            if key in VECTOR_FIELDS:
                values[key] = tuple(float(v) for v in value.split())
            elif key in INTEGER_FIELDS:
                values[key] = int(value)
            else:
                values[key] = float(value)
        except ValueError:
            raise ConfigError(f"vehicle.{key}", f"not a number: {value!r}") from None
    return VehicleParams(**values)


def write_params(params: VehicleParams) -> str:
    """Serialize VehicleParams to parameter file text."""
    lines = ["# rotorguard vehicle parameters"]
    for f in fields(VehicleParams):
        value = getattr(params, f.name)
        text = " ".join(repr(float(v)) for v in value) if f.name in VECTOR_FIELDS else repr(value)
        unit = UNITS.get(f.name)
        lines.append(f"{f.name} = {text}" + (f"  # {unit}" if unit else ""))
    return "\n".join(lines) + "\n"


def load_params(path: str | None) -> VehicleParams:
    """Load a parameter file; ``None`` yields the defaults."""
    if path is None:
        return VehicleParams()
    if not os.path.isfile(path):
        raise ConfigError("vehicle.params_file", f"no such file: {path}")
    with open(path, "r", encoding="utf-8") as f:
        params = parse_params(f.read())
    check_units(params)
    return params


def check_units(params: VehicleParams) -> float:
    """Hover rotor speed in rev/min, rejected when outside a plausible range.

    Guards against k_n given per (rad/s)^2 instead of per (rev/min)^2.
    """
    rpm = float(rotor_rpm(hover_thrusts(params)[0], params))
    low, high = HOVER_RPM_RANGE
    if not low <= rpm <= high:
        raise ConfigError("vehicle.k_n", f"hover speed {rpm:.0f} rev/min outside [{low:.0f}, {high:.0f}]")
    return rpm
