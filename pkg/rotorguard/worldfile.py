"""World file reader and writer.

A world file is a short header followed by the ground-truth occupancy as
run-length pairs over the grid in C order::

    # rotorguard world
    bounds 0 0 0 10 10 3
    resolution 0.1
    seed 7
    kind forest
    start 1 5 1
    goal 9 5 1
    occupancy
    0 1520 1 4 0 8810 ...

External point lists (``x y z`` per line, metres) can be rasterized into a
world as well.
"""

import os

import numpy as np

from rotorguard.errors import ConfigError
from rotorguard.world import UNKNOWN, OccupancyWorld

HEADER = "# rotorguard world"
PAIRS_PER_LINE = 16


def encode_runs(occupancy: np.ndarray) -> list[tuple[int, int]]:
    flat = occupancy.ravel().astype(np.int8)
    if flat.size == 0:
        return []
    change = np.flatnonzero(np.diff(flat)) + 1
    starts = np.concatenate([[0], change])
    ends = np.concatenate([change, [flat.size]])
    return [(int(flat[s]), int(e - s)) for s, e in zip(starts, ends)]


def decode_runs(runs, shape) -> np.ndarray:
    values = np.repeat([v for v, _ in runs], [n for _, n in runs]).astype(bool)
    expected = int(np.prod(shape))
    if values.size != expected:
        raise ConfigError("world.occupancy", f"run lengths cover {values.size} cells, grid has {expected}")
    return values.reshape(shape)


def _floats(field_name: str, text: str, count: int) -> np.ndarray:
    try:
        values = np.array([float(v) for v in text.split()])
    except ValueError:
        raise ConfigError(f"world.{field_name}", f"not numeric: {text!r}") from None
    if values.size != count:
        raise ConfigError(f"world.{field_name}", f"expected {count} values, got {values.size}")
    return values


def parse_world(content: str) -> OccupancyWorld:
    """Parse world file content; the known map starts fully unknown.

    Args:
        content: Raw text of a world file.

    Returns:
        The OccupancyWorld described by the file.
    """
    header = {}
    runs_text = []
    in_runs = False
    for raw in content.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if in_runs:
            runs_text.append(line)
            continue
        key, _, rest = line.partition(" ")
        if key == "occupancy":
            in_runs = True
        elif key in ("bounds", "resolution", "seed", "kind", "start", "goal"):
            header[key] = rest.strip()
        else:
            raise ConfigError(f"world.{key}", "unknown header line")

    for required in ("bounds", "resolution"):
        if required not in header:
            raise ConfigError(f"world.{required}", "missing from world file")
    bounds = _floats("bounds", header["bounds"], 6)
    resolution = float(_floats("resolution", header["resolution"], 1)[0])
    if not resolution > 0:
        raise ConfigError("world.resolution", f"must be positive, got {resolution!r}")

    world = OccupancyWorld.blank(
        bounds[3:] - bounds[:3],
        resolution,
        origin=bounds[:3],
        seed=int(header.get("seed", "0")),
        kind=header.get("kind", "empty"),
    )
    if "start" in header:
        world.start = _floats("start", header["start"], 3)
    if "goal" in header:
        world.goal = _floats("goal", header["goal"], 3)

    numbers = " ".join(runs_text).split()
    if len(numbers) % 2:
        raise ConfigError("world.occupancy", "run-length data must come in value/count pairs")
    try:
        runs = [(int(numbers[i]), int(numbers[i + 1])) for i in range(0, len(numbers), 2)]
    except ValueError:
        raise ConfigError("world.occupancy", "run-length data must be integers") from None
    if runs:
        world.truth = decode_runs(runs, world.shape)
    return world


def write_world(world: OccupancyWorld) -> str:
    """Serialize a world's bounds, metadata and truth occupancy."""

    def vec(values) -> str:
        return " ".join(repr(float(v)) for v in values)

    lines = [
        HEADER,
        f"bounds {vec(world.bounds_min)} {vec(world.bounds_max)}",
        f"resolution {world.resolution!r}",
        f"seed {world.seed}",
        f"kind {world.kind}",
    ]
    if world.start is not None:
        lines.append(f"start {vec(world.start)}")
    if world.goal is not None:
        lines.append(f"goal {vec(world.goal)}")
    lines.append("occupancy")
    runs = encode_runs(world.truth)
    for i in range(0, len(runs), PAIRS_PER_LINE):
        lines.append(" ".join(f"{v} {n}" for v, n in runs[i : i + PAIRS_PER_LINE]))
    return "\n".join(lines) + "\n"


def load_world(path: str) -> OccupancyWorld:
    if not os.path.isfile(path):
        raise ConfigError("world.file", f"no such file: {path}")
    with open(path, "r", encoding="utf-8") as f:
        return parse_world(f.read())


def save_world(world: OccupancyWorld, path: str) -> str:
    with open(path, "w", encoding="utf-8") as f:
        f.write(write_world(world))
    return path


def import_points(content: str, resolution: float = 0.1, padding: float = 1.0, bounds=None) -> OccupancyWorld:
    """Rasterize an ``x y z`` point list; every cell holding a point is occupied.

    Without explicit ``bounds`` the world spans the points plus ``padding``
    metres, with the floor at z = 0 or below the lowest point.
    """
    rows = []
    for lineno, raw in enumerate(content.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip().replace(",", " ")
        if not line:
            continue
        try:
            values = [float(v) for v in line.split()]
        except ValueError:
            raise ConfigError(f"points (line {lineno})", f"not numeric: {raw.strip()!r}") from None
        if len(values) != 3:
            raise ConfigError(f"points (line {lineno})", "expected 'x y z'")
        rows.append(values)
    points = np.array(rows, dtype=float).reshape(-1, 3)

    if bounds is not None:
        bounds = np.asarray(bounds, dtype=float)
        lower, upper = bounds[:3], bounds[3:]
    elif len(points):
        lower = points.min(axis=0) - padding
        upper = points.max(axis=0) + padding
        lower[2] = min(0.0, points[:, 2].min())
    else:
        raise ConfigError("points", "empty point list and no bounds")

    world = OccupancyWorld.blank(upper - lower, resolution, origin=lower, kind="points")
    cells = world.cell_of(points)
    cells = cells[world.in_grid(cells)]
    world.truth[tuple(cells.T)] = True
    world.known[:] = UNKNOWN
    return world
