"""Occupancy worlds for navigation runs.

A world holds the ground-truth occupancy grid and the known map the vehicle
has revealed so far. Distance queries run against the known map with unknown
cells treated as occupied; the world bounds count as walls. The truth grid
backs the collision check of the harness.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import distance_transform_edt, label

from rotorguard.errors import ConfigError, QueryError, WorldGenerationError

logger = logging.getLogger(__name__)

UNKNOWN = -1
FREE = 0
OCCUPIED = 1
DISTANCE_CAP = 10.0
WORLD_KINDS = ("empty", "corridor", "forest", "room")

_NEIGHBORHOOD = np.array([(i, j, k) for i in (-1, 0, 1) for j in (-1, 0, 1) for k in (-1, 0, 1)])
_REVEAL_CHUNK = 4096


@dataclass(frozen=True)
class Cylinder:
    """Vertical cylinder standing on z = z0."""

    x: float
    y: float
    radius: float
    z0: float
    z1: float


@dataclass(frozen=True)
class Box:
    lower: tuple
    upper: tuple


@dataclass(frozen=True)
class DistanceQuery:
    """Distance to the nearest obstacle plane: surface point ``s`` and unit normal ``v`` toward free space."""

    distance: float
    point: np.ndarray
    normal: np.ndarray


@dataclass(eq=False)
class OccupancyWorld:
    bounds_min: np.ndarray
    bounds_max: np.ndarray
    resolution: float
    truth: np.ndarray
    known: np.ndarray
    primitives: list = field(default_factory=list)
    seed: int = 0
    kind: str = "empty"
    start: np.ndarray | None = None
    goal: np.ndarray | None = None

    def __post_init__(self):
        self.bounds_min = np.asarray(self.bounds_min, dtype=float)
        self.bounds_max = np.asarray(self.bounds_max, dtype=float)
        if not self.resolution > 0:
            raise ConfigError("world.resolution", f"must be positive, got {self.resolution!r}")
        if np.any(self.bounds_max <= self.bounds_min):
            raise ConfigError("world.bounds", "upper bounds must exceed lower bounds")
        if self.truth.shape != self.known.shape:
            raise ConfigError("world.occupancy", "truth and known grids differ in shape")
        self._version = 0
        self._cache: dict = {}

    @classmethod
    def blank(cls, size, resolution: float = 0.1, origin=(0.0, 0.0, 0.0), **kwargs) -> "OccupancyWorld":
        origin = np.asarray(origin, dtype=float)
        shape = tuple(int(np.ceil(s / resolution - 1e-9)) for s in size)
        return cls(
            bounds_min=origin,
            bounds_max=origin + np.array(shape) * resolution,
            resolution=resolution,
            truth=np.zeros(shape, dtype=bool),
            known=np.full(shape, UNKNOWN, dtype=np.int8),
            **kwargs,
        )

    @property
    def shape(self) -> tuple:
        return self.truth.shape

    @property
    def version(self) -> int:
        return self._version

    def cell_of(self, points) -> np.ndarray:
        """Integer cell indices of points (not clipped)."""
        points = np.asarray(points, dtype=float)
        return np.floor((points - self.bounds_min) / self.resolution).astype(int)

    def cell_center(self, cells) -> np.ndarray:
        return self.bounds_min + (np.asarray(cells) + 0.5) * self.resolution

    def contains(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return np.all((points >= self.bounds_min) & (points <= self.bounds_max), axis=-1)

    def in_grid(self, cells) -> np.ndarray:
        cells = np.asarray(cells)
        return np.all((cells >= 0) & (cells < np.array(self.shape)), axis=-1)

    def mark_changed(self) -> None:
        self._version += 1
        self._cache.clear()

    def set_truth(self, truth: np.ndarray) -> None:
        """Replace the ground truth (moving obstacles); the known map only follows on reveal."""
        if truth.shape != self.shape:
            raise ConfigError("world.occupancy", "new truth grid has the wrong shape")
        self.truth = truth.astype(bool)
        self._cache.pop("truth", None)

    def reveal_all(self) -> None:
        self.known = self.truth.astype(np.int8)
        self.mark_changed()

    def snapshot(self) -> "OccupancyWorld":
        """Immutable copy for the planner."""
        known = self.known.copy()
        known.setflags(write=False)
        truth = self.truth.copy()
        truth.setflags(write=False)
        return OccupancyWorld(
            bounds_min=self.bounds_min.copy(),
            bounds_max=self.bounds_max.copy(),
            resolution=self.resolution,
            truth=truth,
            known=known,
            primitives=list(self.primitives),
            seed=self.seed,
            kind=self.kind,
            start=self.start,
            goal=self.goal,
        )

    def blocked(self) -> np.ndarray:
        """Cells the planner must avoid: occupied or unknown."""
        return self.known != FREE

    def _field(self, name: str, blocked: np.ndarray):
        cached = self._cache.get(name)
        if cached is not None:
            return cached
        res = self.resolution
        if np.any(blocked):
            outside, outside_idx = distance_transform_edt(~blocked, sampling=res, return_indices=True)
        else:
            outside, outside_idx = np.full(blocked.shape, np.inf), None
        if np.any(~blocked):
            inside, inside_idx = distance_transform_edt(blocked, sampling=res, return_indices=True)
        else:
            inside, inside_idx = np.full(blocked.shape, np.inf), None
        entry = (blocked, outside, outside_idx, inside_idx)
        self._cache[name] = entry
        return entry

    def center_distances(self, truth: bool = False) -> np.ndarray:
        """Distances between cell centers and the nearest blocked cell center."""
        blocked = self.truth if truth else self.blocked()
        return self._field("truth" if truth else "known", blocked)[1]


def _box_closest(points: np.ndarray, lower: np.ndarray, upper: np.ndarray) -> np.ndarray:
    return np.clip(points, lower, upper)


def _nearest_surface(world: OccupancyWorld, points: np.ndarray, blocked: np.ndarray, index_field, target: bool):
    """Closest point on any cell box with ``blocked == target`` near the EDT seed cell."""
    res = world.resolution
    shape = np.array(world.shape)
    cells = np.clip(world.cell_of(points), 0, shape - 1)
    seeds = np.stack([index_field[axis][tuple(cells.T)] for axis in range(3)], axis=-1)
    candidates = seeds[:, None, :] + _NEIGHBORHOOD[None, :, :]
    valid = np.all((candidates >= 0) & (candidates < shape), axis=-1)
    clipped = np.clip(candidates, 0, shape - 1)
    valid &= blocked[tuple(np.moveaxis(clipped, -1, 0))] == target
    lower = world.bounds_min + clipped * res
    closest = _box_closest(points[:, None, :], lower, lower + res)
    dist = np.linalg.norm(points[:, None, :] - closest, axis=-1)
    dist = np.where(valid, dist, np.inf)
    best = np.argmin(dist, axis=1)
    rows = np.arange(len(points))
    return dist[rows, best], closest[rows, best]


def _bounds_surface(world: OccupancyWorld, points: np.ndarray):
    """Distance to the nearest face of the world box (negative outside) and the face point."""
    below = points - world.bounds_min
    above = world.bounds_max - points
    gaps = np.concatenate([below, above], axis=1)
    face = np.argmin(gaps, axis=1)
    rows = np.arange(len(points))
    distance = gaps[rows, face]
    surface = points.copy()
    axis = face % 3
    surface[rows, axis] = np.where(face < 3, world.bounds_min[axis], world.bounds_max[axis])
    outside = ~world.contains(points)
    if np.any(outside):
        clamped = np.clip(points[outside], world.bounds_min, world.bounds_max)
        surface[outside] = clamped
        distance[outside] = -np.linalg.norm(points[outside] - clamped, axis=1)
    return distance, surface


def _signed_distance(world: OccupancyWorld, points: np.ndarray, truth: bool, walls: bool):
    points = np.atleast_2d(np.asarray(points, dtype=float))
    count = len(points)
    distance = np.full(count, DISTANCE_CAP)
    surface = points + np.array([0.0, 0.0, -DISTANCE_CAP])
    normal = np.tile([0.0, 0.0, 1.0], (count, 1))

    blocked, outside, outside_idx, inside_idx = world._field(
        "truth" if truth else "known", world.truth if truth else world.blocked()
    )
    cells = np.clip(world.cell_of(points), 0, np.array(world.shape) - 1)
    in_blocked = blocked[tuple(cells.T)] & world.contains(points)

    free_pts = ~in_blocked
    if np.any(free_pts) and outside_idx is not None:
        d, s = _nearest_surface(world, points[free_pts], blocked, outside_idx, True)
        closer = d < distance[free_pts]
        idx = np.flatnonzero(free_pts)[closer]
        distance[idx] = d[closer]
        surface[idx] = s[closer]
        offset = points[idx] - surface[idx]
        norms = np.linalg.norm(offset, axis=1, keepdims=True)
        normal[idx] = np.where(norms > 1e-12, offset / np.maximum(norms, 1e-12), normal[idx])

    if np.any(in_blocked):
        idx = np.flatnonzero(in_blocked)
        if inside_idx is None:
            distance[idx] = -DISTANCE_CAP
        else:
            d, s = _nearest_surface(world, points[idx], blocked, inside_idx, False)
            distance[idx] = -d
            surface[idx] = s
            offset = s - points[idx]
            norms = np.linalg.norm(offset, axis=1, keepdims=True)
            normal[idx] = np.where(norms > 1e-12, offset / np.maximum(norms, 1e-12), normal[idx])

    if walls:
        d, s = _bounds_surface(world, points)
        closer = d < distance
        distance[closer] = d[closer]
        surface[closer] = s[closer]
        offset = points[closer] - s[closer]
        norms = np.linalg.norm(offset, axis=1, keepdims=True)
        inward = np.where(norms > 1e-12, offset / np.maximum(norms, 1e-12), 0.0)
        # outside the box the normal points back inside
        inward = np.where((d[closer] < 0)[:, None], -inward, inward)
        face_normal = _face_normals(world, s[closer])
        normal[closer] = np.where(norms > 1e-12, inward, face_normal)
    return distance, surface, normal


def _face_normals(world: OccupancyWorld, surface: np.ndarray) -> np.ndarray:
    normals = np.zeros_like(surface)
    for axis in range(3):
        at_min = np.isclose(surface[:, axis], world.bounds_min[axis])
        at_max = np.isclose(surface[:, axis], world.bounds_max[axis])
        normals[at_min & ~np.any(normals, axis=1), axis] = 1.0
        normals[at_max & ~np.any(normals, axis=1), axis] = -1.0
    normals[~np.any(normals, axis=1), 2] = 1.0
    return normals


def distance_query_batch(world: OccupancyWorld, points):
    """Signed distances, surface points and normals for many points.

    Points outside the bounds get a negative distance instead of an error so
    the planner can push samples back inside.

    Returns:
        ``(distance (P,), surface (P, 3), normal (P, 3))``.
    """
    return _signed_distance(world, points, truth=False, walls=True)


def distance_query(world: OccupancyWorld, p) -> DistanceQuery:
    """Distance from ``p`` to the nearest occupied-or-unknown cell surface or world wall.

    Args:
        world: World whose known map is queried.
        p: Query point inside the bounds.

    Returns:
        The DistanceQuery; ``distance`` is negative inside obstacles and the
        normal then points toward the nearest free cell.
    """
    p = np.asarray(p, dtype=float)
    if p.shape != (3,) or not np.all(np.isfinite(p)):
        raise QueryError(f"query point must be a finite 3-vector, got {p!r}")
    if not world.contains(p):
        raise QueryError(f"query point {p.tolist()} outside world bounds")
    d, s, v = distance_query_batch(world, p[None, :])
    return DistanceQuery(float(d[0]), s[0], v[0])


def truth_clearance(world: OccupancyWorld, points) -> np.ndarray:
    """Signed distance to true obstacles (walls excluded); non-positive means collision."""
    return _signed_distance(world, points, truth=True, walls=False)[0]


def _line_of_sight(world: OccupancyWorld, origin: np.ndarray, cells: np.ndarray) -> np.ndarray:
    """True where no occupied truth cell lies strictly between ``origin`` and the cell."""
    res = world.resolution
    visible = np.ones(len(cells), dtype=bool)
    origin_cell = world.cell_of(origin)
    shape = np.array(world.shape)
    for start in range(0, len(cells), _REVEAL_CHUNK):
        chunk = cells[start : start + _REVEAL_CHUNK]
        targets = world.cell_center(chunk)
        lengths = np.linalg.norm(targets - origin, axis=1)
        steps = int(np.ceil(lengths.max() / (0.5 * res))) + 1
        fractions = np.linspace(0.0, 1.0, steps)
        samples = origin + fractions[None, :, None] * (targets - origin)[:, None, :]
        sample_cells = world.cell_of(samples)
        inside = np.all((sample_cells >= 0) & (sample_cells < shape), axis=-1)
        clipped = np.clip(sample_cells, 0, shape - 1)
        hit = world.truth[tuple(np.moveaxis(clipped, -1, 0))] & inside
        own = np.all(sample_cells == chunk[:, None, :], axis=-1) | np.all(sample_cells == origin_cell, axis=-1)
        visible[start : start + len(chunk)] = ~np.any(hit & ~own, axis=1)
    return visible


def reveal(world: OccupancyWorld, position, radius: float) -> int:
    """Copy truth into the known map for cells within ``radius`` and in line of sight.

    Cells never return to unknown. Returns the number of cells whose known
    value changed.
    """
    if not radius > 0:
        raise ConfigError("world.reveal_radius", f"must be positive, got {radius!r}")
    position = np.asarray(position, dtype=float)
    res = world.resolution
    shape = np.array(world.shape)
    lo = np.clip(world.cell_of(position - radius), 0, shape - 1)
    hi = np.clip(world.cell_of(position + radius), 0, shape - 1)
    grids = np.meshgrid(*[np.arange(lo[a], hi[a] + 1) for a in range(3)], indexing="ij")
    cells = np.stack([g.ravel() for g in grids], axis=-1)
    near = np.linalg.norm(world.cell_center(cells) - position, axis=1) <= radius
    cells = cells[near]
    index = tuple(cells.T)
    stale = world.known[index] != world.truth[index].astype(np.int8)
    cells = cells[stale]
    if len(cells) == 0:
        return 0
    visible = _line_of_sight(world, position, cells)
    cells = cells[visible]
    if len(cells):
        index = tuple(cells.T)
        world.known[index] = world.truth[index].astype(np.int8)
        world.mark_changed()
        logger.debug("revealed %d cells around %s", len(cells), np.round(position, 2).tolist())
    return int(len(cells))


def path_is_clear(world: OccupancyWorld, path, clearance: float) -> bool:
    """Whether a polyline keeps ``clearance`` from the known map everywhere."""
    path = np.asarray(path, dtype=float)
    if len(path) == 0:
        return True
    samples = [path[:1]]
    for a, b in zip(path[:-1], path[1:]):
        count = max(int(np.ceil(np.linalg.norm(b - a) / (0.5 * world.resolution))), 1)
        t = np.linspace(0.0, 1.0, count + 1)[1:]
        samples.append(a + t[:, None] * (b - a))
    distance, _, _ = distance_query_batch(world, np.concatenate(samples))
    return bool(np.all(distance >= clearance))


@dataclass(frozen=True)
class WorldSpec:
    """Procedural world description.

    ``density`` is obstacles per square metre for forests and rooms and the
    number of walls for corridors.
    """

    kind: str = "empty"
    size: tuple = (10.0, 10.0, 3.0)
    resolution: float = 0.1
    density: float = 0.1
    seed: int = 0
    start: tuple | None = None
    goal: tuple | None = None
    min_gap: float = 1.0
    safe_distance: float = 0.3
    max_retries: int = 20

    def __post_init__(self):
        if self.kind not in WORLD_KINDS:
            raise ConfigError("world.kind", f"unknown kind {self.kind!r}; expected one of {WORLD_KINDS}")
        size = tuple(float(s) for s in self.size)
        if len(size) != 3 or any(s <= 0 for s in size):
            raise ConfigError("world.size", "expected three positive extents")
        object.__setattr__(self, "size", size)
        if not self.resolution > 0:
            raise ConfigError("world.resolution", f"must be positive, got {self.resolution!r}")
        if self.density < 0:
            raise ConfigError("world.density", "must be non-negative")
        if self.min_gap <= 0 or self.safe_distance <= 0:
            raise ConfigError("world.min_gap", "gap and safe distance must be positive")

    @property
    def start_point(self) -> np.ndarray:
        if self.start is not None:
            return np.array(self.start, dtype=float)
        return np.array([1.0, self.size[1] / 2.0, min(1.0, self.size[2] / 2.0)])

    @property
    def goal_point(self) -> np.ndarray:
        if self.goal is not None:
            return np.array(self.goal, dtype=float)
        return np.array([self.size[0] - 1.0, self.size[1] / 2.0, min(1.0, self.size[2] / 2.0)])


def rasterize(world: OccupancyWorld, primitives) -> np.ndarray:
    """Occupancy of cell centers covered by any primitive."""
    grids = np.meshgrid(*[np.arange(n) for n in world.shape], indexing="ij")
    centers = world.cell_center(np.stack(grids, axis=-1))
    occupied = np.zeros(world.shape, dtype=bool)
    for prim in primitives:
        if isinstance(prim, Cylinder):
            occupied |= (
                ((centers[..., 0] - prim.x) ** 2 + (centers[..., 1] - prim.y) ** 2 <= prim.radius ** 2)
                & (centers[..., 2] >= prim.z0)
                & (centers[..., 2] <= prim.z1)
            )
        else:
            occupied |= np.all((centers >= np.array(prim.lower)) & (centers <= np.array(prim.upper)), axis=-1)
    return occupied


def _forest(spec: WorldSpec, rng: np.random.Generator) -> list:
    area = spec.size[0] * spec.size[1]
    target = int(round(spec.density * area))
    keep_clear = (spec.start_point[:2], spec.goal_point[:2])
    trees: list[Cylinder] = []
    attempts = 0
    while len(trees) < target and attempts < 50 * max(target, 1):
        attempts += 1
        radius = rng.uniform(0.1, 0.4)
        x = rng.uniform(radius, spec.size[0] - radius)
        y = rng.uniform(radius, spec.size[1] - radius)
        if any(np.hypot(x - p[0], y - p[1]) < radius + 1.0 for p in keep_clear):
            continue
        if any(np.hypot(x - t.x, y - t.y) - radius - t.radius < spec.min_gap for t in trees):
            continue
        trees.append(Cylinder(x, y, radius, 0.0, spec.size[2]))
    return trees


def _corridor(spec: WorldSpec, rng: np.random.Generator) -> list:
    walls = max(int(round(spec.density)), 1)
    length, width, height = spec.size
    thickness = 0.2
    gap = max(spec.min_gap, 4.0 * spec.safe_distance + 0.2)
    boxes = []
    for i in range(walls):
        x = length * (i + 1) / (walls + 1)
        center = rng.uniform(gap / 2.0, width - gap / 2.0)
        if center - gap / 2.0 > 0:
            boxes.append(Box((x - thickness / 2, 0.0, 0.0), (x + thickness / 2, center - gap / 2.0, height)))
        if center + gap / 2.0 < width:
            boxes.append(Box((x - thickness / 2, center + gap / 2.0, 0.0), (x + thickness / 2, width, height)))
    return boxes


def _room(spec: WorldSpec, rng: np.random.Generator) -> list:
    area = spec.size[0] * spec.size[1]
    target = int(round(spec.density * area))
    keep_clear = (spec.start_point, spec.goal_point)
    boxes = []
    attempts = 0
    while len(boxes) < target and attempts < 50 * max(target, 1):
        attempts += 1
        extent = rng.uniform(0.4, 1.5, size=2)
        height = rng.uniform(0.5, spec.size[2])
        x = rng.uniform(0.0, spec.size[0] - extent[0])
        y = rng.uniform(0.0, spec.size[1] - extent[1])
        lower = np.array([x, y, 0.0])
        upper = np.array([x + extent[0], y + extent[1], height])
        if any(np.all((p >= lower - 1.0) & (p <= upper + 1.0)) for p in keep_clear):
            continue
        boxes.append(Box(tuple(lower), tuple(upper)))
    return boxes


_GENERATORS = {"forest": _forest, "corridor": _corridor, "room": _room}


def generate_world(spec: WorldSpec) -> OccupancyWorld:
    """Build a world from ``spec``; deterministic for a seed.

    Non-empty worlds are accepted only when a path with clearance of twice
    the safe distance joins the start and goal on the truth map; rejected
    layouts are redrawn up to ``max_retries`` times.
    """
    from rotorguard.pathsearch import plan_path

    rng = np.random.default_rng(spec.seed)
    for attempt in range(spec.max_retries):
        world = OccupancyWorld.blank(spec.size, spec.resolution, seed=spec.seed, kind=spec.kind)
        world.start = spec.start_point
        world.goal = spec.goal_point
        if spec.kind == "empty":
            return world
        world.primitives = _GENERATORS[spec.kind](spec, rng)
        world.truth = rasterize(world, world.primitives)
        check = world.snapshot()
        check.known = check.truth.astype(np.int8)
        check.mark_changed()
        try:
            plan_path(check, world.start, world.goal, 2.0 * spec.safe_distance)
        except Exception as e:
            logger.warning("Rejected %s world (seed %d, attempt %d): %s", spec.kind, spec.seed, attempt + 1, e)
            continue
        logger.info("Generated %s world with %d obstacles (seed %d)", spec.kind, len(world.primitives), spec.seed)
        return world
    raise WorldGenerationError(f"no feasible {spec.kind} world after {spec.max_retries} attempts (seed {spec.seed})")


def connected_free(world: OccupancyWorld, traversable: np.ndarray, start_cell) -> np.ndarray:
    """Cells of ``traversable`` 26-connected to ``start_cell``."""
    labels, _ = label(traversable, structure=np.ones((3, 3, 3)))
    tag = labels[tuple(start_cell)]
    if tag == 0:
        return np.zeros_like(traversable)
    return labels == tag
