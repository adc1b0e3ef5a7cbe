"""Grid path search on the known map.

26-connected A* over cells whose clearance from occupied-or-unknown space is
at least the requested value, followed by line-of-sight pruning. Setting
``heuristic=False`` turns the search into plain Dijkstra, which the tests use
as the optimality reference.
"""

import heapq
import itertools
import logging

import numpy as np

from rotorguard.errors import PlanningError
from rotorguard.world import OccupancyWorld, connected_free, distance_query_batch

logger = logging.getLogger(__name__)

_OFFSETS = np.array(
    [(i, j, k) for i in (-1, 0, 1) for j in (-1, 0, 1) for k in (-1, 0, 1) if (i, j, k) != (0, 0, 0)]
)
_STEP_LENGTHS = np.linalg.norm(_OFFSETS, axis=1)


def traversable_cells(world: OccupancyWorld, clearance: float) -> np.ndarray:
    """Cells whose center keeps at least ``clearance`` from blocked space and walls."""
    res = world.resolution
    centers_dist = world.center_distances()
    # center-to-center distance over-estimates the surface distance by at most half a diagonal
    candidates = centers_dist < clearance + res * np.sqrt(3.0)
    grids = np.meshgrid(*[np.arange(n) for n in world.shape], indexing="ij")
    cells = np.stack(grids, axis=-1)
    centers = world.cell_center(cells)
    walls = np.min(np.concatenate([centers - world.bounds_min, world.bounds_max - centers], axis=-1), axis=-1)
    candidates |= walls < clearance + res
    traversable = ~candidates
    idx = np.argwhere(candidates)
    if len(idx):
        d, _, _ = distance_query_batch(world, world.cell_center(idx))
        traversable[tuple(idx.T)] = d >= clearance
    return traversable


def grid_search(traversable: np.ndarray, start, goal, resolution: float, heuristic: bool = True):
    """Shortest 26-connected path between two cells.

    Returns:
        ``(cells, cost)`` with cells as an ``(K, 3)`` array including both ends.
    """
    shape = np.array(traversable.shape)
    start = tuple(int(v) for v in start)
    goal = tuple(int(v) for v in goal)
    goal_arr = np.array(goal)
    g_cost = np.full(traversable.shape, np.inf)
    parent = np.full(traversable.shape + (3,), -1, dtype=int)
    closed = np.zeros(traversable.shape, dtype=bool)

    def h(cell) -> float:
        return float(np.linalg.norm(np.array(cell) - goal_arr)) * resolution if heuristic else 0.0

    counter = itertools.count()
    g_cost[start] = 0.0
    frontier = [(h(start), next(counter), start)]
    while frontier:
        _, _, current = heapq.heappop(frontier)
        if closed[current]:
            continue
        closed[current] = True
        if current == goal:
            break
        neighbors = np.array(current) + _OFFSETS
        inside = np.all((neighbors >= 0) & (neighbors < shape), axis=1)
        for offset_idx in np.flatnonzero(inside):
            nxt = tuple(int(v) for v in neighbors[offset_idx])
            if closed[nxt] or not traversable[nxt]:
                continue
            cost = g_cost[current] + _STEP_LENGTHS[offset_idx] * resolution
            if cost < g_cost[nxt]:
                g_cost[nxt] = cost
                parent[nxt] = current
                heapq.heappush(frontier, (cost + h(nxt), next(counter), nxt))

    if not closed[goal]:
        raise PlanningError(f"no path from cell {start} to cell {goal}")
    path = [goal]
    while path[-1] != start:
        path.append(tuple(int(v) for v in parent[path[-1]]))
    return np.array(path[::-1]), float(g_cost[goal])


def _segment_clear(traversable: np.ndarray, world: OccupancyWorld, a: np.ndarray, b: np.ndarray) -> bool:
    count = max(int(np.ceil(np.linalg.norm(b - a) / (0.25 * world.resolution))), 1)
    t = np.linspace(0.0, 1.0, count + 1)
    cells = world.cell_of(a + t[:, None] * (b - a))
    if not np.all(world.in_grid(cells)):
        return False
    return bool(np.all(traversable[tuple(cells.T)]))


def prune_path(points: np.ndarray, traversable: np.ndarray, world: OccupancyWorld) -> list[np.ndarray]:
    """Greedy line-of-sight shortening: keep a point only when the next hop needs it."""
    kept = [points[0]]
    anchor = 0
    while anchor < len(points) - 1:
        reach = anchor + 1
        for j in range(len(points) - 1, anchor, -1):
            if _segment_clear(traversable, world, points[anchor], points[j]):
                reach = j
                break
        kept.append(points[reach])
        anchor = reach
    return kept


def _endpoint_cell(world: OccupancyWorld, traversable: np.ndarray, point: np.ndarray, name: str):
    if not world.contains(point):
        raise PlanningError(f"{name} {point.tolist()} outside the world")
    cell = np.clip(world.cell_of(point), 0, np.array(world.shape) - 1)
    if not traversable[tuple(cell)]:
        raise PlanningError(f"{name} {point.tolist()} lacks the required clearance")
    return cell


def plan_path(world: OccupancyWorld, start, goal, clearance: float, heuristic: bool = True) -> list[np.ndarray]:
    """Front-end path from ``start`` to ``goal`` keeping ``clearance``.

    Args:
        world: World (or snapshot) whose known map is searched.
        start: Start position, must be in traversable space.
        goal: Goal position, must be in traversable space.
        clearance: Required distance from occupied or unknown cells, metres.
        heuristic: Use the Euclidean A* heuristic (False gives Dijkstra).

    Returns:
        Pruned waypoints, starting at ``start`` and ending at ``goal``.
    """
    start = np.asarray(start, dtype=float)
    goal = np.asarray(goal, dtype=float)
    traversable = traversable_cells(world, clearance)
    start_cell = _endpoint_cell(world, traversable, start, "start")
    goal_cell = _endpoint_cell(world, traversable, goal, "goal")
    cells, cost = grid_search(traversable, start_cell, goal_cell, world.resolution, heuristic)
    points = world.cell_center(cells)
    points[0] = start
    points[-1] = goal
    waypoints = prune_path(points, traversable, world)
    logger.debug("A* path: %d cells, cost %.2f m, %d waypoints", len(cells), cost, len(waypoints))
    return waypoints


def reachable_subgoal(world: OccupancyWorld, start, goal, clearance: float) -> np.ndarray:
    """Traversable cell reachable from ``start`` that lies closest to ``goal``.

    Used while the goal is still in unknown space: the vehicle flies toward
    the frontier and replans as more of the map is revealed.
    """
    start = np.asarray(start, dtype=float)
    goal = np.asarray(goal, dtype=float)
    traversable = traversable_cells(world, clearance)
    start_cell = _endpoint_cell(world, traversable, start, "start")
    region = connected_free(world, traversable, start_cell)
    cells = np.argwhere(region)
    centers = world.cell_center(cells)
    best = int(np.argmin(np.linalg.norm(centers - goal, axis=1)))
    return centers[best]


def path_length(waypoints) -> float:
    points = np.asarray(waypoints, dtype=float)
    return float(np.sum(np.linalg.norm(np.diff(points, axis=0), axis=1)))
