"""Tests for world file reading and writing."""

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from rotorguard.errors import ConfigError
from rotorguard.world import UNKNOWN, Cylinder, OccupancyWorld, rasterize
from rotorguard.worldfile import decode_runs, encode_runs, import_points, load_world, parse_world, save_world, write_world


def _sample_world():
    world = OccupancyWorld.blank((3.0, 2.0, 1.0), 0.1, seed=7, kind="forest")
    world.truth = rasterize(world, [Cylinder(1.5, 1.0, 0.3, 0.0, 1.0)])
    world.start = np.array([0.5, 1.0, 0.5])
    world.goal = np.array([2.5, 1.0, 0.5])
    return world


def test_runs_describe_the_grid():
    grid = np.array([[0, 0, 1], [1, 1, 0]], dtype=bool)
    assert encode_runs(grid) == [(0, 2), (1, 3), (0, 1)]
    assert_array_equal(decode_runs([(0, 2), (1, 3), (0, 1)], (2, 3)), grid)
    with pytest.raises(ConfigError):
        decode_runs([(0, 2)], (2, 3))


def test_world_file_preserves_world(tmp_path):
    world = _sample_world()
    path = save_world(world, str(tmp_path / "forest.world"))
    loaded = load_world(path)
    assert_array_equal(loaded.truth, world.truth)
    assert_allclose(loaded.bounds_min, world.bounds_min)
    assert_allclose(loaded.bounds_max, world.bounds_max)
    assert loaded.resolution == world.resolution
    assert (loaded.seed, loaded.kind) == (7, "forest")
    assert_allclose(loaded.start, world.start)
    assert_allclose(loaded.goal, world.goal)
    assert np.all(loaded.known == UNKNOWN)


def test_written_file_layout():
    text = write_world(_sample_world())
    lines = text.splitlines()
    assert lines[0] == "# rotorguard world"
    assert lines[1].startswith("bounds 0.0 0.0 0.0 ")
    assert "occupancy" in lines


def test_parse_errors_name_the_field():
    with pytest.raises(ConfigError) as exc:
        parse_world("bounds 0 0 0 1 1 1\nresolution 0.1\ncolour blue\n")
    assert exc.value.field_path == "world.colour"
    with pytest.raises(ConfigError) as exc:
        parse_world("resolution 0.1\noccupancy\n0 1000\n")
    assert exc.value.field_path == "world.bounds"
    with pytest.raises(ConfigError):
        parse_world("bounds 0 0 0 1 1 1\nresolution 0.1\noccupancy\n0 999\n")
    with pytest.raises(ConfigError):
        parse_world("bounds 0 0 0 1 1 1\nresolution 0.1\noccupancy\n0 1000 1\n")
    with pytest.raises(ConfigError):
        load_world("/nonexistent/world")


def test_file_without_runs_is_empty():
    world = parse_world("bounds 0 0 0 1 1 1\nresolution 0.5\n")
    assert world.shape == (2, 2, 2)
    assert not world.truth.any()


def test_import_points():
    world = import_points("# scan\n1.0 1.0 0.5\n2.0, 1.5, 1.0\n", resolution=0.1, padding=1.0)
    assert_allclose(world.bounds_min, [0.0, 0.0, 0.0])
    assert world.truth.sum() == 2
    assert world.truth[tuple(world.cell_of([1.0, 1.0, 0.5]))]
    assert world.kind == "points"
    with pytest.raises(ConfigError):
        import_points("1.0 2.0\n")
    with pytest.raises(ConfigError):
        import_points("")
    bounded = import_points("0.5 0.5 0.5\n9 9 9\n", resolution=0.5, bounds=(0, 0, 0, 2, 2, 2))
    assert bounded.truth.sum() == 1
