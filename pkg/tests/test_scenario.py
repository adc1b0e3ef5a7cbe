"""Tests for scenario files."""

import glob
import os

import pytest

from rotorguard.errors import ConfigError
from rotorguard.fdd import Stage
from rotorguard.scenario import MissionConfig, Scenario, load_scenario, parse_scenario, write_scenario
from rotorguard.sim import FailureMode
from rotorguard.world import WorldSpec

SCENARIO_DIR = os.path.join(os.path.dirname(__file__), "..", "configs", "scenarios")

TRACKING = """
[scenario]
name = test2
duration = 12
seed = 3

[mission]
kind = lemniscate
speed = 1.5   # m/s

[failure]
events = 6.0:0:motor_stop, 8.0:2:propeller_loss:0.5
"""


def test_parse_tracking_scenario():
    scenario = parse_scenario(TRACKING)
    assert (scenario.name, scenario.duration, scenario.seed) == ("test2", 12.0, 3)
    assert scenario.mission.kind == "lemniscate"
    assert scenario.mission.speed == 1.5
    first, second = scenario.failures.events
    assert (first.time, first.rotor, first.mode, first.severity) == (6.0, 0, FailureMode.MOTOR_STOP, 1.0)
    assert (second.rotor, second.mode, second.severity) == (2, FailureMode.PROPELLER_LOSS, 0.5)
    assert scenario.control_dt == pytest.approx(0.005)
    assert scenario.stage_at(0.0) == Stage.TRACKING


def test_written_scenario_parses_back():
    scenario = parse_scenario(
        TRACKING.replace("speed = 1.5", "speed = 1.5\nwaypoints = 1 1 1; 2 2 1\ngoal = 11 4 1")
        + """
[world]
kind = forest
size = 12 8 2.5

[controller]
horizon = 15
u_hi = 7 7 7 7

[planner]
a_max_f = 4.5
"""
    )
    assert parse_scenario(write_scenario(scenario)) == scenario


def test_unknown_names_are_rejected():
    with pytest.raises(ConfigError) as exc:
        parse_scenario("[weather]\nwind = 3\n")
    assert exc.value.field_path == "weather"
    with pytest.raises(ConfigError) as exc:
        parse_scenario("[mission]\ncolour = red\n")
    assert exc.value.field_path == "mission.colour"


def test_bad_values_name_the_field():
    with pytest.raises(ConfigError) as exc:
        parse_scenario("[scenario]\nduration = soon\n")
    assert exc.value.field_path == "scenario.duration"
    with pytest.raises(ConfigError) as exc:
        parse_scenario("[mission]\nkind = loop\n")
    assert exc.value.field_path == "mission.kind"
    with pytest.raises(ConfigError) as exc:
        parse_scenario("[vehicle]\ninertia = 1 2\n")
    assert exc.value.field_path == "vehicle.inertia"
    with pytest.raises(ConfigError) as exc:
        parse_scenario("[failure]\nevents = 2.0:7:motor_stop\n")
    assert exc.value.field_path == "failure.rotor"
    with pytest.raises(ConfigError) as exc:
        parse_scenario("[fdd]\nstage = landing\n")
    assert exc.value.field_path == "fdd.stage"
    with pytest.raises(ConfigError):
        parse_scenario("not an ini file")


def test_scenario_level_checks():
    with pytest.raises(ConfigError) as exc:
        Scenario(mission=MissionConfig(kind="navigate"))
    assert exc.value.field_path == "world.kind"
    with pytest.raises(ConfigError) as exc:
        Scenario(duration=2.0, mission=MissionConfig(kind="takeoff", climb_height=2.0))
    assert exc.value.field_path == "scenario.duration"
    with pytest.raises(ConfigError):
        Scenario(physics_rate=100.0, control_rate=200.0)
    with pytest.raises(ConfigError):
        MissionConfig(kind="waypoints")


def test_takeoff_stage_boundary():
    scenario = Scenario(duration=8.0, mission=MissionConfig(kind="takeoff", climb_height=1.0, climb_speed=1.0))
    assert scenario.takeoff_complete == pytest.approx(1.875 + 0.5)
    assert scenario.stage_at(2.0) == Stage.TAKEOFF
    assert scenario.stage_at(2.5) == Stage.TRACKING


def test_world_seed_follows_run_seed():
    scenario = parse_scenario("[scenario]\nseed = 4\n[mission]\nkind = navigate\n[world]\nkind = forest\n")
    assert scenario.world.seed == 4
    assert scenario.with_seed(9).world.seed == 9
    fixed = parse_scenario("[scenario]\nseed = 4\n[mission]\nkind = navigate\n[world]\nkind = forest\nseed = 1\n")
    assert fixed.with_seed(9).world == WorldSpec(kind="forest", seed=1)


def test_bundled_scenarios_load():
    paths = sorted(glob.glob(os.path.join(SCENARIO_DIR, "*.ini")))
    assert paths
    for path in paths:
        scenario = load_scenario(path)
        assert scenario.name == os.path.splitext(os.path.basename(path))[0]
    hover = load_scenario(os.path.join(SCENARIO_DIR, "hover.ini"))
    assert hover.params.mass == pytest.approx(1.15)


def test_relative_files_resolve_against_the_scenario(tmp_path):
    (tmp_path / "light.params").write_text("mass = 0.9\n", encoding="utf-8")
    path = tmp_path / "custom.ini"
    path.write_text("[vehicle]\nparams_file = light.params\nsigma = 0.05\n[world]\nfile = maps/room.world\n", encoding="utf-8")
    scenario = load_scenario(str(path))
    assert scenario.name == "custom"
    assert scenario.params.mass == pytest.approx(0.9)
    assert scenario.params.sigma == pytest.approx(0.05)
    assert scenario.world_file == os.path.join(str(tmp_path), "maps/room.world")
    with pytest.raises(ConfigError):
        load_scenario(str(tmp_path / "missing.ini"))
