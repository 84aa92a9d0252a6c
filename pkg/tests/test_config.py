"""Config parsing, cross-file validation, and the packaged fixtures."""

import json
import math

import pytest

from simbridge.config import (
    ConfigError,
    Endpoints,
    LoadModel,
    SensorKitConfig,
    SensorSpec,
    builtin_path,
    default_topic_map,
    kit_to_dict,
    load_scenario,
    parse_route,
    parse_scenario,
    parse_sensor_kit,
    parse_topic_map,
    parse_vehicle_params,
    route_to_dict,
    scenario_to_dict,
    source_topic,
    topic_map_issues,
    topic_map_to_dict,
    validate_topic_map,
    vehicle_to_dict,
)
from simbridge.convert import SPLIT_PREFIX, UnmappedTopicError


def minimal_kit_data(**extra_sensor):
    sensors = [
        {"id": "imu_main", "kind": "imu", "pose": {"z": 0.5}},
        {"id": "veh", "kind": "vehicle_status"},
    ]
    if extra_sensor:
        sensors.append(extra_sensor)
    return {"name": "test_kit", "sensors": sensors}


class TestSensorKit:
    def test_parse_accepts_dict_and_json_text(self):
        data = minimal_kit_data()
        from_dict = parse_sensor_kit(data)
        from_text = parse_sensor_kit(json.dumps(data))
        assert from_dict == from_text
        assert from_dict.ids() == ("imu_main", "veh")

    def test_lidar_and_camera_extras(self):
        kit = parse_sensor_kit(
            {
                "name": "k",
                "sensors": [
                    {"id": "top", "kind": "lidar", "points_per_second": 300000},
                    {"id": "cam", "kind": "camera", "width": 1280, "height": 720},
                    {"id": "veh", "kind": "vehicle_status"},
                ],
            }
        )
        assert kit.by_id("top").points_per_second == 300000
        assert (kit.by_id("cam").width, kit.by_id("cam").height) == (1280, 720)
        with pytest.raises(KeyError):
            kit.by_id("nope")

    def test_roundtrip(self):
        kit = parse_sensor_kit(builtin_path("release_kit.kit.json").read_text())
        assert parse_sensor_kit(kit_to_dict(kit)) == kit

    def test_release_kit_contents(self):
        kit = parse_sensor_kit(builtin_path("release_kit.kit.json").read_text())
        assert len(kit.sensors) == 6
        kinds = sorted(s.kind for s in kit.sensors)
        assert kinds == ["camera", "gnss", "imu", "lidar", "lidar", "vehicle_status"]

    def test_bad_json_text(self):
        with pytest.raises(ConfigError, match="not valid JSON"):
            parse_sensor_kit("{nope")

    def test_top_level_must_be_object(self):
        with pytest.raises(ConfigError, match="must be a JSON object"):
            parse_sensor_kit("[1, 2]")

    def test_unknown_kind(self):
        with pytest.raises(ConfigError, match="kind 'radar' not one of"):
            parse_sensor_kit(minimal_kit_data(id="r", kind="radar"))

    def test_lidar_requires_positive_rate(self):
        with pytest.raises(ConfigError, match="points_per_second"):
            parse_sensor_kit(minimal_kit_data(id="top", kind="lidar", points_per_second=0))

    def test_camera_requires_dimensions(self):
        with pytest.raises(ConfigError, match="width"):
            parse_sensor_kit(minimal_kit_data(id="cam", kind="camera", height=720))

    def test_duplicate_ids(self):
        data = minimal_kit_data()
        data["sensors"].append({"id": "imu_main", "kind": "gnss"})
        with pytest.raises(ConfigError, match="duplicate sensor id 'imu_main'"):
            parse_sensor_kit(data)

    def test_vehicle_status_required(self):
        with pytest.raises(ConfigError, match="must include a vehicle_status"):
            parse_sensor_kit({"name": "k", "sensors": [{"id": "imu", "kind": "imu"}]})

    def test_vehicle_status_exactly_one(self):
        data = minimal_kit_data(id="veh2", kind="vehicle_status")
        with pytest.raises(ConfigError, match="exactly one"):
            parse_sensor_kit(data)

    def test_violations_are_aggregated(self):
        """One parse reports every problem, not just the first."""
        data = {
            "name": "k",
            "sensors": [
                {"id": "a", "kind": "radar"},
                {"id": "b", "kind": "lidar", "points_per_second": -5},
                {"id": "", "kind": "imu"},
            ],
        }
        with pytest.raises(ConfigError) as exc:
            parse_sensor_kit(data)
        text = "\n".join(exc.value.errors)
        assert "radar" in text
        assert "points_per_second" in text
        assert "non-empty" in text
        assert len(exc.value.errors) >= 4  # the three above plus no vehicle_status


class TestVehicleParams:
    VALID = {
        "wheelbase": 2.4,
        "max_tire_angle": 0.61,
        "max_accel": 3.0,
        "max_brake_decel": 8.0,
        "drag_coeff": 0.1,
        "length": 4.9,
        "width": 1.9,
    }

    def test_roundtrip_with_default_steer_rate(self):
        v = parse_vehicle_params(self.VALID)
        assert v.steer_rate == 2.0
        assert parse_vehicle_params(vehicle_to_dict(v)) == v

    def test_every_field_must_be_positive(self):
        bad = {k: -abs(val) for k, val in self.VALID.items()}
        with pytest.raises(ConfigError) as exc:
            parse_vehicle_params(bad)
        assert len(exc.value.errors) == len(self.VALID)

    def test_tire_angle_below_quarter_turn(self):
        data = dict(self.VALID, max_tire_angle=math.pi / 2)
        with pytest.raises(ConfigError, match="below pi/2"):
            parse_vehicle_params(data)

    def test_missing_field(self):
        data = {k: v for k, v in self.VALID.items() if k != "wheelbase"}
        with pytest.raises(ConfigError, match="wheelbase"):
            parse_vehicle_params(data)


class TestTopicMap:
    def release_kit(self) -> SensorKitConfig:
        return parse_sensor_kit(builtin_path("release_kit.kit.json").read_text())

    def test_default_map_covers_kit(self):
        kit = self.release_kit()
        tm = default_topic_map(kit)
        assert topic_map_issues(tm, kit) == []
        assert len(tm.rules) == len(kit.sensors)

    def test_default_map_routing_shapes(self):
        kit = self.release_kit()
        tm = default_topic_map(kit)
        lidar = tm.lookup("sim/lidar_top")
        assert lidar.destination == "av/sensing/lidar/lidar_top/points"
        assert lidar.delivery == "best_effort"
        status = next(r for r in tm.rules if r.is_split)
        assert status.destination.startswith(SPLIT_PREFIX)
        assert set(status.split_outputs) == {"steering", "velocity", "odometry"}

    def test_roundtrip(self):
        tm = default_topic_map(self.release_kit())
        assert parse_topic_map(topic_map_to_dict(tm)) == tm

    def test_lookup_unknown_source(self):
        tm = default_topic_map(self.release_kit())
        with pytest.raises(UnmappedTopicError):
            tm.lookup("sim/ghost")

    def test_missing_sensor_entry_flagged(self):
        kit = self.release_kit()
        tm = default_topic_map(kit)
        pruned = type(tm)(rules=tuple(r for r in tm.rules if r.source != "sim/imu"))
        issues = topic_map_issues(pruned, kit)
        assert any("'imu'" in i and "no topic map entry" in i for i in issues)

    def test_orphan_entry_flagged(self):
        kit = self.release_kit()
        raw = topic_map_to_dict(default_topic_map(kit))
        raw["topics"].append(
            {"source": "sim/ghost", "destination": "av/ghost", "delivery": "reliable"}
        )
        issues = topic_map_issues(parse_topic_map(raw), kit)
        assert any("orphan" in i and "sim/ghost" in i for i in issues)

    def test_vehicle_status_must_split(self):
        kit = self.release_kit()
        raw = topic_map_to_dict(default_topic_map(kit))
        for rule in raw["topics"]:
            if rule["source"] == source_topic("vehicle_status"):
                rule["destination"] = "av/vehicle/raw"
                rule.pop("split_outputs")
        with pytest.raises(ConfigError, match="must route to a"):
            validate_topic_map(parse_topic_map(raw), kit)

    def test_only_vehicle_status_may_split(self):
        kit = self.release_kit()
        raw = topic_map_to_dict(default_topic_map(kit))
        for rule in raw["topics"]:
            if rule["source"] == "sim/imu":
                rule["destination"] = SPLIT_PREFIX + "imu"
                rule["split_outputs"] = {
                    "steering": "a", "velocity": "b", "odometry": "c",
                }
        issues = topic_map_issues(parse_topic_map(raw), kit)
        assert any("cannot route to a split destination" in i for i in issues)

    def test_split_outputs_keys_must_match(self):
        raw = {
            "topics": [
                {
                    "source": "sim/veh",
                    "destination": SPLIT_PREFIX + "veh",
                    "delivery": "reliable",
                    "split_outputs": {"steering": "a", "velocity": "b"},
                }
            ]
        }
        with pytest.raises(ConfigError, match="split_outputs keys must be exactly"):
            parse_topic_map(raw)

    def test_split_outputs_rejected_on_plain_destination(self):
        raw = {
            "topics": [
                {
                    "source": "sim/imu",
                    "destination": "av/imu",
                    "delivery": "reliable",
                    "split_outputs": {"steering": "a", "velocity": "b", "odometry": "c"},
                }
            ]
        }
        with pytest.raises(ConfigError, match="only makes sense"):
            parse_topic_map(raw)

    def test_duplicate_source_and_destination(self):
        raw = {
            "topics": [
                {"source": "sim/a", "destination": "av/x", "delivery": "reliable"},
                {"source": "sim/a", "destination": "av/x", "delivery": "reliable"},
            ]
        }
        with pytest.raises(ConfigError) as exc:
            parse_topic_map(raw)
        text = "\n".join(exc.value.errors)
        assert "duplicate source" in text and "more than once" in text

    def test_unknown_delivery_class(self):
        raw = {"topics": [{"source": "sim/a", "destination": "av/a", "delivery": "fast"}]}
        with pytest.raises(ConfigError, match="delivery 'fast'"):
            parse_topic_map(raw)


class TestRoute:
    VALID = {
        "centerline": [[0, 0], [10, 0], [10, 5]],
        "lane_half_width": 1.75,
        "target_speed": 8.33,
        "goal_tolerance": 2.0,
    }

    def test_roundtrip(self):
        r = parse_route(self.VALID)
        assert r.centerline == ((0.0, 0.0), (10.0, 0.0), (10.0, 5.0))
        assert parse_route(route_to_dict(r)) == r

    def test_needs_two_points(self):
        with pytest.raises(ConfigError, match="at least 2 points"):
            parse_route(dict(self.VALID, centerline=[[0, 0]]))

    def test_rejects_nonfinite_and_bool_coordinates(self):
        with pytest.raises(ConfigError, match=r"centerline\[1\]"):
            parse_route(dict(self.VALID, centerline=[[0, 0], [math.inf, 0]]))
        with pytest.raises(ConfigError, match=r"centerline\[0\]"):
            parse_route(dict(self.VALID, centerline=[[True, 0], [1, 0]]))

    def test_rejects_zero_length_segment(self):
        with pytest.raises(ConfigError, match="repeats the previous point"):
            parse_route(dict(self.VALID, centerline=[[0, 0], [5, 0], [5, 0], [9, 0]]))

    def test_widths_positive(self):
        with pytest.raises(ConfigError, match="lane_half_width"):
            parse_route(dict(self.VALID, lane_half_width=0))


class TestScenario:
    def test_defaults(self):
        sc = parse_scenario(
            {
                "name": "s",
                "route_file": "r.json",
                "sensor_kit_file": "k.json",
                "vehicle_file": "v.json",
                "topic_map_file": "t.json",
            }
        )
        assert sc.endpoints == Endpoints()
        assert sc.controller.pid_profile == "tuned"
        assert sc.controller.steer_map_enabled is True
        assert sc.load_model == LoadModel()
        assert (sc.fixed_dt, sc.step_deadline_s, sc.duration_limit_s) == (0.05, 5.0, 60.0)

    def test_roundtrip_builtin(self):
        sc = parse_scenario(builtin_path("straight_8p33.scenario.json").read_text())
        assert parse_scenario(scenario_to_dict(sc)) == sc

    def test_unknown_pid_profile(self):
        data = scenario_to_dict(parse_scenario(builtin_path("straight_8p33.scenario.json").read_text()))
        data["controller"]["pid_profile"] = "aggressive"
        with pytest.raises(ConfigError, match="pid_profile 'aggressive'"):
            parse_scenario(data)

    def test_port_range(self):
        data = scenario_to_dict(parse_scenario(builtin_path("straight_8p33.scenario.json").read_text()))
        data["endpoints"]["sim_port"] = 70000
        with pytest.raises(ConfigError, match="0..65535"):
            parse_scenario(data)

    def test_negative_seed(self):
        data = scenario_to_dict(parse_scenario(builtin_path("straight_8p33.scenario.json").read_text()))
        data["seed"] = -1
        with pytest.raises(ConfigError, match="seed must be non-negative"):
            parse_scenario(data)

    def test_nonpositive_dt(self):
        data = scenario_to_dict(parse_scenario(builtin_path("straight_8p33.scenario.json").read_text()))
        data["fixed_dt"] = 0.0
        with pytest.raises(ConfigError, match="fixed_dt"):
            parse_scenario(data)


class TestLoadScenario:
    def test_builtin_scenarios_resolve(self):
        for name in ("straight_8p33", "three_sharp_turns", "release"):
            res = load_scenario(builtin_path(f"{name}.scenario.json"))
            assert res.kit.sensors and res.route.centerline
            assert topic_map_issues(res.topic_map, res.kit) == []

    def test_missing_file_path(self, tmp_path):
        with pytest.raises(ConfigError, match="scenario file"):
            load_scenario(tmp_path / "nope.json")

    def test_errors_aggregate_across_referenced_files(self, tmp_path):
        (tmp_path / "r.json").write_text(json.dumps({"centerline": [[0, 0]]}))
        (tmp_path / "k.json").write_text("{broken")
        (tmp_path / "v.json").write_text(json.dumps(TestVehicleParams.VALID))
        (tmp_path / "t.json").write_text(json.dumps({"topics": []}))
        sc = tmp_path / "s.json"
        sc.write_text(
            json.dumps(
                {
                    "name": "s",
                    "route_file": "r.json",
                    "sensor_kit_file": "k.json",
                    "vehicle_file": "v.json",
                    "topic_map_file": "t.json",
                }
            )
        )
        with pytest.raises(ConfigError) as exc:
            load_scenario(sc)
        text = "\n".join(exc.value.errors)
        assert "at least 2 points" in text  # route problem
        assert "not valid JSON" in text     # kit problem
        assert "missing" in text            # empty route fields

    def test_cross_file_topic_check_runs_last(self, tmp_path):
        src = builtin_path("straight_8p33.scenario.json").parent
        for name in ("minimal_kit.kit.json", "van.vehicle.json", "straight_8p33.route.json"):
            (tmp_path / name).write_text((src / name).read_text())
        (tmp_path / "t.json").write_text(json.dumps({"topics": []}))
        sc = tmp_path / "s.json"
        sc.write_text(
            json.dumps(
                {
                    "name": "s",
                    "route_file": "straight_8p33.route.json",
                    "sensor_kit_file": "minimal_kit.kit.json",
                    "vehicle_file": "van.vehicle.json",
                    "topic_map_file": "t.json",
                }
            )
        )
        with pytest.raises(ConfigError, match="no topic map entry"):
            load_scenario(sc)


def test_builtin_path_unknown_name():
    with pytest.raises(FileNotFoundError):
        builtin_path("missing.json")


def test_builtin_grid_exists():
    assert builtin_path("full_grid.json").exists()
