"""JSON config parsing and validation for sensor kits, vehicle parameters,
topic maps, routes, and scenarios.

Parsers collect every violation they can find and raise one ConfigError
listing all of them, rather than bailing at the first problem. All parse_*
functions accept either a JSON string or an already-decoded dict.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional, Tuple

from .convert import DELIVERY_CLASSES, SPLIT_PREFIX, TopicMap, TopicRule

SENSOR_KINDS = ("lidar", "camera", "imu", "gnss", "vehicle_status")
SPLIT_OUTPUT_KEYS = frozenset({"steering", "velocity", "odometry"})
PID_PROFILE_NAMES = ("tuned", "default")


class ConfigError(Exception):
    """Carries the full list of violations found in one validation pass."""

    def __init__(self, errors):
        self.errors = tuple(errors)
        super().__init__("\n".join(f"- {e}" for e in self.errors) or "invalid configuration")


_MISSING = object()


def _as_dict(data, label: str) -> dict:
    if isinstance(data, (str, bytes)):
        try:
            data = json.loads(data)
        except json.JSONDecodeError as e:
            raise ConfigError([f"{label}: not valid JSON ({e})"]) from None
    if not isinstance(data, dict):
        raise ConfigError([f"{label}: top level must be a JSON object, got {type(data).__name__}"])
    return data


def _get(d: dict, key: str, kinds, errors: list, where: str, default=_MISSING):
    """Type-checked field fetch that records violations instead of raising."""
    if key not in d:
        if default is not _MISSING:
            return default
        errors.append(f"{where}: missing required field '{key}'")
        return None
    v = d[key]
    if kinds is not None:
        # bool passes isinstance checks against int; keep it out of numerics
        if isinstance(v, bool) and bool not in (kinds if isinstance(kinds, tuple) else (kinds,)):
            errors.append(f"{where}: field '{key}' must be {_kind_names(kinds)}, got bool")
            return None
        if not isinstance(v, kinds):
            errors.append(f"{where}: field '{key}' must be {_kind_names(kinds)}, got {type(v).__name__}")
            return None
    return v


def _kind_names(kinds) -> str:
    if not isinstance(kinds, tuple):
        kinds = (kinds,)
    return " or ".join(k.__name__ for k in kinds)


def _positive(v, key: str, errors: list, where: str, allow_zero: bool = False) -> bool:
    if v is None:
        return False
    ok = v >= 0 if allow_zero else v > 0
    if not (ok and math.isfinite(v)):
        bound = "non-negative" if allow_zero else "positive"
        errors.append(f"{where}: field '{key}' must be a finite {bound} number, got {v}")
        return False
    return True


# ---------------------------------------------------------------------------
# sensor kit

@dataclass(frozen=True)
class MountPose:
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0
    roll: float = 0.0
    pitch: float = 0.0
    yaw: float = 0.0


@dataclass(frozen=True)
class SensorSpec:
    sensor_id: str
    kind: str
    pose: MountPose = MountPose()
    points_per_second: int = 0  # lidar only
    width: int = 0              # camera only
    height: int = 0


@dataclass(frozen=True)
class SensorKitConfig:
    name: str
    sensors: Tuple[SensorSpec, ...]

    def ids(self) -> Tuple[str, ...]:
        return tuple(s.sensor_id for s in self.sensors)

    def by_id(self, sensor_id: str) -> SensorSpec:
        for s in self.sensors:
            if s.sensor_id == sensor_id:
                return s
        raise KeyError(sensor_id)


def _parse_pose(raw, errors: list, where: str) -> MountPose:
    if raw is None:
        return MountPose()
    if not isinstance(raw, dict):
        errors.append(f"{where}: 'pose' must be an object")
        return MountPose()
    vals = {}
    for k in ("x", "y", "z", "roll", "pitch", "yaw"):
        v = _get(raw, k, (int, float), errors, where, default=0.0)
        vals[k] = float(v) if v is not None else 0.0
    return MountPose(**vals)


def parse_sensor_kit(data) -> SensorKitConfig:
    d = _as_dict(data, "sensor kit")
    errors: list[str] = []
    name = _get(d, "name", str, errors, "sensor kit")
    raw_sensors = _get(d, "sensors", list, errors, "sensor kit")
    specs = []
    if raw_sensors is not None:
        for i, raw in enumerate(raw_sensors):
            where = f"sensor[{i}]"
            if not isinstance(raw, dict):
                errors.append(f"{where}: must be an object")
                continue
            sid = _get(raw, "id", str, errors, where)
            if sid is not None:
                where = f"sensor[{i}] ({sid})"
                if not sid:
                    errors.append(f"{where}: id must be non-empty")
            kind = _get(raw, "kind", str, errors, where)
            if kind is not None and kind not in SENSOR_KINDS:
                errors.append(f"{where}: kind {kind!r} not one of {', '.join(SENSOR_KINDS)}")
                kind = None
            pose = _parse_pose(raw.get("pose"), errors, where)
            pps = width = height = 0
            if kind == "lidar":
                pps = _get(raw, "points_per_second", int, errors, where)
                if pps is not None and not _positive(pps, "points_per_second", errors, where):
                    pps = None
            elif kind == "camera":
                width = _get(raw, "width", int, errors, where)
                height = _get(raw, "height", int, errors, where)
                if width is not None and not _positive(width, "width", errors, where):
                    width = None
                if height is not None and not _positive(height, "height", errors, where):
                    height = None
            if sid is None or kind is None or None in (pps, width, height):
                continue
            specs.append(SensorSpec(sid, kind, pose, pps or 0, width or 0, height or 0))

        seen: set[str] = set()
        for s in specs:
            if s.sensor_id in seen:
                errors.append(f"duplicate sensor id {s.sensor_id!r}")
            seen.add(s.sensor_id)
        status_count = sum(1 for s in specs if s.kind == "vehicle_status")
        if raw_sensors is not None and status_count == 0:
            errors.append("kit must include a vehicle_status sensor (the control loop requires it)")
        if status_count > 1:
            errors.append(f"kit has {status_count} vehicle_status sensors; exactly one is allowed")
    if errors:
        raise ConfigError(errors)
    return SensorKitConfig(name=name, sensors=tuple(specs))


def kit_to_dict(kit: SensorKitConfig) -> dict:
    sensors = []
    for s in kit.sensors:
        raw = {"id": s.sensor_id, "kind": s.kind, "pose": vars(s.pose).copy()}
        if s.kind == "lidar":
            raw["points_per_second"] = s.points_per_second
        elif s.kind == "camera":
            raw["width"] = s.width
            raw["height"] = s.height
        sensors.append(raw)
    return {"name": kit.name, "sensors": sensors}


# ---------------------------------------------------------------------------
# vehicle parameters

@dataclass(frozen=True)
class VehicleParameters:
    wheelbase: float
    max_tire_angle: float
    max_accel: float
    max_brake_decel: float
    drag_coeff: float
    length: float
    width: float
    steer_rate: float = 2.0  # actuator slew, rad/s


def parse_vehicle_params(data) -> VehicleParameters:
    d = _as_dict(data, "vehicle")
    errors: list[str] = []
    vals = {}
    for key in ("wheelbase", "max_tire_angle", "max_accel", "max_brake_decel", "drag_coeff", "length", "width"):
        v = _get(d, key, (int, float), errors, "vehicle")
        if v is not None and _positive(v, key, errors, "vehicle"):
            vals[key] = float(v)
    steer_rate = _get(d, "steer_rate", (int, float), errors, "vehicle", default=2.0)
    if steer_rate is not None and _positive(steer_rate, "steer_rate", errors, "vehicle"):
        vals["steer_rate"] = float(steer_rate)
    mta = vals.get("max_tire_angle")
    if mta is not None and mta >= math.pi / 2:
        errors.append(f"vehicle: max_tire_angle must be below pi/2, got {mta}")
    if errors:
        raise ConfigError(errors)
    return VehicleParameters(**vals)


def vehicle_to_dict(v: VehicleParameters) -> dict:
    return {
        "wheelbase": v.wheelbase,
        "max_tire_angle": v.max_tire_angle,
        "max_accel": v.max_accel,
        "max_brake_decel": v.max_brake_decel,
        "drag_coeff": v.drag_coeff,
        "length": v.length,
        "width": v.width,
        "steer_rate": v.steer_rate,
    }


# ---------------------------------------------------------------------------
# topic map

def parse_topic_map(data) -> TopicMap:
    d = _as_dict(data, "topic map")
    errors: list[str] = []
    raw_rules = _get(d, "topics", list, errors, "topic map")
    rules = []
    if raw_rules is not None:
        for i, raw in enumerate(raw_rules):
            where = f"topics[{i}]"
            if not isinstance(raw, dict):
                errors.append(f"{where}: must be an object")
                continue
            source = _get(raw, "source", str, errors, where)
            dest = _get(raw, "destination", str, errors, where)
            delivery = _get(raw, "delivery", str, errors, where)
            if delivery is not None and delivery not in DELIVERY_CLASSES:
                errors.append(f"{where}: delivery {delivery!r} not one of {', '.join(DELIVERY_CLASSES)}")
                delivery = None
            split_outputs = None
            if dest is not None and dest.startswith(SPLIT_PREFIX):
                split_outputs = _get(raw, "split_outputs", dict, errors, where)
                if split_outputs is not None:
                    keys = set(split_outputs)
                    if keys != set(SPLIT_OUTPUT_KEYS):
                        errors.append(
                            f"{where}: split_outputs keys must be exactly "
                            f"{sorted(SPLIT_OUTPUT_KEYS)}, got {sorted(keys)}"
                        )
                        split_outputs = None
                    elif not all(isinstance(t, str) and t for t in split_outputs.values()):
                        errors.append(f"{where}: split_outputs values must be non-empty topic strings")
                        split_outputs = None
                if split_outputs is None:
                    continue
            elif "split_outputs" in raw:
                errors.append(f"{where}: split_outputs only makes sense on a '{SPLIT_PREFIX}' destination")
            if None in (source, dest, delivery) or not source or not dest:
                if source == "" or dest == "":
                    errors.append(f"{where}: source and destination must be non-empty")
                continue
            rules.append(TopicRule(source, dest, delivery, dict(split_outputs) if split_outputs else None))

        seen_src: set[str] = set()
        for r in rules:
            if r.source in seen_src:
                errors.append(f"duplicate source topic {r.source!r}")
            seen_src.add(r.source)
        seen_dst: set[str] = set()
        for r in rules:
            dests = list(r.split_outputs.values()) if r.split_outputs else [r.destination]
            for dst in dests:
                if dst in seen_dst:
                    errors.append(f"destination topic {dst!r} assigned more than once")
                seen_dst.add(dst)
    if errors:
        raise ConfigError(errors)
    return TopicMap(rules=tuple(rules))


def topic_map_to_dict(tm: TopicMap) -> dict:
    out = []
    for r in tm.rules:
        raw = {"source": r.source, "destination": r.destination, "delivery": r.delivery}
        if r.split_outputs:
            raw["split_outputs"] = dict(r.split_outputs)
        out.append(raw)
    return {"topics": out}


def source_topic(sensor_id: str) -> str:
    return f"sim/{sensor_id}"


def topic_map_issues(tm: TopicMap, kit: SensorKitConfig) -> list[str]:
    """Cross-check a topic map against a kit: every sensor routed, no
    orphan entries, split reserved for vehicle_status."""
    issues = []
    sources = {source_topic(s.sensor_id): s for s in kit.sensors}
    for src, spec in sources.items():
        try:
            rule = tm.lookup(src)
        except KeyError:
            issues.append(f"sensor {spec.sensor_id!r} has no topic map entry for {src!r}")
            continue
        if spec.kind == "vehicle_status" and not rule.is_split:
            issues.append(f"vehicle_status sensor {spec.sensor_id!r} must route to a '{SPLIT_PREFIX}' destination")
        if spec.kind != "vehicle_status" and rule.is_split:
            issues.append(f"sensor {spec.sensor_id!r} of kind {spec.kind!r} cannot route to a split destination")
    for r in tm.rules:
        if r.source not in sources:
            issues.append(f"orphan topic map entry: source {r.source!r} matches no sensor in kit {kit.name!r}")
    return issues


def validate_topic_map(tm: TopicMap, kit: SensorKitConfig) -> None:
    issues = topic_map_issues(tm, kit)
    if issues:
        raise ConfigError(issues)


_DEFAULT_DESTS = {
    "lidar": "av/sensing/lidar/{id}/points",
    "camera": "av/sensing/camera/{id}/image",
    "imu": "av/sensing/imu/{id}",
    "gnss": "av/sensing/gnss/{id}",
}
_DEFAULT_SPLIT_OUTPUTS = {
    "steering": "av/vehicle/status/steering",
    "velocity": "av/vehicle/status/velocity",
    "odometry": "av/localization/kinematic_state",
}


def default_topic_map(kit: SensorKitConfig) -> TopicMap:
    """Generate the conventional routing for a kit; used by bench configs."""
    rules = []
    for s in kit.sensors:
        if s.kind == "vehicle_status":
            rules.append(
                TopicRule(
                    source=source_topic(s.sensor_id),
                    destination=f"{SPLIT_PREFIX}{s.sensor_id}",
                    delivery="reliable",
                    split_outputs=dict(_DEFAULT_SPLIT_OUTPUTS),
                )
            )
        else:
            delivery = "best_effort" if s.kind in ("lidar", "camera") else "reliable"
            rules.append(
                TopicRule(
                    source=source_topic(s.sensor_id),
                    destination=_DEFAULT_DESTS[s.kind].format(id=s.sensor_id),
                    delivery=delivery,
                )
            )
    return TopicMap(rules=tuple(rules))


# ---------------------------------------------------------------------------
# route

@dataclass(frozen=True)
class RouteSpec:
    centerline: Tuple[Tuple[float, float], ...]
    lane_half_width: float
    target_speed: float
    goal_tolerance: float


def parse_route(data) -> RouteSpec:
    d = _as_dict(data, "route")
    errors: list[str] = []
    raw_line = _get(d, "centerline", list, errors, "route")
    points = []
    if raw_line is not None:
        if len(raw_line) < 2:
            errors.append(f"route: centerline needs at least 2 points, got {len(raw_line)}")
        for i, p in enumerate(raw_line):
            if (
                not isinstance(p, (list, tuple))
                or len(p) != 2
                or not all(isinstance(c, (int, float)) and not isinstance(c, bool) and math.isfinite(c) for c in p)
            ):
                errors.append(f"route: centerline[{i}] must be a finite [x, y] pair")
                continue
            points.append((float(p[0]), float(p[1])))
        for i in range(1, len(points)):
            if points[i] == points[i - 1]:
                errors.append(f"route: centerline[{i}] repeats the previous point (zero-length segment)")
    vals = {}
    for key in ("lane_half_width", "target_speed", "goal_tolerance"):
        v = _get(d, key, (int, float), errors, "route")
        if v is not None and _positive(v, key, errors, "route"):
            vals[key] = float(v)
    if errors:
        raise ConfigError(errors)
    return RouteSpec(centerline=tuple(points), **vals)


def route_to_dict(r: RouteSpec) -> dict:
    return {
        "centerline": [[x, y] for x, y in r.centerline],
        "lane_half_width": r.lane_half_width,
        "target_speed": r.target_speed,
        "goal_tolerance": r.goal_tolerance,
    }


# ---------------------------------------------------------------------------
# scenario

@dataclass(frozen=True)
class Endpoints:
    sim_host: str = "127.0.0.1"
    sim_port: int = 2000
    av_host: str = "127.0.0.1"
    av_port: int = 9090


@dataclass(frozen=True)
class ControllerConfig:
    pid_profile: str = "tuned"
    deadband: float = 0.01
    feedforward_gain: float = 0.0
    steer_map_enabled: bool = True


@dataclass(frozen=True)
class LoadModel:
    """Busy-work cost model emulating per-step rendering load (microseconds)."""

    base_step_cost_us: float = 0.0
    cost_per_lidar_point_us: float = 0.0
    cost_per_pixel_us: float = 0.0


@dataclass(frozen=True)
class InitialPose:
    x: float = 0.0
    y: float = 0.0
    yaw: float = 0.0


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    route_file: str
    sensor_kit_file: str
    vehicle_file: str
    topic_map_file: str
    initial_pose: InitialPose = InitialPose()
    seed: int = 0
    duration_limit_s: float = 60.0
    fixed_dt: float = 0.05
    step_deadline_s: float = 5.0
    endpoints: Endpoints = Endpoints()
    controller: ControllerConfig = ControllerConfig()
    load_model: LoadModel = LoadModel()


def _parse_endpoints(raw, errors: list) -> Endpoints:
    if raw is None:
        return Endpoints()
    if not isinstance(raw, dict):
        errors.append("scenario: 'endpoints' must be an object")
        return Endpoints()
    out = {}
    for key, default in (("sim_host", "127.0.0.1"), ("av_host", "127.0.0.1")):
        v = _get(raw, key, str, errors, "endpoints", default=default)
        out[key] = v if v is not None else default
    for key, default in (("sim_port", 2000), ("av_port", 9090)):
        v = _get(raw, key, int, errors, "endpoints", default=default)
        if v is not None and not (0 <= v <= 65535):
            errors.append(f"endpoints: {key} must be within 0..65535, got {v}")
            v = default
        out[key] = v if v is not None else default
    return Endpoints(**out)


def _parse_controller(raw, errors: list) -> ControllerConfig:
    if raw is None:
        return ControllerConfig()
    if not isinstance(raw, dict):
        errors.append("scenario: 'controller' must be an object")
        return ControllerConfig()
    profile = _get(raw, "pid_profile", str, errors, "controller", default="tuned")
    if profile is not None and profile not in PID_PROFILE_NAMES:
        errors.append(f"controller: pid_profile {profile!r} not one of {', '.join(PID_PROFILE_NAMES)}")
        profile = "tuned"
    deadband = _get(raw, "deadband", (int, float), errors, "controller", default=0.01)
    if deadband is not None and not _positive(deadband, "deadband", errors, "controller", allow_zero=True):
        deadband = 0.01
    ff = _get(raw, "feedforward_gain", (int, float), errors, "controller", default=0.0)
    enabled = _get(raw, "steer_map_enabled", bool, errors, "controller", default=True)
    return ControllerConfig(
        pid_profile=profile or "tuned",
        deadband=float(deadband if deadband is not None else 0.01),
        feedforward_gain=float(ff if ff is not None else 0.0),
        steer_map_enabled=bool(enabled if enabled is not None else True),
    )


def _parse_load_model(raw, errors: list) -> LoadModel:
    if raw is None:
        return LoadModel()
    if not isinstance(raw, dict):
        errors.append("scenario: 'load_model' must be an object")
        return LoadModel()
    out = {}
    for key in ("base_step_cost_us", "cost_per_lidar_point_us", "cost_per_pixel_us"):
        v = _get(raw, key, (int, float), errors, "load_model", default=0.0)
        if v is not None and not _positive(v, key, errors, "load_model", allow_zero=True):
            v = 0.0
        out[key] = float(v if v is not None else 0.0)
    return LoadModel(**out)


def parse_scenario(data) -> ScenarioConfig:
    d = _as_dict(data, "scenario")
    errors: list[str] = []
    name = _get(d, "name", str, errors, "scenario")
    files = {}
    for key in ("route_file", "sensor_kit_file", "vehicle_file", "topic_map_file"):
        v = _get(d, key, str, errors, "scenario")
        if v is not None and not v:
            errors.append(f"scenario: {key} must be non-empty")
            v = None
        files[key] = v

    raw_pose = d.get("initial_pose")
    pose = InitialPose()
    if raw_pose is not None:
        if not isinstance(raw_pose, dict):
            errors.append("scenario: 'initial_pose' must be an object")
        else:
            vals = {}
            for k in ("x", "y", "yaw"):
                v = _get(raw_pose, k, (int, float), errors, "initial_pose", default=0.0)
                vals[k] = float(v) if v is not None else 0.0
            pose = InitialPose(**vals)

    seed = _get(d, "seed", int, errors, "scenario", default=0)
    if seed is not None and seed < 0:
        errors.append(f"scenario: seed must be non-negative, got {seed}")
        seed = 0

    numerics = {}
    for key, default in (("duration_limit_s", 60.0), ("fixed_dt", 0.05), ("step_deadline_s", 5.0)):
        v = _get(d, key, (int, float), errors, "scenario", default=default)
        if v is not None and not _positive(v, key, errors, "scenario"):
            v = None
        numerics[key] = float(v) if v is not None else default

    endpoints = _parse_endpoints(d.get("endpoints"), errors)
    controller = _parse_controller(d.get("controller"), errors)
    load_model = _parse_load_model(d.get("load_model"), errors)

    if errors:
        raise ConfigError(errors)
    return ScenarioConfig(
        name=name,
        route_file=files["route_file"],
        sensor_kit_file=files["sensor_kit_file"],
        vehicle_file=files["vehicle_file"],
        topic_map_file=files["topic_map_file"],
        initial_pose=pose,
        seed=seed,
        duration_limit_s=numerics["duration_limit_s"],
        fixed_dt=numerics["fixed_dt"],
        step_deadline_s=numerics["step_deadline_s"],
        endpoints=endpoints,
        controller=controller,
        load_model=load_model,
    )


def scenario_to_dict(sc: ScenarioConfig) -> dict:
    return {
        "name": sc.name,
        "route_file": sc.route_file,
        "sensor_kit_file": sc.sensor_kit_file,
        "vehicle_file": sc.vehicle_file,
        "topic_map_file": sc.topic_map_file,
        "initial_pose": vars(sc.initial_pose).copy(),
        "seed": sc.seed,
        "duration_limit_s": sc.duration_limit_s,
        "fixed_dt": sc.fixed_dt,
        "step_deadline_s": sc.step_deadline_s,
        "endpoints": vars(sc.endpoints).copy(),
        "controller": vars(sc.controller).copy(),
        "load_model": vars(sc.load_model).copy(),
    }


# ---------------------------------------------------------------------------
# resolved bundles and builtin fixtures

@dataclass(frozen=True)
class ResolvedScenario:
    scenario: ScenarioConfig
    kit: SensorKitConfig
    vehicle: VehicleParameters
    topic_map: TopicMap
    route: RouteSpec


def load_scenario(path) -> ResolvedScenario:
    """Load a scenario file and everything it references (paths relative to
    the scenario's directory). Aggregates violations across all files."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError([f"scenario file {path}: {e}"]) from None
    scenario = parse_scenario(text)

    base = path.parent
    errors: list[str] = []
    parts = {}
    for label, rel, parser in (
        ("route", scenario.route_file, parse_route),
        ("kit", scenario.sensor_kit_file, parse_sensor_kit),
        ("vehicle", scenario.vehicle_file, parse_vehicle_params),
        ("topic_map", scenario.topic_map_file, parse_topic_map),
    ):
        fpath = base / rel
        try:
            parts[label] = parser(fpath.read_text())
        except OSError as e:
            errors.append(f"{label} file {fpath}: {e}")
        except ConfigError as e:
            errors.extend(f"{fpath}: {msg}" for msg in e.errors)
    if errors:
        raise ConfigError(errors)

    issues = topic_map_issues(parts["topic_map"], parts["kit"])
    if issues:
        raise ConfigError(issues)
    return ResolvedScenario(
        scenario=scenario,
        kit=parts["kit"],
        vehicle=parts["vehicle"],
        topic_map=parts["topic_map"],
        route=parts["route"],
    )


def builtin_path(name: str) -> Path:
    """Path to a packaged fixture file, e.g. builtin_path('straight_8p33.scenario.json')."""
    p = Path(str(resources.files("simbridge") / "data" / name))
    if not p.exists():
        raise FileNotFoundError(f"no builtin fixture named {name!r}")
    return p
