"""Mock driving simulator: kinematic bicycle vehicle, deterministic synthetic
sensors, a busy-work load model standing in for rendering cost, and the
lockstep TCP server that serves it all.

The simulator world is left-handed: x forward, y right, z up, yaw and steer
positive clockwise seen from above (a positive tire angle turns the vehicle
toward +y). Sensor data leaves in this frame; the bridge owns conversion.
"""

from __future__ import annotations

import json
import logging
import math
import socket
import time
import zlib
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .config import LoadModel, ResolvedScenario, SensorKitConfig, SensorSpec, VehicleParameters
from .messages import (
    GnssFix,
    ImageFrame,
    ImuSample,
    PointCloud,
    VehicleControl,
    VehicleStatus,
    pack_gnss,
    pack_image,
    pack_imu,
    pack_point_cloud,
    pack_vehicle_status,
    unpack_vehicle_control,
)
from .protocol import (
    ConnectionClosed,
    FrameReader,
    MsgType,
    OrderingError,
    SimClock,
    send_frame,
    tune_stream,
)

log = logging.getLogger(__name__)

GRAVITY = 9.81
LIDAR_MAX_RANGE = 120.0
ACCEPT_TIMEOUT_S = 30.0

# Static props the lidar rays can hit besides the ground plane.
_WORLD_BOXES = np.array(
    [
        # xmin, xmax, ymin, ymax, zmin, zmax
        [15.0, 19.0, 3.0, 6.0, 0.0, 2.5],
        [40.0, 44.0, -8.0, -5.0, 0.0, 3.0],
        [70.0, 75.0, 4.0, 9.0, 0.0, 2.0],
        [-20.0, -16.0, -6.0, -2.0, 0.0, 2.5],
    ]
)


@dataclass(frozen=True)
class VehicleState:
    x: float = 0.0
    y: float = 0.0
    yaw: float = 0.0
    speed: float = 0.0
    tire_angle: float = 0.0
    accel: float = 0.0     # effective longitudinal accel over the last step
    yaw_rate: float = 0.0


def step_vehicle(
    state: VehicleState, control: VehicleControl, params: VehicleParameters, dt: float
) -> VehicleState:
    """Advance the kinematic bicycle one fixed step.

    Longitudinal: accel = a_max*throttle - b_max*brake - drag*speed, with
    speed floored at zero (no reverse). The tire angle slews toward
    steer*max_tire_angle at the actuator rate. Yaw advances by
    speed*tan(tire)/wheelbase*dt; position integrates along the midpoint
    heading so a constant-radius command traces a polygon whose vertices sit
    on the ideal circle.
    """
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    accel_cmd = (
        params.max_accel * control.throttle
        - params.max_brake_decel * control.brake
        - params.drag_coeff * state.speed
    )
    speed = max(0.0, state.speed + accel_cmd * dt)
    effective_accel = (speed - state.speed) / dt

    target = control.steer * params.max_tire_angle
    max_delta = params.steer_rate * dt
    delta = max(-max_delta, min(max_delta, target - state.tire_angle))
    tire = state.tire_angle + delta

    yaw_rate = speed * math.tan(tire) / params.wheelbase
    dyaw = yaw_rate * dt
    heading = state.yaw + 0.5 * dyaw
    return VehicleState(
        x=state.x + speed * math.cos(heading) * dt,
        y=state.y + speed * math.sin(heading) * dt,
        yaw=state.yaw + dyaw,
        speed=speed,
        tire_angle=tire,
        accel=effective_accel,
        yaw_rate=yaw_rate,
    )


# ---------------------------------------------------------------------------
# sensor generation

def _sensor_rng(seed: int, sensor_id: str, step: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(sensor_id.encode()), step]))


def _rot_z(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _rot_zyx(roll: float, pitch: float, yaw: float) -> np.ndarray:
    cr, sr = math.cos(roll), math.sin(roll)
    cp, sp = math.cos(pitch), math.sin(pitch)
    cy, sy = math.cos(yaw), math.sin(yaw)
    rz = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1.0]])
    ry = np.array([[cp, 0, sp], [0, 1.0, 0], [-sp, 0, cp]])
    rx = np.array([[1.0, 0, 0], [0, cr, -sr], [0, sr, cr]])
    return rz @ ry @ rx


def lidar_point_count(spec: SensorSpec, dt: float) -> int:
    return round(spec.points_per_second * dt)


def generate_lidar(
    state: VehicleState, spec: SensorSpec, dt: float, step: int, seed: int
) -> PointCloud:
    """Cast one frame of rays against the ground plane and the world boxes.

    Emits exactly round(points_per_second * dt) points in the sensor's own
    left-handed frame; rays that clear everything return a point at max
    range, so the count never varies. Fully deterministic per
    (seed, sensor_id, step).
    """
    n = lidar_point_count(spec, dt)
    rng = _sensor_rng(seed, spec.sensor_id, step)
    azimuth = rng.uniform(0.0, 2.0 * math.pi, n)
    elevation = rng.uniform(math.radians(-24.0), math.radians(-2.0), n)

    cos_el = np.cos(elevation)
    dirs = np.stack([cos_el * np.cos(azimuth), cos_el * np.sin(azimuth), np.sin(elevation)], axis=1)

    mount = spec.pose
    rot = _rot_z(state.yaw) @ _rot_zyx(mount.roll, mount.pitch, mount.yaw)
    origin = _rot_z(state.yaw) @ np.array([mount.x, mount.y, mount.z]) + np.array([state.x, state.y, 0.0])
    world_dirs = dirs @ rot.T

    t_hit = np.full(n, LIDAR_MAX_RANGE)
    dz = world_dirs[:, 2]
    falling = dz < -1e-12
    t_ground = np.where(falling, -origin[2] / np.where(falling, dz, -1.0), np.inf)
    np.minimum(t_hit, t_ground, out=t_hit)

    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / world_dirs  # inf on zero components is fine for slab tests
    for box in _WORLD_BOXES:
        lo = (box[0::2] - origin) * inv
        hi = (box[1::2] - origin) * inv
        t_near = np.max(np.minimum(lo, hi), axis=1)
        t_far = np.min(np.maximum(lo, hi), axis=1)
        hit = (t_near <= t_far) & (t_far > 0.0) & (t_near > 1e-6)
        t_hit = np.where(hit & (t_near < t_hit), t_near, t_hit)

    points = np.empty((n, 4), dtype=np.float32)
    points[:, :3] = dirs * t_hit[:, None]
    points[:, 3] = np.clip(1.0 - t_hit / LIDAR_MAX_RANGE, 0.0, 1.0)
    return PointCloud(spec.sensor_id, step, points)


_camera_base_cache: dict[tuple[int, int], np.ndarray] = {}


def generate_camera(spec: SensorSpec, step: int, seed: int) -> ImageFrame:
    """Synthesize a deterministic RGB pattern: a diagonal gradient shifted
    per step. Exactly width*height*3 bytes."""
    key = (spec.width, spec.height)
    base = _camera_base_cache.get(key)
    if base is None:
        rows = np.arange(spec.height, dtype=np.uint32)[:, None] * 131
        cols = np.arange(spec.width * 3, dtype=np.uint32)[None, :] * 7
        base = ((rows + cols) & 0xFF).astype(np.uint8)
        _camera_base_cache[key] = base
    shift = np.uint8((seed * 31 + step * 13) & 0xFF)
    frame = base + shift  # uint8 wraparound is the intended texture scroll
    return ImageFrame(spec.sensor_id, step, spec.width, spec.height, frame.tobytes())


def make_imu(state: VehicleState, spec: SensorSpec, step: int) -> ImuSample:
    lateral = state.speed * state.yaw_rate  # centripetal, toward the turn side
    return ImuSample(
        sensor_id=spec.sensor_id,
        step=step,
        linear_accel=(state.accel, lateral, GRAVITY),
        angular_vel=(0.0, 0.0, state.yaw_rate),
        orientation=(math.cos(0.5 * state.yaw), 0.0, 0.0, math.sin(0.5 * state.yaw)),
    )


# Reference geodetic origin for the GNSS mock; the linearization only needs
# to be deterministic, not survey-grade.
_GNSS_ORIGIN = (49.0, 8.4, 115.0)
_METERS_PER_DEG_LAT = 111_320.0


def make_gnss(state: VehicleState, spec: SensorSpec, step: int) -> GnssFix:
    lat0, lon0, alt0 = _GNSS_ORIGIN
    lat = lat0 + state.x / _METERS_PER_DEG_LAT
    lon = lon0 + state.y / (_METERS_PER_DEG_LAT * math.cos(math.radians(lat0)))
    return GnssFix(spec.sensor_id, step, lat, lon, alt0)


def make_vehicle_status(state: VehicleState, spec: SensorSpec, step: int) -> VehicleStatus:
    return VehicleStatus(
        sensor_id=spec.sensor_id,
        step=step,
        position=(state.x, state.y, 0.0),
        orientation=(math.cos(0.5 * state.yaw), 0.0, 0.0, math.sin(0.5 * state.yaw)),
        velocity=state.speed,
        yaw_rate=state.yaw_rate,
        steering_tire_angle=state.tire_angle,
        accel=state.accel,
    )


# ---------------------------------------------------------------------------
# load model

def step_cost_us(model: LoadModel, kit: SensorKitConfig, dt: float) -> float:
    """Busy-work budget for one step under the given kit."""
    cost = model.base_step_cost_us
    for s in kit.sensors:
        if s.kind == "lidar":
            cost += lidar_point_count(s, dt) * model.cost_per_lidar_point_us
        elif s.kind == "camera":
            cost += s.width * s.height * model.cost_per_pixel_us
    return cost


def busy_wait(seconds: float) -> float:
    """Spin (not sleep) for `seconds`, emulating compute-bound work."""
    t0 = time.perf_counter()
    if seconds > 0:
        deadline = t0 + seconds
        while time.perf_counter() < deadline:
            pass
    return time.perf_counter() - t0


def apply_load(model: LoadModel, kit: SensorKitConfig, dt: float) -> float:
    """Burn the modeled per-step cost; returns the busy time in seconds."""
    return busy_wait(step_cost_us(model, kit, dt) / 1e6)


# ---------------------------------------------------------------------------
# lockstep server

@dataclass
class SimReport:
    steps: int = 0
    frames_sent: int = 0
    controls_applied: int = 0
    wall_s: float = 0.0
    session: str = "incomplete"
    error: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "steps": self.steps,
            "frames_sent": self.frames_sent,
            "controls_applied": self.controls_applied,
            "wall_s": self.wall_s,
            "session": self.session,
            "error": self.error,
        }


def _send_step_frames(
    conn: socket.socket,
    kit: SensorKitConfig,
    state: VehicleState,
    step: int,
    dt: float,
    seed: int,
) -> int:
    sent = 0
    for spec in kit.sensors:
        if spec.kind == "lidar":
            payload = pack_point_cloud(generate_lidar(state, spec, dt, step, seed))
            send_frame(conn, MsgType.POINT_CLOUD, step, payload)
        elif spec.kind == "camera":
            img = generate_camera(spec, step, seed)
            send_frame(conn, MsgType.IMAGE, step, pack_image(img))
        elif spec.kind == "imu":
            send_frame(conn, MsgType.IMU, step, pack_imu(make_imu(state, spec, step)))
        elif spec.kind == "gnss":
            send_frame(conn, MsgType.GNSS, step, pack_gnss(make_gnss(state, spec, step)))
        elif spec.kind == "vehicle_status":
            status = make_vehicle_status(state, spec, step)
            send_frame(conn, MsgType.VEHICLE_STATUS, step, pack_vehicle_status(status))
        sent += 1
    return sent


def run_sim_server(resolved: ResolvedScenario, report_path=None, stop_event=None) -> SimReport:
    """Serve one lockstep session: send step-0 frames, then advance exactly
    one step per TICK, applying the latest control and the load model."""
    sc = resolved.scenario
    report = SimReport()
    t_start = time.monotonic()
    wall_deadline = t_start + 120.0 + 10.0 * sc.duration_limit_s

    listener = socket.create_server((sc.endpoints.sim_host, sc.endpoints.sim_port))
    listener.settimeout(ACCEPT_TIMEOUT_S)
    conn = None
    try:
        try:
            conn, peer = listener.accept()
        except TimeoutError:
            report.session = "error"
            report.error = "no bridge connection arrived"
            return report
        tune_stream(conn)
        log.info("sim: bridge connected from %s", peer)
        reader = FrameReader(conn)

        state = VehicleState(x=sc.initial_pose.x, y=sc.initial_pose.y, yaw=sc.initial_pose.yaw)
        clock = SimClock(sc.fixed_dt)
        control = VehicleControl(step=0, throttle=0.0, brake=0.0, steer=0.0)

        report.frames_sent += _send_step_frames(conn, resolved.kit, state, clock.step, sc.fixed_dt, sc.seed)

        while True:
            if stop_event is not None and stop_event.is_set():
                report.session = "aborted"
                break
            if time.monotonic() > wall_deadline:
                report.session = "error"
                report.error = "wall-clock safety deadline exceeded"
                break
            try:
                frame = reader.read_frame(timeout=0.5)
            except TimeoutError:
                continue
            except ConnectionClosed:
                report.session = "connection_lost"
                break
            if frame is None:
                report.session = "connection_lost"
                break
            if frame.msg_type is MsgType.VEHICLE_CONTROL:
                control = unpack_vehicle_control(frame.step, frame.payload)
                report.controls_applied += 1
            elif frame.msg_type is MsgType.TICK:
                if frame.step != clock.step + 1:
                    raise OrderingError(f"tick for step {frame.step} while simulator is at {clock.step}")
                state = step_vehicle(state, control, resolved.vehicle, sc.fixed_dt)
                clock.tick()
                report.steps = clock.step
                apply_load(sc.load_model, resolved.kit, sc.fixed_dt)
                report.frames_sent += _send_step_frames(
                    conn, resolved.kit, state, clock.step, sc.fixed_dt, sc.seed
                )
            elif frame.msg_type is MsgType.SESSION_END:
                report.session = "completed"
                break
            else:
                log.warning("sim: ignoring unexpected %s frame", frame.msg_type.name)
    except Exception as e:  # noqa: BLE001 - report and re-raise for the runner
        report.session = "error"
        report.error = f"{type(e).__name__}: {e}"
        raise
    finally:
        report.wall_s = time.monotonic() - t_start
        if conn is not None:
            conn.close()
        listener.close()
        if report_path is not None:
            with open(report_path, "w") as f:
                json.dump(report.to_dict(), f, indent=2)
    return report
