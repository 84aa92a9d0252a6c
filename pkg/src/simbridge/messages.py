"""Payload layouts for each frame type.

The frame header (module protocol) carries type, step, and length; this
module packs and unpacks what goes inside. Strings are u16-length-prefixed
UTF-8, floats are little-endian, point clouds are raw float32 quadruplets.

Frames forwarded from the bridge to the AV additionally carry a topic
envelope (destination topic string) in front of the payload so routing is
observable end to end; the inner payload bytes are untouched by the
envelope.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .protocol import MalformedPayload

Vec3 = Tuple[float, float, float]
Quat = Tuple[float, float, float, float]  # w, x, y, z

_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_F64 = struct.Struct("<d")


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise MalformedPayload(f"string of {len(raw)} bytes exceeds u16 length prefix")
    return _U16.pack(len(raw)) + raw


def _unpack_str(buf, offset: int) -> tuple[str, int]:
    if len(buf) - offset < 2:
        raise MalformedPayload("string length prefix truncated")
    (n,) = _U16.unpack_from(buf, offset)
    offset += 2
    if len(buf) - offset < n:
        raise MalformedPayload("string body truncated")
    try:
        s = bytes(buf[offset : offset + n]).decode("utf-8")
    except UnicodeDecodeError as e:
        raise MalformedPayload(f"string is not valid UTF-8: {e}") from None
    return s, offset + n


def _unpack_struct(st: struct.Struct, buf, offset: int):
    if len(buf) - offset < st.size:
        raise MalformedPayload(f"payload truncated: need {st.size} bytes at offset {offset}")
    return st.unpack_from(buf, offset), offset + st.size


# ---------------------------------------------------------------------------
# sensor data (simulator side, left-handed unless converted)

@dataclass(frozen=True, eq=False)
class PointCloud:
    sensor_id: str
    step: int
    points: np.ndarray  # (count, 4) float32: x, y, z, intensity

    @property
    def count(self) -> int:
        return self.points.shape[0]


def pack_point_cloud(pc: PointCloud) -> bytes:
    pts = np.ascontiguousarray(pc.points, dtype="<f4")
    if pts.ndim != 2 or pts.shape[1] != 4:
        raise MalformedPayload(f"point array must be (n, 4), got {pts.shape}")
    return _pack_str(pc.sensor_id) + _U32.pack(pts.shape[0]) + pts.tobytes()


def unpack_point_cloud(step: int, payload) -> PointCloud:
    sensor_id, off = _unpack_str(payload, 0)
    (count,), off = _unpack_struct(_U32, payload, off)
    body = len(payload) - off
    if body != count * 16:
        raise MalformedPayload(f"point cloud declares {count} points but carries {body} bytes")
    pts = np.frombuffer(payload, dtype="<f4", count=count * 4, offset=off).reshape(count, 4)
    return PointCloud(sensor_id, step, pts)


@dataclass(frozen=True, eq=False)
class ImageFrame:
    sensor_id: str
    step: int
    width: int
    height: int
    data: bytes  # row-major RGB, width*height*3 bytes

    @property
    def nbytes(self) -> int:
        return len(self.data)


_IMAGE_DIMS = struct.Struct("<II")


def pack_image(img: ImageFrame) -> bytes:
    if len(img.data) != img.width * img.height * 3:
        raise MalformedPayload(
            f"image {img.width}x{img.height} needs {img.width * img.height * 3} bytes, got {len(img.data)}"
        )
    return _pack_str(img.sensor_id) + _IMAGE_DIMS.pack(img.width, img.height) + img.data


def unpack_image(step: int, payload) -> ImageFrame:
    sensor_id, off = _unpack_str(payload, 0)
    (w, h), off = _unpack_struct(_IMAGE_DIMS, payload, off)
    body = len(payload) - off
    if body != w * h * 3:
        raise MalformedPayload(f"image {w}x{h} should carry {w * h * 3} bytes, got {body}")
    return ImageFrame(sensor_id, step, w, h, bytes(payload[off:]))


@dataclass(frozen=True)
class ImuSample:
    sensor_id: str
    step: int
    linear_accel: Vec3
    angular_vel: Vec3
    orientation: Quat


_IMU_BODY = struct.Struct("<10d")


def pack_imu(s: ImuSample) -> bytes:
    return _pack_str(s.sensor_id) + _IMU_BODY.pack(*s.linear_accel, *s.angular_vel, *s.orientation)


def unpack_imu(step: int, payload) -> ImuSample:
    sensor_id, off = _unpack_str(payload, 0)
    vals, off = _unpack_struct(_IMU_BODY, payload, off)
    return ImuSample(sensor_id, step, tuple(vals[0:3]), tuple(vals[3:6]), tuple(vals[6:10]))


@dataclass(frozen=True)
class GnssFix:
    sensor_id: str
    step: int
    lat: float
    lon: float
    alt: float


_GNSS_BODY = struct.Struct("<3d")


def pack_gnss(g: GnssFix) -> bytes:
    return _pack_str(g.sensor_id) + _GNSS_BODY.pack(g.lat, g.lon, g.alt)


def unpack_gnss(step: int, payload) -> GnssFix:
    sensor_id, off = _unpack_str(payload, 0)
    (lat, lon, alt), off = _unpack_struct(_GNSS_BODY, payload, off)
    return GnssFix(sensor_id, step, lat, lon, alt)


@dataclass(frozen=True)
class VehicleStatus:
    """Ground-truth ego state as the simulator reports it.

    Carries pose and yaw rate alongside the drive state so the bridge can
    split it into steering/velocity reports and compose odometry without
    joining data across sensors.
    """

    sensor_id: str
    step: int
    position: Vec3
    orientation: Quat
    velocity: float             # longitudinal, m/s
    yaw_rate: float             # rad/s about +z
    steering_tire_angle: float  # rad
    accel: float                # longitudinal, m/s^2


_STATUS_BODY = struct.Struct("<11d")


def pack_vehicle_status(st: VehicleStatus) -> bytes:
    return _pack_str(st.sensor_id) + _STATUS_BODY.pack(
        *st.position, *st.orientation, st.velocity, st.yaw_rate, st.steering_tire_angle, st.accel
    )


def unpack_vehicle_status(step: int, payload) -> VehicleStatus:
    sensor_id, off = _unpack_str(payload, 0)
    v, off = _unpack_struct(_STATUS_BODY, payload, off)
    return VehicleStatus(sensor_id, step, tuple(v[0:3]), tuple(v[3:7]), v[7], v[8], v[9], v[10])


# ---------------------------------------------------------------------------
# AV-side reports (right-handed)

@dataclass(frozen=True)
class SteeringReport:
    step: int
    steering_tire_angle: float


def pack_steering_report(r: SteeringReport) -> bytes:
    return _F64.pack(r.steering_tire_angle)


def unpack_steering_report(step: int, payload) -> SteeringReport:
    (angle,), _ = _unpack_struct(_F64, payload, 0)
    return SteeringReport(step, angle)


@dataclass(frozen=True)
class VelocityReport:
    step: int
    longitudinal_velocity: float
    heading_rate: float


_VELOCITY_BODY = struct.Struct("<2d")


def pack_velocity_report(r: VelocityReport) -> bytes:
    return _VELOCITY_BODY.pack(r.longitudinal_velocity, r.heading_rate)


def unpack_velocity_report(step: int, payload) -> VelocityReport:
    (v, hr), _ = _unpack_struct(_VELOCITY_BODY, payload, 0)
    return VelocityReport(step, v, hr)


@dataclass(frozen=True)
class Odometry:
    """Pose and twist in one message."""

    step: int
    position: Vec3
    orientation: Quat
    linear_vel: Vec3   # body frame
    angular_vel: Vec3  # body frame


_ODOM_BODY = struct.Struct("<13d")


def pack_odometry(o: Odometry) -> bytes:
    return _ODOM_BODY.pack(*o.position, *o.orientation, *o.linear_vel, *o.angular_vel)


def unpack_odometry(step: int, payload) -> Odometry:
    v, _ = _unpack_struct(_ODOM_BODY, payload, 0)
    return Odometry(step, tuple(v[0:3]), tuple(v[3:7]), tuple(v[7:10]), tuple(v[10:13]))


# ---------------------------------------------------------------------------
# control path

@dataclass(frozen=True)
class AckermannCommand:
    step: int
    target_speed: float  # m/s
    target_accel: float  # m/s^2, feed-forward hint only
    tire_angle: float    # rad, counterclockwise-positive


_ACKERMANN_BODY = struct.Struct("<3d")


def pack_ackermann(cmd: AckermannCommand) -> bytes:
    return _ACKERMANN_BODY.pack(cmd.target_speed, cmd.target_accel, cmd.tire_angle)


def unpack_ackermann(step: int, payload) -> AckermannCommand:
    (v, a, ang), _ = _unpack_struct(_ACKERMANN_BODY, payload, 0)
    return AckermannCommand(step, v, a, ang)


@dataclass(frozen=True)
class VehicleControl:
    """Normalized actuator command. Throttle and brake never fight."""

    step: int
    throttle: float  # [0, 1]
    brake: float     # [0, 1]
    steer: float     # [-1, 1]

    def __post_init__(self):
        if not (0.0 <= self.throttle <= 1.0):
            raise ValueError(f"throttle {self.throttle} outside [0, 1]")
        if not (0.0 <= self.brake <= 1.0):
            raise ValueError(f"brake {self.brake} outside [0, 1]")
        if not (-1.0 <= self.steer <= 1.0):
            raise ValueError(f"steer {self.steer} outside [-1, 1]")
        if self.throttle * self.brake != 0.0:
            raise ValueError(f"throttle {self.throttle} and brake {self.brake} both engaged")


_CONTROL_BODY = struct.Struct("<3d")


def pack_vehicle_control(c: VehicleControl) -> bytes:
    return _CONTROL_BODY.pack(c.throttle, c.brake, c.steer)


def unpack_vehicle_control(step: int, payload) -> VehicleControl:
    (t, b, s), _ = _unpack_struct(_CONTROL_BODY, payload, 0)
    return VehicleControl(step, t, b, s)


# ---------------------------------------------------------------------------
# topic envelope for bridge -> AV data frames

def pack_topic_prefix(topic: str) -> bytes:
    return _pack_str(topic)


def split_topic(payload) -> tuple[str, memoryview]:
    """Split an enveloped payload into (topic, inner_payload_view)."""
    topic, off = _unpack_str(payload, 0)
    return topic, memoryview(payload)[off:]
