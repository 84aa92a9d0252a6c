"""Conversions between the simulator's left-handed frame and the AV's
right-handed frame, plus topic remapping.

Both worlds put x forward and z up; they disagree on y (simulator: right,
AV: left). The change of basis is the reflection M = diag(1, -1, 1):

  * points and polar vectors map componentwise, (x, y, z) -> (x, -y, z)
  * rotations conjugate, which on unit quaternions (w, x, y, z) lands on
    (w, -x, y, -z)
  * axial vectors (angular rates) pick up the orientation flip on top of
    the reflection: (x, y, z) -> (-x, y, -z)

The quaternion map is a homomorphism (it distributes over composition), so
converting an orientation trajectory commutes with integrating converted
body rates; tests lean on that.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from .messages import ImuSample, Odometry, PointCloud, Quat, SteeringReport, Vec3, VehicleStatus, VelocityReport

QUAT_UNIT_TOL = 1e-6


class UnmappedTopicError(KeyError):
    """A source topic has no routing entry. Never passed through silently."""


def lh_to_rh_point(p: Vec3) -> Vec3:
    x, y, z = p
    return (x, -y, z)


def lh_to_rh_angular(v: Vec3) -> Vec3:
    x, y, z = v
    return (-x, y, -z)


def lh_to_rh_quaternion(q: Quat) -> Quat:
    w, x, y, z = q
    norm = math.sqrt(w * w + x * x + y * y + z * z)
    if abs(norm - 1.0) > QUAT_UNIT_TOL:
        raise ValueError(f"quaternion norm {norm} deviates from 1 beyond {QUAT_UNIT_TOL}")
    return (w, -x, y, -z)


def convert_pointcloud(pc: PointCloud) -> PointCloud:
    """Negate the y column; count, intensity, id, and step survive untouched."""
    pts = np.array(pc.points, dtype=np.float32, copy=True)
    pts[:, 1] = -pts[:, 1]
    return PointCloud(pc.sensor_id, pc.step, pts)


def convert_imu(s: ImuSample) -> ImuSample:
    return ImuSample(
        sensor_id=s.sensor_id,
        step=s.step,
        linear_accel=lh_to_rh_point(s.linear_accel),
        angular_vel=lh_to_rh_angular(s.angular_vel),
        orientation=lh_to_rh_quaternion(s.orientation),
    )


def convert_vehicle_status(st: VehicleStatus) -> VehicleStatus:
    """Re-express the ego status in the right-handed frame.

    Yaw rate and steering tire angle are rotations about +z, so both flip
    sign; longitudinal scalars (speed, accel) are frame-independent.
    """
    return VehicleStatus(
        sensor_id=st.sensor_id,
        step=st.step,
        position=lh_to_rh_point(st.position),
        orientation=lh_to_rh_quaternion(st.orientation),
        velocity=st.velocity,
        yaw_rate=-st.yaw_rate,
        steering_tire_angle=-st.steering_tire_angle,
        accel=st.accel,
    )


def split_vehicle_status(st: VehicleStatus) -> Tuple[SteeringReport, VelocityReport]:
    """Copy status fields into the two report messages. No math, no loss."""
    steering = SteeringReport(step=st.step, steering_tire_angle=st.steering_tire_angle)
    velocity = VelocityReport(
        step=st.step,
        longitudinal_velocity=st.velocity,
        heading_rate=st.yaw_rate,
    )
    return steering, velocity


def compose_odometry(st: VehicleStatus) -> Odometry:
    """Summarize pose and twist into one message. Twist is body-frame; the
    kinematic model has no sideslip, so linear velocity is purely forward."""
    return Odometry(
        step=st.step,
        position=st.position,
        orientation=st.orientation,
        linear_vel=(st.velocity, 0.0, 0.0),
        angular_vel=(0.0, 0.0, st.yaw_rate),
    )


# ---------------------------------------------------------------------------
# quaternion utilities shared by the mock endpoints

def quat_from_yaw(yaw: float) -> Quat:
    h = 0.5 * yaw
    return (math.cos(h), 0.0, 0.0, math.sin(h))


def quat_to_yaw(q: Quat) -> float:
    w, x, y, z = q
    return math.atan2(2.0 * (w * z + x * y), 1.0 - 2.0 * (y * y + z * z))


def quat_multiply(a: Quat, b: Quat) -> Quat:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return (
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    )


def quat_from_axis_angle(axis: Vec3, angle: float) -> Quat:
    ax, ay, az = axis
    n = math.sqrt(ax * ax + ay * ay + az * az)
    if n == 0.0:
        return (1.0, 0.0, 0.0, 0.0)
    s = math.sin(0.5 * angle) / n
    return (math.cos(0.5 * angle), ax * s, ay * s, az * s)


# ---------------------------------------------------------------------------
# topic routing

SPLIT_PREFIX = "split:"

DELIVERY_CLASSES = ("reliable", "best_effort")


@dataclass(frozen=True)
class TopicRule:
    source: str
    destination: str
    delivery: str
    # populated only for split destinations: logical output -> topic
    split_outputs: Optional[Dict[str, str]] = None

    @property
    def is_split(self) -> bool:
        return self.destination.startswith(SPLIT_PREFIX)


@dataclass(frozen=True)
class TopicMap:
    """Ordered source -> destination routing. Delivery class is metadata
    that rides into latency reports; it does not change transport behavior."""

    rules: Tuple[TopicRule, ...]

    def __post_init__(self):
        object.__setattr__(self, "_by_source", {r.source: r for r in self.rules})

    def lookup(self, source: str) -> TopicRule:
        try:
            return self._by_source[source]
        except KeyError:
            raise UnmappedTopicError(f"no routing entry for source topic {source!r}") from None

    def sources(self) -> Tuple[str, ...]:
        return tuple(r.source for r in self.rules)


def remap(topic_map: TopicMap, source_name: str) -> Tuple[str, str]:
    """Resolve a source topic. Returns (destination, delivery_class);
    raises UnmappedTopicError for anything the map does not know."""
    rule = topic_map.lookup(source_name)
    return rule.destination, rule.delivery
