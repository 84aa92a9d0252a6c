"""Payload codecs: round-trips, size cross-checks, and typed failures."""

import numpy as np
import pytest

from simbridge.messages import (
    AckermannCommand,
    GnssFix,
    ImageFrame,
    ImuSample,
    Odometry,
    PointCloud,
    SteeringReport,
    VehicleControl,
    VehicleStatus,
    VelocityReport,
    pack_ackermann,
    pack_gnss,
    pack_image,
    pack_imu,
    pack_odometry,
    pack_point_cloud,
    pack_steering_report,
    pack_topic_prefix,
    pack_vehicle_control,
    pack_vehicle_status,
    pack_velocity_report,
    split_topic,
    unpack_ackermann,
    unpack_gnss,
    unpack_image,
    unpack_imu,
    unpack_odometry,
    unpack_point_cloud,
    unpack_steering_report,
    unpack_vehicle_control,
    unpack_vehicle_status,
    unpack_velocity_report,
)
from simbridge.protocol import MalformedPayload


def test_point_cloud_roundtrip():
    pts = np.arange(20, dtype=np.float32).reshape(5, 4)
    out = unpack_point_cloud(3, pack_point_cloud(PointCloud("lidar_top", 3, pts)))
    assert out.sensor_id == "lidar_top"
    assert out.step == 3
    assert out.count == 5
    np.testing.assert_array_equal(out.points, pts)


def test_point_cloud_empty_is_legal():
    pts = np.empty((0, 4), dtype=np.float32)
    assert unpack_point_cloud(0, pack_point_cloud(PointCloud("l", 0, pts))).count == 0


def test_point_cloud_count_vs_bytes_cross_check():
    raw = bytearray(pack_point_cloud(PointCloud("l", 0, np.zeros((2, 4), np.float32))))
    raw[3] = 7  # count field now lies about the body size
    with pytest.raises(MalformedPayload):
        unpack_point_cloud(0, bytes(raw))


def test_point_cloud_wrong_shape_rejected_at_pack():
    with pytest.raises(MalformedPayload):
        pack_point_cloud(PointCloud("l", 0, np.zeros((4, 3), np.float32)))


def test_image_roundtrip_and_size_checks():
    img = ImageFrame("cam", 2, 4, 2, bytes(range(24)))
    out = unpack_image(2, pack_image(img))
    assert (out.width, out.height, out.data) == (4, 2, img.data)
    with pytest.raises(MalformedPayload):
        pack_image(ImageFrame("cam", 2, 4, 2, b"short"))
    raw = bytearray(pack_image(img))
    raw[-24 - 8 + 1] = 9  # corrupt the width field
    with pytest.raises(MalformedPayload):
        unpack_image(2, bytes(raw))


def test_imu_roundtrip_preserves_negative_values():
    s = ImuSample("imu", 7, (-1.5, 2.5, -9.81), (0.1, -0.2, 0.3), (0.9, -0.1, 0.2, -0.4))
    assert unpack_imu(7, pack_imu(s)) == s


def test_gnss_roundtrip():
    g = GnssFix("gnss", 1, 49.0001, 8.3999, 115.0)
    assert unpack_gnss(1, pack_gnss(g)) == g


def test_vehicle_status_roundtrip():
    st = VehicleStatus("vehicle_status", 9, (10.0, -2.0, 0.0), (0.99, 0.0, 0.0, 0.14),
                       velocity=8.33, yaw_rate=-0.2, steering_tire_angle=0.05, accel=0.3)
    assert unpack_vehicle_status(9, pack_vehicle_status(st)) == st


def test_report_roundtrips():
    assert unpack_steering_report(4, pack_steering_report(SteeringReport(4, -0.3))) == SteeringReport(4, -0.3)
    v = VelocityReport(4, 8.33, 0.01)
    assert unpack_velocity_report(4, pack_velocity_report(v)) == v
    o = Odometry(4, (1, 2, 0), (1, 0, 0, 0), (8.33, 0, 0), (0, 0, 0.01))
    back = unpack_odometry(4, pack_odometry(o))
    assert back.position == (1.0, 2.0, 0.0)
    assert back.linear_vel == (8.33, 0.0, 0.0)


def test_ackermann_roundtrip():
    cmd = AckermannCommand(11, 8.33, 0.5, -0.2)
    assert unpack_ackermann(11, pack_ackermann(cmd)) == cmd


def test_truncated_payloads_raise_malformed():
    for packed, unpack in (
        (pack_imu(ImuSample("i", 0, (0, 0, 0), (0, 0, 0), (1, 0, 0, 0))), unpack_imu),
        (pack_gnss(GnssFix("g", 0, 0, 0, 0)), unpack_gnss),
        (pack_ackermann(AckermannCommand(0, 0, 0, 0)), unpack_ackermann),
        (pack_odometry(Odometry(0, (0, 0, 0), (1, 0, 0, 0), (0, 0, 0), (0, 0, 0))), unpack_odometry),
    ):
        with pytest.raises(MalformedPayload):
            unpack(0, packed[:-1])


def test_non_utf8_sensor_id_rejected():
    raw = bytearray(pack_gnss(GnssFix("gg", 0, 0, 0, 0)))
    raw[2:4] = b"\xff\xfe"
    with pytest.raises(MalformedPayload):
        unpack_gnss(0, bytes(raw))


# ---------------------------------------------------------------------------
# actuator command validation

def test_vehicle_control_bounds():
    VehicleControl(0, throttle=1.0, brake=0.0, steer=-1.0)  # boundaries are legal
    VehicleControl(0, throttle=0.0, brake=1.0, steer=1.0)
    with pytest.raises(ValueError):
        VehicleControl(0, throttle=1.1, brake=0.0, steer=0.0)
    with pytest.raises(ValueError):
        VehicleControl(0, throttle=0.0, brake=-0.1, steer=0.0)
    with pytest.raises(ValueError):
        VehicleControl(0, throttle=0.0, brake=0.0, steer=1.5)


def test_throttle_and_brake_never_fight():
    with pytest.raises(ValueError):
        VehicleControl(0, throttle=0.2, brake=0.2, steer=0.0)


def test_vehicle_control_roundtrip():
    c = VehicleControl(5, throttle=0.4, brake=0.0, steer=-0.25)
    assert unpack_vehicle_control(5, pack_vehicle_control(c)) == c


# ---------------------------------------------------------------------------
# topic envelope

def test_topic_envelope_roundtrip():
    inner = b"\x01\x02payload"
    framed = pack_topic_prefix("av/sensing/lidar/top") + inner
    topic, rest = split_topic(framed)
    assert topic == "av/sensing/lidar/top"
    assert bytes(rest) == inner


def test_topic_envelope_truncation():
    with pytest.raises(MalformedPayload):
        split_topic(b"\x10")  # prefix promises 16 bytes, body has none
