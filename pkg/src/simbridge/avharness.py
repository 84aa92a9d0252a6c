"""Mock AV stack: a pure-pursuit route follower that consumes the bridge's
converted messages and answers each completed step with one Ackermann
command.

Everything here lives in the right-handed frame (x forward, y left, z up,
yaw counterclockwise-positive). Positive lateral deviation means left of
the travel direction.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .config import ResolvedScenario, RouteSpec, VehicleParameters
from .convert import quat_to_yaw
from .messages import (
    AckermannCommand,
    Odometry,
    VelocityReport,
    pack_ackermann,
    split_topic,
    unpack_odometry,
    unpack_velocity_report,
)
from .protocol import ConnectionClosed, FrameReader, MsgType, dial, encode_frame, send_frame

log = logging.getLogger(__name__)

# Pure-pursuit lookahead: distance scales with speed between fixed bounds.
LOOKAHEAD_GAIN_S = 0.8
LOOKAHEAD_MIN_M = 3.0
LOOKAHEAD_MAX_M = 15.0
# Preview window and lateral-acceleration budget for slowing into curves.
SPEED_PREVIEW_M = 15.0
LAT_ACCEL_MAX = 2.0

CONNECT_DEADLINE_S = 30.0


def wrap_angle(a: float) -> float:
    return math.atan2(math.sin(a), math.cos(a))


class Route:
    """A polyline centerline with projection, interpolation, and a
    per-vertex curvature estimate."""

    def __init__(self, spec: RouteSpec):
        self.spec = spec
        self.pts = np.asarray(spec.centerline, dtype=float)
        self.lane_half_width = spec.lane_half_width
        self.target_speed = spec.target_speed
        self.goal_tolerance = spec.goal_tolerance

        seg = np.diff(self.pts, axis=0)
        self.seg_len = np.hypot(seg[:, 0], seg[:, 1])
        self.seg_dir = seg / self.seg_len[:, None]
        self.cum_s = np.concatenate([[0.0], np.cumsum(self.seg_len)])
        self.length = float(self.cum_s[-1])

        # Curvature at interior vertices: turn angle over the mean of the
        # adjacent segment lengths.
        if len(self.pts) > 2:
            d0, d1 = self.seg_dir[:-1], self.seg_dir[1:]
            cross = d0[:, 0] * d1[:, 1] - d0[:, 1] * d1[:, 0]
            dot = np.einsum("ij,ij->i", d0, d1)
            turn = np.abs(np.arctan2(cross, dot))
            span = 0.5 * (self.seg_len[:-1] + self.seg_len[1:])
            self.vertex_s = self.cum_s[1:-1]
            self.vertex_curvature = turn / span
        else:
            self.vertex_s = np.empty(0)
            self.vertex_curvature = np.empty(0)

    @property
    def goal(self) -> Tuple[float, float]:
        return float(self.pts[-1, 0]), float(self.pts[-1, 1])

    def project(self, x: float, y: float) -> Tuple[float, float]:
        """Nearest point on the centerline. Returns (arc_position, signed
        lateral deviation); positive deviation is left of travel."""
        p = np.array([x, y])
        rel = p - self.pts[:-1]
        seg = self.pts[1:] - self.pts[:-1]
        t = np.clip(np.einsum("ij,ij->i", rel, seg) / (self.seg_len**2), 0.0, 1.0)
        proj = self.pts[:-1] + t[:, None] * seg
        d2 = np.einsum("ij,ij->i", p - proj, p - proj)
        i = int(np.argmin(d2))
        s = float(self.cum_s[i] + t[i] * self.seg_len[i])
        cross = self.seg_dir[i, 0] * (y - proj[i, 1]) - self.seg_dir[i, 1] * (x - proj[i, 0])
        return s, math.copysign(math.sqrt(d2[i]), cross)

    def point_at(self, s: float) -> Tuple[float, float]:
        s = min(max(s, 0.0), self.length)
        x = float(np.interp(s, self.cum_s, self.pts[:, 0]))
        y = float(np.interp(s, self.cum_s, self.pts[:, 1]))
        return x, y

    def max_curvature_ahead(self, s: float, window: float) -> float:
        if self.vertex_s.size == 0:
            return 0.0
        lo = np.searchsorted(self.vertex_s, s)
        hi = np.searchsorted(self.vertex_s, s + window, side="right")
        if lo >= hi:
            return 0.0
        return float(np.max(self.vertex_curvature[lo:hi]))


def lateral_deviation(route: Route, x: float, y: float) -> float:
    return route.project(x, y)[1]


def follow_route(
    route: Route,
    x: float,
    y: float,
    yaw: float,
    speed: float,
    vehicle: VehicleParameters,
) -> Tuple[float, float]:
    """Pure pursuit. Returns (tire_angle, target_speed); the tire angle is
    counterclockwise-positive and clamped to the vehicle's limit, the target
    speed is the route speed capped by the curvature preview."""
    s, _ = route.project(x, y)
    lookahead = min(max(LOOKAHEAD_GAIN_S * speed, LOOKAHEAD_MIN_M), LOOKAHEAD_MAX_M)
    tx, ty = route.point_at(s + lookahead)
    alpha = wrap_angle(math.atan2(ty - y, tx - x) - yaw)
    tire = math.atan(2.0 * vehicle.wheelbase * math.sin(alpha) / lookahead)
    tire = max(-vehicle.max_tire_angle, min(vehicle.max_tire_angle, tire))

    kappa = route.max_curvature_ahead(s, SPEED_PREVIEW_M)
    target = route.target_speed
    if kappa > 1e-9:
        target = min(target, math.sqrt(LAT_ACCEL_MAX / kappa))
    return tire, target


# ---------------------------------------------------------------------------
# trace and session

@dataclass
class DeviationTrace:
    """Per-step (sim_time, lateral deviation, speed) samples."""

    samples: List[Tuple[float, float, float]] = field(default_factory=list)

    def append(self, sim_time: float, deviation: float, speed: float) -> None:
        self.samples.append((sim_time, deviation, speed))

    def max_abs_deviation(self) -> float:
        return max((abs(d) for _, d, _ in self.samples), default=0.0)

    def write_csv(self, path) -> None:
        with open(path, "w") as f:
            f.write("sim_time,deviation,speed\n")
            for t, d, v in self.samples:
                f.write(f"{t!r},{d!r},{v!r}\n")


@dataclass
class AvReport:
    verdict: str = "error"
    reason: str = ""
    steps_commanded: int = 0
    max_abs_deviation: float = 0.0
    final_speed: float = 0.0

    def to_dict(self) -> dict:
        return {
            "verdict": self.verdict,
            "reason": self.reason,
            "steps_commanded": self.steps_commanded,
            "max_abs_deviation": self.max_abs_deviation,
            "final_speed": self.final_speed,
        }


def run_av_client(
    resolved: ResolvedScenario,
    report_path=None,
    trace_path=None,
    stop_event=None,
) -> Tuple[AvReport, DeviationTrace]:
    """Drive the route until goal, lane departure, or the sim-time limit.

    One AckermannCommand per STEP_COMPLETE; the verdict sample is still
    recorded in the trace before the session closes.
    """
    sc = resolved.scenario
    route = Route(resolved.route)
    report = AvReport()
    trace = DeviationTrace()
    t_start = time.monotonic()
    wall_deadline = t_start + 120.0 + 10.0 * sc.duration_limit_s

    odom: Optional[Odometry] = None
    velocity: Optional[VelocityReport] = None
    goal_x, goal_y = route.goal

    sock = dial(sc.endpoints.av_host, sc.endpoints.av_port, CONNECT_DEADLINE_S)
    reader = FrameReader(sock)
    try:
        while report.verdict == "error":
            if stop_event is not None and stop_event.is_set():
                report.reason = "aborted by supervisor"
                break
            if time.monotonic() > wall_deadline:
                report.reason = "wall-clock safety deadline exceeded"
                break
            try:
                frame = reader.read_frame(timeout=0.5)
            except TimeoutError:
                continue
            except ConnectionClosed:
                report.reason = "bridge connection lost"
                break
            if frame is None or frame.msg_type is MsgType.SESSION_END:
                report.reason = "session ended upstream"
                break

            if frame.msg_type is MsgType.ODOMETRY:
                _, inner = split_topic(frame.payload)
                odom = unpack_odometry(frame.step, inner)
            elif frame.msg_type is MsgType.VELOCITY_REPORT:
                _, inner = split_topic(frame.payload)
                velocity = unpack_velocity_report(frame.step, inner)
            elif frame.msg_type is MsgType.STEP_COMPLETE:
                step = frame.step
                if odom is None or velocity is None or odom.step != step:
                    report.reason = f"step {step} completed without current odometry"
                    break
                x, y, _ = odom.position
                yaw = quat_to_yaw(odom.orientation)
                speed = velocity.longitudinal_velocity
                sim_time = step * sc.fixed_dt
                _, deviation = route.project(x, y)
                trace.append(sim_time, deviation, speed)
                report.final_speed = speed

                if math.hypot(x - goal_x, y - goal_y) <= route.goal_tolerance:
                    report.verdict = "goal-reached"
                    report.reason = f"within {route.goal_tolerance} m of goal at t={sim_time:.2f}s"
                elif abs(deviation) > route.lane_half_width:
                    report.verdict = "lane-departure"
                    report.reason = f"|deviation| {abs(deviation):.2f} m exceeds {route.lane_half_width} m at t={sim_time:.2f}s"
                elif sim_time >= sc.duration_limit_s:
                    report.verdict = "timeout"
                    report.reason = f"duration limit {sc.duration_limit_s}s reached"
                else:
                    tire, target = follow_route(route, x, y, yaw, speed, resolved.vehicle)
                    cmd = AckermannCommand(step=step, target_speed=target, target_accel=0.0, tire_angle=tire)
                    send_frame(sock, MsgType.ACKERMANN_CMD, step, pack_ackermann(cmd))
                    report.steps_commanded += 1
            # Other converted sensor topics are drained but unused here.
        try:
            sock.sendall(encode_frame(MsgType.SESSION_END, 0))
        except OSError:
            pass
    finally:
        sock.close()
        report.max_abs_deviation = trace.max_abs_deviation()
        if trace_path is not None:
            trace.write_csv(trace_path)
        if report_path is not None:
            with open(report_path, "w") as f:
                json.dump(report.to_dict(), f, indent=2)
    return report, trace
