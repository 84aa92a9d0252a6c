"""The bridge runtime.

Sits between the simulator (TCP client side) and the AV stack (TCP server
side) and runs the lockstep cycle:

  1. collect every expected sensor frame for the current step, converting
     and forwarding each one as it arrives;
  2. when the tick ledger completes the set, notify the AV (STEP_COMPLETE)
     and wait for its Ackermann command;
  3. translate the command into an actuator command, send it to the
     simulator, and grant the next step (TICK).

Ingress is stamped when a frame has been read off the simulator socket,
egress when its converted form has been written toward the AV; the pairs
feed the latency log. Tick wall times feed the frame-rate counter.
"""

from __future__ import annotations

import json
import logging
import socket
import time
from dataclasses import dataclass, field
from typing import Optional

from . import control as ctl
from .bench import LatencyTap
from .config import ResolvedScenario, source_topic
from .convert import (
    SPLIT_PREFIX,
    compose_odometry,
    convert_imu,
    convert_pointcloud,
    convert_vehicle_status,
    split_vehicle_status,
)
from .messages import (
    VehicleStatus,
    pack_imu,
    pack_odometry,
    pack_point_cloud,
    pack_steering_report,
    pack_topic_prefix,
    pack_vehicle_control,
    pack_velocity_report,
    unpack_ackermann,
    unpack_imu,
    unpack_point_cloud,
    unpack_vehicle_status,
    _unpack_str,
)
from .protocol import (
    ConnectionClosed,
    FrameReader,
    MsgType,
    TickDecision,
    TimeoutReport,
    WireFrame,
    await_step_or_timeout,
    dial,
    encode_frame,
    register_expected,
    send_frame,
    tune_stream,
)

log = logging.getLogger(__name__)

ACCEPT_TIMEOUT_S = 30.0
SEQUENCE_LOG_CAP = 250_000

_SENSOR_FRAME_TYPES = (
    MsgType.POINT_CLOUD,
    MsgType.IMAGE,
    MsgType.IMU,
    MsgType.GNSS,
    MsgType.VEHICLE_STATUS,
)


@dataclass
class BridgeReport:
    ticks: int = 0
    frames_in: int = 0
    frames_forwarded: int = 0
    stale_frames: int = 0
    unknown_frames: int = 0
    session: str = "incomplete"
    error: Optional[str] = None
    timeout_missing: tuple = ()
    wall_s: float = 0.0
    tick_times: list = field(default_factory=list)
    sequence_log: list = field(default_factory=list)
    latency_records: list = field(default_factory=list)
    orphan_egress: int = 0
    unpaired_ingress: int = 0

    def to_dict(self) -> dict:
        return {
            "ticks": self.ticks,
            "frames_in": self.frames_in,
            "frames_forwarded": self.frames_forwarded,
            "stale_frames": self.stale_frames,
            "unknown_frames": self.unknown_frames,
            "session": self.session,
            "error": self.error,
            "timeout_missing": list(self.timeout_missing),
            "wall_s": self.wall_s,
            "tick_times": self.tick_times,
            "sequence_log": self.sequence_log,
            "latency_records": self.latency_records,
            "orphan_egress": self.orphan_egress,
            "unpaired_ingress": self.unpaired_ingress,
        }


class _SessionOver(Exception):
    """Internal unwind for clean or dirty session termination."""

    def __init__(self, session: str, error: Optional[str] = None):
        super().__init__(error or session)
        self.session = session
        self.error = error


class BridgeSession:
    def __init__(self, resolved: ResolvedScenario, stop_event=None):
        self.resolved = resolved
        self.sc = resolved.scenario
        self.stop_event = stop_event
        self.report = BridgeReport()
        self.tap = LatencyTap()
        self._msg_seq = 0
        self._pending: dict[str, tuple[WireFrame, int]] = {}
        self._kinds = {s.sensor_id: s.kind for s in resolved.kit.sensors}
        self._rules = {
            s.sensor_id: resolved.topic_map.lookup(source_topic(s.sensor_id))
            for s in resolved.kit.sensors
        }
        self.status: Optional[VehicleStatus] = None
        self.pid_state = ctl.PID_PROFILES[self.sc.controller.pid_profile]
        self.steer_map = ctl.SteerMap.linear(resolved.vehicle.max_tire_angle)
        self.sim_sock: Optional[socket.socket] = None
        self.av_sock: Optional[socket.socket] = None

    # -- transport -----------------------------------------------------

    def _connect(self) -> None:
        ep = self.sc.endpoints
        listener = socket.create_server((ep.av_host, ep.av_port))
        listener.settimeout(ACCEPT_TIMEOUT_S)
        try:
            try:
                self.av_sock, peer = listener.accept()
            except TimeoutError:
                raise _SessionOver("error", "no AV client connected") from None
            tune_stream(self.av_sock)
            log.info("bridge: AV connected from %s", peer)
        finally:
            listener.close()
        self.sim_sock = dial(ep.sim_host, ep.sim_port, deadline_s=ACCEPT_TIMEOUT_S)
        self.sim_reader = FrameReader(self.sim_sock)
        self.av_reader = FrameReader(self.av_sock)

    # -- sensor path ----------------------------------------------------

    def _next_sensor_arrival(self, remaining: float):
        """Arrival source for the tick ledger: reads one simulator frame,
        stamps ingress, and surfaces its (sensor_id, step)."""
        if self.stop_event is not None and self.stop_event.is_set():
            raise _SessionOver("aborted", "stopped by supervisor")
        try:
            frame = self.sim_reader.read_frame(timeout=min(remaining, 0.5))
        except TimeoutError:
            return None
        except ConnectionClosed as e:
            raise _SessionOver("connection_lost", str(e)) from None
        if frame is None:
            raise _SessionOver("connection_lost", "simulator closed the connection")
        if frame.msg_type is MsgType.SESSION_END:
            raise _SessionOver("completed", None)
        if frame.msg_type not in _SENSOR_FRAME_TYPES:
            raise _SessionOver("error", f"unexpected {frame.msg_type.name} frame from simulator")
        t_in = time.perf_counter_ns()
        sensor_id, _ = _unpack_str(frame.payload, 0)
        self.report.frames_in += 1
        self._msg_seq += 1
        kind = self._kinds.get(sensor_id, "unknown")
        self.tap.record_ingress(self._msg_seq, sensor_id, kind, t_in)
        self._pending[sensor_id] = (frame, self._msg_seq)
        return sensor_id, frame.step

    def _on_arrival(self, sensor_id: str, step: int, decision: TickDecision) -> None:
        frame, msg_id = self._pending.pop(sensor_id, (None, None))
        if decision is TickDecision.STALE_DATA:
            self.report.stale_frames += 1
            log.warning("bridge: dropped stale %s frame for step %d", sensor_id, step)
            return
        if decision is TickDecision.UNKNOWN_SENSOR:
            self.report.unknown_frames += 1
            log.warning("bridge: dropped frame from unknown sensor %r", sensor_id)
            return
        if frame is None:
            return
        self._forward(sensor_id, frame, msg_id)

    def _forward(self, sensor_id: str, frame: WireFrame, msg_id: int) -> None:
        rule = self._rules[sensor_id]
        step = frame.step
        if frame.msg_type is MsgType.VEHICLE_STATUS:
            raw = unpack_vehicle_status(step, frame.payload)
            self.status = raw
            converted = convert_vehicle_status(raw)
            steering, velocity = split_vehicle_status(converted)
            odom = compose_odometry(converted)
            out = rule.split_outputs
            send_frame(self.av_sock, MsgType.STEERING_REPORT, step,
                       pack_topic_prefix(out["steering"]), pack_steering_report(steering))
            send_frame(self.av_sock, MsgType.VELOCITY_REPORT, step,
                       pack_topic_prefix(out["velocity"]), pack_velocity_report(velocity))
            send_frame(self.av_sock, MsgType.ODOMETRY, step,
                       pack_topic_prefix(out["odometry"]), pack_odometry(odom))
        elif frame.msg_type is MsgType.POINT_CLOUD:
            cloud = convert_pointcloud(unpack_point_cloud(step, frame.payload))
            send_frame(self.av_sock, MsgType.POINT_CLOUD, step,
                       pack_topic_prefix(rule.destination), pack_point_cloud(cloud))
        elif frame.msg_type is MsgType.IMU:
            sample = convert_imu(unpack_imu(step, frame.payload))
            send_frame(self.av_sock, MsgType.IMU, step,
                       pack_topic_prefix(rule.destination), pack_imu(sample))
        else:
            # Camera and GNSS pass through byte-identical inside the envelope.
            send_frame(self.av_sock, frame.msg_type, step,
                       pack_topic_prefix(rule.destination), frame.payload)
        self.tap.record_egress(msg_id, time.perf_counter_ns())
        self.report.frames_forwarded += 1
        if len(self.report.sequence_log) < SEQUENCE_LOG_CAP:
            self.report.sequence_log.append(["fwd", step, sensor_id])

    # -- control path ---------------------------------------------------

    def _await_command(self, step: int) -> bool:
        """Read the AV's answer for `step`. Returns False when the session
        should end instead of ticking."""
        deadline = time.monotonic() + self.sc.step_deadline_s
        while True:
            if self.stop_event is not None and self.stop_event.is_set():
                raise _SessionOver("aborted", "stopped by supervisor")
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise _SessionOver("error", f"AV command for step {step} missed the deadline")
            try:
                frame = self.av_reader.read_frame(timeout=min(remaining, 0.5))
            except TimeoutError:
                continue
            except ConnectionClosed:
                raise _SessionOver("connection_lost", "AV closed the connection") from None
            if frame is None or frame.msg_type is MsgType.SESSION_END:
                raise _SessionOver("completed", None)
            if frame.msg_type is not MsgType.ACKERMANN_CMD:
                raise _SessionOver("error", f"unexpected {frame.msg_type.name} frame from AV")
            if frame.step != step:
                raise _SessionOver("error", f"AV answered step {frame.step} while bridge is at {step}")
            cmd = unpack_ackermann(frame.step, frame.payload)
            current_speed = self.status.velocity if self.status is not None else 0.0
            cc = self.sc.controller
            if cc.steer_map_enabled:
                self.pid_state, vc = ctl.ackermann_to_control(
                    cmd,
                    self.pid_state,
                    self.steer_map,
                    current_speed,
                    self.sc.fixed_dt,
                    deadband=cc.deadband,
                    feedforward_gain=cc.feedforward_gain,
                )
            else:
                # Diagnostic mode: raw tire-angle radians forwarded as the
                # normalized steer value, longitudinal path unchanged.
                self.pid_state, u = ctl.pid_step(
                    self.pid_state, cmd.target_speed, current_speed, self.sc.fixed_dt
                )
                throttle, brake = ctl.arbitrate(u, cc.deadband)
                steer = max(-1.0, min(1.0, cmd.tire_angle))
                vc = ctl.VehicleControl(step=cmd.step, throttle=throttle, brake=brake, steer=steer)
            send_frame(self.sim_sock, MsgType.VEHICLE_CONTROL, step, pack_vehicle_control(vc))
            return True

    # -- main loop --------------------------------------------------------

    def run(self) -> BridgeReport:
        t_start = time.monotonic()
        ledger = register_expected(self.resolved.kit.ids())
        try:
            self._connect()
            while True:
                outcome = await_step_or_timeout(
                    ledger,
                    self._next_sensor_arrival,
                    self.sc.step_deadline_s,
                    on_arrival=self._on_arrival,
                )
                if isinstance(outcome, TimeoutReport):
                    self.report.timeout_missing = tuple(sorted(outcome.missing))
                    raise _SessionOver("sensor_timeout", str(outcome))
                completed = ledger.step - 1
                self.report.ticks += 1
                self.report.tick_times.append(time.monotonic())
                if len(self.report.sequence_log) < SEQUENCE_LOG_CAP:
                    self.report.sequence_log.append(["tick", completed])
                send_frame(self.av_sock, MsgType.STEP_COMPLETE, completed)
                self._await_command(completed)
                send_frame(self.sim_sock, MsgType.TICK, completed + 1)
        except _SessionOver as over:
            self.report.session = over.session
            self.report.error = over.error
        except Exception as e:  # noqa: BLE001 - recorded, then re-raised
            self.report.session = "error"
            self.report.error = f"{type(e).__name__}: {e}"
            raise
        finally:
            self._shutdown(t_start)
        return self.report

    def _shutdown(self, t_start: float) -> None:
        for sock in (self.sim_sock, self.av_sock):
            if sock is None:
                continue
            try:
                sock.sendall(encode_frame(MsgType.SESSION_END, 0))
            except OSError:
                pass
            sock.close()
        self.report.wall_s = time.monotonic() - t_start
        self.report.latency_records = [
            [r.msg_id, r.sensor_id, r.kind, r.ingress_ns, r.egress_ns] for r in self.tap.records
        ]
        self.report.orphan_egress = self.tap.orphan_egress
        self.report.unpaired_ingress = self.tap.unpaired_ingress


def run_bridge(resolved: ResolvedScenario, report_path=None, stop_event=None) -> BridgeReport:
    session = BridgeSession(resolved, stop_event=stop_event)
    try:
        return session.run()
    finally:
        if report_path is not None:
            with open(report_path, "w") as f:
                json.dump(session.report.to_dict(), f)
